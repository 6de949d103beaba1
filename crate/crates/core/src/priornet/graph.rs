//! Minimal reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep
//! visits every node after all of its consumers.

use super::kernels::{
    conv_backward, conv_forward, layer_norm_backward, layer_norm_forward, sigmoid, upsample_backward,
    upsample_forward, ConvSpec, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    },
    Add(NodeId, NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// `x[c, :] * s[c]`
    ChannelScale { x: NodeId, s: NodeId },
    /// `x[c, v] * a[0, v]`
    SpatialGate { x: NodeId, a: NodeId },
    Concat(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    Upsample(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, cout: usize, spec: ConvSpec) -> NodeId {
        let y = conv_forward(self.value(x), &self.value(w).data, &self.value(b).data, cout, &spec);
        self.push(y, Op::Conv { x, w, b, spec })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.channels, va.spatial), (vb.channels, vb.spatial), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let y = Tensor::from_vec(va.channels, va.spatial, data);
        self.push(y, Op::Add(a, b))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data.iter().map(|&t| t * sigmoid(t)).collect();
        let y = Tensor::from_vec(v.channels, v.spatial, data);
        self.push(y, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data.iter().map(|&t| sigmoid(t)).collect();
        let y = Tensor::from_vec(v.channels, v.spatial, data);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (y, xhat, rstd) = layer_norm_forward(self.value(x), &self.value(gamma).data, &self.value(beta).data);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (self.value(x), self.value(s));
        assert_eq!(vs.data.len(), vx.channels, "channel scale length");
        let n = vx.voxels();
        let mut y = vx.clone();
        for (c, chunk) in y.data.chunks_exact_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= vs.data[c]);
        }
        self.push(y, Op::ChannelScale { x, s })
    }

    pub fn spatial_gate(&mut self, x: NodeId, a: NodeId) -> NodeId {
        let (vx, va) = (self.value(x), self.value(a));
        assert_eq!(va.data.len(), vx.voxels(), "gate must be one channel at the input resolution");
        let n = vx.voxels();
        let mut y = vx.clone();
        for chunk in y.data.chunks_exact_mut(n) {
            chunk.iter_mut().zip(&va.data).for_each(|(v, g)| *v *= g);
        }
        self.push(y, Op::SpatialGate { x, a })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.spatial, vb.spatial, "concat spatial mismatch");
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let y = Tensor::from_vec(va.channels + vb.channels, va.spatial, data);
        self.push(y, Op::Concat(a, b))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = v.voxels() as f64;
        let data = (0..v.channels).map(|c| v.channel(c).iter().sum::<f64>() / n).collect();
        let y = Tensor::from_vec(v.channels, [1, 1, 1], data);
        self.push(y, Op::GlobalAvgPool(x))
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let y = upsample_forward(self.value(x));
        self.push(y, Op::Upsample(x))
    }

    /// Back-propagates `seed` from `output`. Returns one gradient slot per
    /// node; nodes that do not influence `output` get `None`.
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.data.len(), self.value(output).data.len(), "seed shape");
        grads[output.0] = Some(seed.data);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, spec } => {
                    let gy = Tensor::from_vec(node.value.channels, node.value.spatial, g.clone());
                    let vx = self.value(*x);
                    let vw = self.value(*w);
                    let mut gx = take_or_zero(&mut grads, *x, vx.data.len());
                    let mut gw = take_or_zero(&mut grads, *w, vw.data.len());
                    let mut gb = take_or_zero(&mut grads, *b, node.value.channels);
                    conv_backward(vx, &vw.data, &gy, spec, &mut gx, &mut gw, &mut gb);
                    grads[x.0] = Some(gx);
                    grads[w.0] = Some(gw);
                    grads[b.0] = Some(gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Silu(x) => {
                    let vx = self.value(*x);
                    let local: Vec<f64> = vx
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&t, gi)| {
                            let s = sigmoid(t);
                            gi * (s + t * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, &local);
                }
                Op::Sigmoid(x) => {
                    let local: Vec<f64> = node.value.data.iter().zip(&g).map(|(s, gi)| gi * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, &local);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gy = Tensor::from_vec(node.value.channels, node.value.spatial, g.clone());
                    let c = node.value.channels;
                    let mut gx = take_or_zero(&mut grads, *x, node.value.data.len());
                    let mut gg = take_or_zero(&mut grads, *gamma, c);
                    let mut gb = take_or_zero(&mut grads, *beta, c);
                    layer_norm_backward(&gy, &self.value(*gamma).data, xhat, rstd, &mut gx, &mut gg, &mut gb);
                    grads[x.0] = Some(gx);
                    grads[gamma.0] = Some(gg);
                    grads[beta.0] = Some(gb);
                }
                Op::ChannelScale { x, s } => {
                    let (vx, vs) = (self.value(*x), self.value(*s));
                    let n = vx.voxels();
                    let mut gx = vec![0.0; g.len()];
                    let mut gs = vec![0.0; vs.data.len()];
                    for c in 0..vx.channels {
                        for k in c * n..(c + 1) * n {
                            gx[k] = g[k] * vs.data[c];
                            gs[c] += g[k] * vx.data[k];
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *s, &gs);
                }
                Op::SpatialGate { x, a } => {
                    let (vx, va) = (self.value(*x), self.value(*a));
                    let n = vx.voxels();
                    let mut gx = vec![0.0; g.len()];
                    let mut ga = vec![0.0; n];
                    for c in 0..vx.channels {
                        for v in 0..n {
                            let k = c * n + v;
                            gx[k] = g[k] * va.data[v];
                            ga[v] += g[k] * vx.data[k];
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Concat(a, b) => {
                    let split = self.value(*a).data.len();
                    accumulate(&mut grads, *a, &g[..split]);
                    accumulate(&mut grads, *b, &g[split..]);
                }
                Op::GlobalAvgPool(x) => {
                    let vx = self.value(*x);
                    let n = vx.voxels();
                    let mut gx = vec![0.0; vx.data.len()];
                    for c in 0..vx.channels {
                        let share = g[c] / n as f64;
                        gx[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = share);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Upsample(x) => {
                    let vx = self.value(*x);
                    let gy = Tensor::from_vec(node.value.channels, node.value.spatial, g.clone());
                    let mut gx = take_or_zero(&mut grads, *x, vx.data.len());
                    upsample_backward(vx.spatial, &gy, &mut gx);
                    grads[x.0] = Some(gx);
                }
            }
            grads[idx] = Some(g);
        }
        grads
    }
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> Vec<f64> {
    grads[id.0].take().unwrap_or_else(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
