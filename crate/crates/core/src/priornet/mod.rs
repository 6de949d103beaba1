//! The untrained volumetric prior network.
//!
//! Layout, for base width `b` and three encoder stages:
//!
//! ```text
//! stem     conv3 1->b, SiLU                                   (full res)
//! enc k    SE(c) -> ResConv(c -> 2c, stride 2)                 c = b, 2b, 4b
//! bottom   ASPP over the configured dilations, 8b channels
//! dec k    attention(skip, gate) -> x2 trilinear -> ResConv(concat -> skip width)
//! tail     conv3 b->1, sigmoid
//! ```
//!
//! Every ResConv block is two (depthwise-separable) convolutions with
//! channel-wise layer norm, SiLU, and a residual shortcut.

mod graph;
mod kernels;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use graph::{Graph, NodeId};
pub use kernels::{ConvSpec, Tensor};

use crate::error::{Error, Result};
use crate::geometry::GridGeometry;
use crate::io;
use crate::volume::{Dims3, Volume};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"D2IPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub aspp_dilations: Vec<usize>,
    pub use_depthwise: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 3,
            aspp_dilations: vec![1, 2, 4],
            use_depthwise: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != 3 {
            return Err(Error::invalid(format!("network depth must be 3, got {}", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::invalid(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if self.aspp_dilations.is_empty()
            || self.aspp_dilations[0] == 0
            || self.aspp_dilations.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::invalid(format!(
                "aspp_dilations must be nonempty, positive and strictly increasing, got {:?}",
                self.aspp_dilations
            )));
        }
        Ok(())
    }

    /// Hash of the fields that determine the parameter schema.
    pub fn schema_hash(&self) -> String {
        let key = serde_json::json!({
            "base_channels": self.base_channels,
            "depth": self.depth,
            "aspp_dilations": self.aspp_dilations,
            "use_depthwise": self.use_depthwise,
        });
        io::fingerprint(key.to_string().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    KaimingInit,
    Upws,
    Tpp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Kaiming fan-in for weights; 0 otherwise.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Network parameters plus the iteration counter and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterState {
    pub tensors: Vec<NamedTensor>,
    pub iteration: usize,
    pub provenance: Provenance,
    pub schema_hash: String,
}

impl ParameterState {
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over all tensor values in schema order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same tensor values, bit for bit.
    pub fn same_values(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Copy handed to the next stage: counter reset, provenance replaced.
    pub fn handed_off(&self, provenance: Provenance) -> Self {
        Self {
            tensors: self.tensors.clone(),
            iteration: 0,
            provenance,
            schema_hash: self.schema_hash.clone(),
        }
    }

    fn check_schema(&self, schema: &[ParamSpec]) -> Result<()> {
        if self.tensors.len() != schema.len() {
            return Err(Error::invalid(format!(
                "parameter state has {} tensors, schema expects {}",
                self.tensors.len(),
                schema.len()
            )));
        }
        for (t, s) in self.tensors.iter().zip(schema) {
            if t.name != s.name || t.shape != s.shape || t.data.len() != s.len() {
                return Err(Error::invalid(format!(
                    "parameter {} {:?} does not match schema entry {} {:?}",
                    t.name, t.shape, s.name, s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, cfg: &NetworkConfig) -> Result<()> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_VERSION,
            config_hash: cfg.schema_hash(),
            config: cfg.clone(),
            provenance: self.provenance,
            iteration_counter: self.iteration,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut bytes = Vec::with_capacity(16 + header_bytes.len() + 8 * self.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::ensure_parent(path)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks it against `cfg`'s schema.
    pub fn load(path: &Path, cfg: &NetworkConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a parameter checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.config_hash != cfg.schema_hash() {
            return Err(bad("checkpoint was written for a different network configuration"));
        }
        let data = &bytes[20 + hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() != total * 8 {
            return Err(bad("tensor payload size does not match the header"));
        }
        let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let tensors = header
            .tensors
            .into_iter()
            .map(|t| {
                let n = t.shape.iter().product();
                NamedTensor {
                    name: t.name,
                    shape: t.shape,
                    data: values.by_ref().take(n).collect(),
                }
            })
            .collect();
        let state = Self {
            tensors,
            iteration: header.iteration_counter,
            provenance: header.provenance,
            schema_hash: header.config_hash,
        };
        state
            .check_schema(&parameter_schema(cfg)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config_hash: String,
    config: NetworkConfig,
    provenance: Provenance,
    iteration_counter: usize,
    tensors: Vec<TensorEntry>,
}

/// Fixed input noise `Z ~ U(0, 1)` shaped like the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInput {
    pub z: Volume,
    pub seed: u64,
}

impl NoiseInput {
    pub fn checksum(&self) -> String {
        io::checksum_f64(self.z.as_slice())
    }
}

pub fn sample_noise_input(grid: &GridGeometry, seed: u64) -> NoiseInput {
    sample_noise(grid.dims(), seed)
}

pub fn sample_noise(dims: Dims3, seed: u64) -> NoiseInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..dims.len()).map(|_| rng.random::<f64>()).collect();
    NoiseInput {
        z: crate::volume::devectorize(&values, dims).expect("sized to dims"),
        seed,
    }
}

/// Where parameters come from while a graph is being built.
enum Source<'a> {
    /// Record the schema and use zero-valued placeholders.
    Define,
    Bind(&'a ParameterState),
}

struct Builder<'a> {
    graph: Graph,
    source: Source<'a>,
    schema: Vec<ParamSpec>,
    leaves: Vec<NodeId>,
    cfg: &'a NetworkConfig,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a NetworkConfig, source: Source<'a>) -> Self {
        Self {
            graph: Graph::new(),
            source,
            schema: Vec::new(),
            leaves: Vec::new(),
            cfg,
        }
    }

    fn param(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize) -> NodeId {
        let n: usize = shape.iter().product();
        let data = match &self.source {
            Source::Define => vec![0.0; n],
            Source::Bind(state) => {
                let t = &state.tensors[self.schema.len()];
                debug_assert_eq!(t.name, name);
                t.data.clone()
            }
        };
        self.schema.push(ParamSpec {
            name,
            shape,
            kind,
            fan_in,
        });
        let id = self.graph.leaf(Tensor::flat(data));
        self.leaves.push(id);
        id
    }

    fn conv(&mut self, x: NodeId, name: &str, cin: usize, cout: usize, spec: ConvSpec) -> NodeId {
        let k = spec.kernel;
        let (shape, fan_in, bias_len) = if spec.depthwise {
            (vec![cin, 1, k, k, k], k * k * k, cin)
        } else {
            (vec![cout, cin, k, k, k], cin * k * k * k, cout)
        };
        let w = self.param(format!("{name}.weight"), shape, ParamKind::ConvWeight, fan_in);
        let b = self.param(format!("{name}.bias"), vec![bias_len], ParamKind::Bias, 0);
        self.graph.conv(x, w, b, cout, spec)
    }

    /// Depthwise-separable 3x3x3 conv, or a full conv when depthwise is off.
    fn sep_conv(&mut self, x: NodeId, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize) -> NodeId {
        if self.cfg.use_depthwise {
            let dw = self.conv(
                x,
                &format!("{name}.dw"),
                cin,
                cin,
                ConvSpec::depthwise(dilation).with_stride(stride),
            );
            self.conv(dw, &format!("{name}.pw"), cin, cout, ConvSpec::pointwise())
        } else {
            let spec = ConvSpec {
                kernel: 3,
                stride,
                dilation,
                depthwise: false,
            };
            self.conv(x, name, cin, cout, spec)
        }
    }

    fn norm(&mut self, x: NodeId, name: &str, c: usize) -> NodeId {
        let g = self.param(format!("{name}.scale"), vec![c], ParamKind::NormScale, 0);
        let b = self.param(format!("{name}.shift"), vec![c], ParamKind::NormShift, 0);
        self.graph.layer_norm(x, g, b)
    }

    fn res_block(&mut self, x: NodeId, name: &str, cin: usize, cout: usize, stride: usize) -> NodeId {
        let h = self.sep_conv(x, &format!("{name}.conv1"), cin, cout, stride, 1);
        let h = self.norm(h, &format!("{name}.norm1"), cout);
        let h = self.graph.silu(h);
        let h = self.sep_conv(h, &format!("{name}.conv2"), cout, cout, 1, 1);
        let h = self.norm(h, &format!("{name}.norm2"), cout);
        let shortcut = if stride != 1 || cin != cout {
            self.conv(
                x,
                &format!("{name}.shortcut"),
                cin,
                cout,
                ConvSpec::pointwise().with_stride(stride),
            )
        } else {
            x
        };
        let sum = self.graph.add(h, shortcut);
        self.graph.silu(sum)
    }

    fn squeeze_excite(&mut self, x: NodeId, name: &str, c: usize) -> NodeId {
        let hidden = (c / 4).max(2);
        let pooled = self.graph.global_avg_pool(x);
        let h = self.conv(pooled, &format!("{name}.fc1"), c, hidden, ConvSpec::pointwise());
        let h = self.graph.silu(h);
        let s = self.conv(h, &format!("{name}.fc2"), hidden, c, ConvSpec::pointwise());
        let s = self.graph.sigmoid(s);
        self.graph.channel_scale(x, s)
    }

    fn aspp(&mut self, x: NodeId, c: usize) -> NodeId {
        let dilations = self.cfg.aspp_dilations.clone();
        let mut cat: Option<NodeId> = None;
        for (k, d) in dilations.iter().enumerate() {
            let h = self.sep_conv(x, &format!("aspp.branch{k}"), c, c, 1, *d);
            let h = self.graph.silu(h);
            cat = Some(match cat {
                None => h,
                Some(prev) => self.graph.concat(prev, h),
            });
        }
        let cat = cat.expect("at least one dilation");
        let h = self.conv(cat, "aspp.project", c * dilations.len(), c, ConvSpec::pointwise());
        self.graph.silu(h)
    }

    /// Additive attention gate: the coarse decoder feature gates the skip.
    fn attention(&mut self, skip: NodeId, gate: NodeId, name: &str, c_skip: usize, c_gate: usize) -> NodeId {
        let inter = c_skip;
        let q = self.conv(gate, &format!("{name}.gate"), c_gate, inter, ConvSpec::pointwise());
        let q = self.graph.upsample(q);
        let k = self.conv(skip, &format!("{name}.skip"), c_skip, inter, ConvSpec::pointwise());
        let h = self.graph.add(q, k);
        let h = self.graph.silu(h);
        let a = self.conv(h, &format!("{name}.psi"), inter, 1, ConvSpec::pointwise());
        let a = self.graph.sigmoid(a);
        self.graph.spatial_gate(skip, a)
    }

    fn network(&mut self, z: NodeId) -> NodeId {
        let b = self.cfg.base_channels;
        let depth = self.cfg.depth;
        let stem = self.conv(z, "stem", 1, b, ConvSpec::full(3));
        let mut h = self.graph.silu(stem);
        let mut skips = Vec::with_capacity(depth);
        let mut ch = b;
        for stage in 1..=depth {
            skips.push((h, ch));
            let name = format!("enc{stage}");
            h = self.squeeze_excite(h, &format!("{name}.se"), ch);
            h = self.res_block(h, &format!("{name}.res"), ch, 2 * ch, 2);
            ch *= 2;
        }
        h = self.aspp(h, ch);
        for stage in (1..=depth).rev() {
            let (skip, cs) = skips[stage - 1];
            let name = format!("dec{stage}");
            let gated = self.attention(skip, h, &format!("{name}.att"), cs, ch);
            let up = self.graph.upsample(h);
            let fused = self.graph.concat(up, gated);
            h = self.res_block(fused, &format!("{name}.res"), ch + cs, cs, 1);
            ch = cs;
        }
        let out = self.conv(h, "tail", b, 1, ConvSpec::full(3));
        self.graph.sigmoid(out)
    }
}

/// Parameter names, shapes and kinds in their fixed order.
pub fn parameter_schema(cfg: &NetworkConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut b = Builder::new(cfg, Source::Define);
    let dims = Dims3::new(8, 8, 8);
    let z = b.graph.leaf(Tensor::zeros(1, [dims.planes, dims.rows, dims.cols]));
    b.network(z);
    Ok(b.schema)
}

pub fn count_parameters(cfg: &NetworkConfig) -> Result<usize> {
    Ok(parameter_schema(cfg)?.iter().map(ParamSpec::len).sum())
}

/// Weights and bias of one depthwise-separable 3x3x3 convolution.
pub fn separable_conv_param_count(cin: usize, cout: usize) -> usize {
    27 * cin + cin + cin * cout + cout
}

/// Weights and bias of one full 3x3x3 convolution.
pub fn full_conv_param_count(cin: usize, cout: usize) -> usize {
    27 * cin * cout + cout
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases and
/// shifts, unit norm scales.
pub fn init_parameters(cfg: &NetworkConfig) -> Result<ParameterState> {
    let schema = parameter_schema(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors = schema
        .into_iter()
        .map(|spec| {
            let n = spec.len();
            let data = match spec.kind {
                ParamKind::ConvWeight => {
                    let std = (2.0 / spec.fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamKind::Bias | ParamKind::NormShift => vec![0.0; n],
                ParamKind::NormScale => vec![1.0; n],
            };
            NamedTensor {
                name: spec.name,
                shape: spec.shape,
                data,
            }
        })
        .collect();
    Ok(ParameterState {
        tensors,
        iteration: 0,
        provenance: Provenance::KaimingInit,
        schema_hash: cfg.schema_hash(),
    })
}

/// The prior network bound to one grid shape.
#[derive(Clone, Debug)]
pub struct FastResUNet {
    cfg: NetworkConfig,
    dims: Dims3,
    schema: Vec<ParamSpec>,
}

impl FastResUNet {
    pub fn new(cfg: NetworkConfig, dims: Dims3) -> Result<Self> {
        let factor = 1usize << cfg.depth;
        for (axis, n) in [("rows", dims.rows), ("cols", dims.cols), ("planes", dims.planes)] {
            if n == 0 || n % factor != 0 {
                return Err(Error::invalid(format!(
                    "grid {axis} = {n} is not divisible by {factor} (2^depth)"
                )));
            }
        }
        let schema = parameter_schema(&cfg)?;
        Ok(Self { cfg, dims, schema })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn schema(&self) -> &[ParamSpec] {
        &self.schema
    }

    pub fn init_parameters(&self) -> Result<ParameterState> {
        init_parameters(&self.cfg)
    }

    fn build<'a>(&'a self, theta: &'a ParameterState, z: &NoiseInput) -> Result<(Builder<'a>, NodeId)> {
        theta.check_schema(&self.schema)?;
        if z.z.dims() != self.dims {
            return Err(Error::invalid(format!(
                "noise input shape {:?} does not match network grid {:?}",
                z.z.dims(),
                self.dims
            )));
        }
        let mut b = Builder::new(&self.cfg, Source::Bind(theta));
        let input = b.graph.leaf(Tensor::from_vec(
            1,
            [self.dims.planes, self.dims.rows, self.dims.cols],
            z.z.as_slice().to_vec(),
        ));
        let out = b.network(input);
        Ok((b, out))
    }

    /// Output volume in `(0, 1)`, same shape as the grid.
    pub fn forward(&self, theta: &ParameterState, z: &NoiseInput) -> Result<Volume> {
        let (b, out) = self.build(theta, z)?;
        crate::volume::devectorize(&b.graph.value(out).data, self.dims)
    }

    /// Runs the network, hands the output to `head` (which returns any value
    /// plus `d loss / d output`), and back-propagates to every parameter.
    pub fn forward_backward<T>(
        &self,
        theta: &ParameterState,
        z: &NoiseInput,
        head: impl FnOnce(&Volume) -> Result<(T, Vec<f64>)>,
    ) -> Result<(Volume, T, Vec<Vec<f64>>)> {
        let (b, out) = self.build(theta, z)?;
        let output = crate::volume::devectorize(&b.graph.value(out).data, self.dims)?;
        let (value, seed) = head(&output)?;
        if seed.len() != output.as_slice().len() {
            return Err(Error::invalid("output gradient has the wrong length"));
        }
        let v = b.graph.value(out);
        let grads = b.graph.backward(out, Tensor::from_vec(v.channels, v.spatial, seed));
        let param_grads = b
            .leaves
            .iter()
            .zip(&self.schema)
            .map(|(id, spec)| grads[id_index(*id)].clone().unwrap_or_else(|| vec![0.0; spec.len()]))
            .collect();
        Ok((output, value, param_grads))
    }
}

fn id_index(id: NodeId) -> usize {
    id.0
}

/// Adaptive-moment optimizer with constant learning rate and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, betas: (f64, f64), theta: &ParameterState) -> Self {
        let zeros: Vec<Vec<f64>> = theta.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut ParameterState, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (tensor, g)) in theta.tensors.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        theta.iteration += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, Extent};

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_parameters(&tiny()).unwrap();
        let b = init_parameters(&tiny()).unwrap();
        assert!(a.same_values(&b));
        assert_eq!(a.checksum(), b.checksum());
        let other = init_parameters(&NetworkConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a.checksum(), other.checksum());
        assert_eq!(a.provenance, Provenance::KaimingInit);
    }

    #[test]
    fn biases_start_at_zero_and_scales_at_one() {
        let cfg = tiny();
        let theta = init_parameters(&cfg).unwrap();
        let schema = parameter_schema(&cfg).unwrap();
        for (t, s) in theta.tensors.iter().zip(&schema) {
            match s.kind {
                ParamKind::Bias | ParamKind::NormShift => assert!(t.data.iter().all(|v| *v == 0.0), "{}", t.name),
                ParamKind::NormScale => assert!(t.data.iter().all(|v| *v == 1.0)),
                ParamKind::ConvWeight => assert!(t.data.iter().any(|v| *v != 0.0)),
            }
        }
    }

    #[test]
    fn kaiming_variance_on_large_layers() {
        let cfg = NetworkConfig {
            base_channels: 16,
            ..NetworkConfig::default()
        };
        let theta = init_parameters(&cfg).unwrap();
        let schema = parameter_schema(&cfg).unwrap();
        let mut checked = 0;
        for (t, s) in theta.tensors.iter().zip(&schema) {
            if s.kind != ParamKind::ConvWeight || t.data.len() < 2000 {
                continue;
            }
            let n = t.data.len() as f64;
            let mean = t.data.iter().sum::<f64>() / n;
            let var = t.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let want = 2.0 / s.fan_in as f64;
            assert!((var / want - 1.0).abs() < 0.2, "{}: {var} vs {want}", t.name);
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn noise_input_range_and_determinism() {
        let g = build_grid(16, 16, 16, Extent::unit()).unwrap();
        let z = sample_noise_input(&g, 3);
        assert!(z.z.as_slice().iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(z, sample_noise_input(&g, 3));
        let big = sample_noise_input(&build_grid(32, 32, 32, Extent::unit()).unwrap(), 4);
        let mean = big.z.as_slice().iter().sum::<f64>() / 32768.0;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn forward_shape_range_and_purity() {
        let dims = Dims3::new(16, 16, 8);
        let net = FastResUNet::new(tiny(), dims).unwrap();
        let theta = net.init_parameters().unwrap();
        let z = sample_noise(dims, 1);
        let out = net.forward(&theta, &z).unwrap();
        assert_eq!(out.dims(), dims);
        assert!(out.as_slice().iter().all(|v| *v > 0.0 && *v < 1.0));
        let again = net.forward(&theta, &z).unwrap();
        assert!(out.as_slice().iter().zip(again.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        assert!(matches!(
            FastResUNet::new(tiny(), Dims3::new(16, 12, 8)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(NetworkConfig { depth: 2, ..tiny() }.validate().is_err());
        assert!(NetworkConfig { base_channels: 2, ..tiny() }.validate().is_err());
        assert!(NetworkConfig { aspp_dilations: vec![], ..tiny() }.validate().is_err());
        assert!(NetworkConfig { aspp_dilations: vec![1, 1], ..tiny() }.validate().is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(separable_conv_param_count(16, 16), 27 * 16 + 16 + 16 * 16 + 16);
        assert_eq!(full_conv_param_count(16, 16), 27 * 16 * 16 + 16);
        let sep = count_parameters(&tiny()).unwrap();
        let full = count_parameters(&NetworkConfig { use_depthwise: false, ..tiny() }).unwrap();
        assert!(sep < full);
        let c8 = count_parameters(&NetworkConfig { base_channels: 8, ..tiny() }).unwrap();
        let c16 = count_parameters(&NetworkConfig { base_channels: 16, ..tiny() }).unwrap();
        assert!(c16 > 2 * c8);
        let theta = init_parameters(&tiny()).unwrap();
        assert_eq!(theta.len(), sep);
    }

    #[test]
    fn block_inventory() {
        let schema = parameter_schema(&tiny()).unwrap();
        let count = |prefix: &str, suffix: &str| {
            schema
                .iter()
                .filter(|s| s.name.starts_with(prefix) && s.name.ends_with(suffix))
                .count()
        };
        // six residual blocks, three SE units, three attention gates
        let res_blocks: std::collections::BTreeSet<_> = schema
            .iter()
            .filter_map(|s| s.name.split(".res.").next().filter(|_| s.name.contains(".res.")))
            .collect();
        assert_eq!(res_blocks.len(), 6);
        assert_eq!(count("enc", ".se.fc1.weight"), 3);
        assert_eq!(count("dec", ".att.psi.weight"), 3);
        assert_eq!(count("aspp.branch", ".pw.weight"), 3);
        assert_eq!(schema.first().unwrap().name, "stem.weight");
        assert_eq!(schema.last().unwrap().name, "tail.bias");
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.ckpt");
        let cfg = tiny();
        let mut theta = init_parameters(&cfg).unwrap();
        theta.iteration = 17;
        theta.provenance = Provenance::Upws;
        theta.save(&path, &cfg).unwrap();
        let back = ParameterState::load(&path, &cfg).unwrap();
        assert!(back.same_values(&theta));
        assert_eq!(back.iteration, 17);
        assert_eq!(back.provenance, Provenance::Upws);
        let other = NetworkConfig { base_channels: 8, ..cfg };
        assert!(matches!(ParameterState::load(&path, &other), Err(Error::Format { .. })));
    }

    #[test]
    fn gradient_step_keeps_schema() {
        let dims = Dims3::new(8, 8, 8);
        let net = FastResUNet::new(tiny(), dims).unwrap();
        let mut theta = net.init_parameters().unwrap();
        let z = sample_noise(dims, 2);
        let (_, loss, grads) = net
            .forward_backward(&theta, &z, |out| {
                let s: f64 = out.as_slice().iter().sum();
                Ok((s, vec![1.0; out.as_slice().len()]))
            })
            .unwrap();
        assert!(loss.is_finite());
        let mut adam = Adam::new(1e-3, (0.9, 0.999), &theta);
        let before = theta.checksum();
        adam.step(&mut theta, &grads);
        assert_ne!(theta.checksum(), before);
        assert_eq!(theta.iteration, 1);
        net.forward(&theta, &z).unwrap();
    }
}
