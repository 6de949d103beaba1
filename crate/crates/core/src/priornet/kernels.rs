//! Dense kernels over channel-major volumetric tensors, with their adjoints.
//!
//! A tensor holds `channels` volumes of spatial shape `[planes, rows, cols]`
//! laid out exactly like [`crate::volume::Volume`].

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    /// `[planes, rows, cols]`.
    pub spatial: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, spatial: [usize; 3]) -> Self {
        Self {
            channels,
            spatial,
            data: vec![0.0; channels * spatial[0] * spatial[1] * spatial[2]],
        }
    }

    pub fn from_vec(channels: usize, spatial: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * spatial[0] * spatial[1] * spatial[2]);
        Self {
            channels,
            spatial,
            data,
        }
    }

    /// A flat parameter vector viewed as a tensor.
    pub fn flat(data: Vec<f64>) -> Self {
        Self {
            channels: data.len(),
            spatial: [1, 1, 1],
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        self.spatial[0] * self.spatial[1] * self.spatial[2]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.spatial)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Convolution geometry. Padding is `dilation * (kernel - 1) / 2`, so a
/// stride-1 convolution preserves the spatial shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub depthwise: bool,
}

impl ConvSpec {
    pub const fn full(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation: 1,
            depthwise: false,
        }
    }

    pub const fn pointwise() -> Self {
        Self::full(1)
    }

    pub const fn depthwise(dilation: usize) -> Self {
        Self {
            kernel: 3,
            stride: 1,
            dilation,
            depthwise: true,
        }
    }

    pub const fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        s.map(|n| self.out_len(n))
    }

    /// Number of weights for `cin -> cout`.
    pub fn weight_len(&self, cin: usize, cout: usize) -> usize {
        let taps = self.kernel.pow(3);
        if self.depthwise {
            cin * taps
        } else {
            cin * cout * taps
        }
    }

    /// Valid output range `[lo, hi)` along one axis for tap `t`, plus the
    /// input offset `in = o * stride + off`.
    fn tap_range(&self, n_in: usize, n_out: usize, t: usize) -> (usize, usize, isize) {
        let off = (t * self.dilation) as isize - self.pad() as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let span = n_in as isize - off;
        let hi = if span <= 0 { 0 } else { ((span + s - 1) / s).min(n_out as isize) };
        (lo as usize, hi.max(lo) as usize, off)
    }
}

struct TapPlan {
    /// Per axis and tap: (lo, hi, offset).
    ranges: [Vec<(usize, usize, isize)>; 3],
}

impl TapPlan {
    fn new(spec: &ConvSpec, inp: [usize; 3], out: [usize; 3]) -> Self {
        let axis = |a: usize| (0..spec.kernel).map(|t| spec.tap_range(inp[a], out[a], t)).collect();
        Self {
            ranges: [axis(0), axis(1), axis(2)],
        }
    }
}

/// Calls `f(out_index, in_index)` for every valid output/input voxel pair of
/// tap `(tp, tr, tc)`, iterating the innermost axis contiguously.
#[inline]
fn for_each_tap_pair(
    plan: &TapPlan,
    stride: usize,
    inp: [usize; 3],
    out: [usize; 3],
    taps: (usize, usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    let (p_lo, p_hi, p_off) = plan.ranges[0][taps.0];
    let (r_lo, r_hi, r_off) = plan.ranges[1][taps.1];
    let (c_lo, c_hi, c_off) = plan.ranges[2][taps.2];
    if c_lo >= c_hi {
        return;
    }
    let len = c_hi - c_lo;
    for op in p_lo..p_hi {
        let ip = (op * stride) as isize + p_off;
        for or in r_lo..r_hi {
            let ir = (or * stride) as isize + r_off;
            let o_base = (op * out[1] + or) * out[2] + c_lo;
            let i_base = ((ip as usize * inp[1] + ir as usize) * inp[2]) as isize
                + (c_lo * stride) as isize
                + c_off;
            f(o_base, i_base as usize, len);
        }
    }
}

pub fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], cout: usize, spec: &ConvSpec) -> Tensor {
    let cin = x.channels;
    let out_sp = spec.out_spatial(x.spatial);
    let cout = if spec.depthwise { cin } else { cout };
    let mut y = Tensor::zeros(cout, out_sp);
    let n_out = y.voxels();
    let n_in = x.voxels();
    let k = spec.kernel;
    let taps = k * k * k;
    let plan = TapPlan::new(spec, x.spatial, out_sp);
    let s = spec.stride;
    for co in 0..cout {
        let yc = &mut y.data[co * n_out..(co + 1) * n_out];
        yc.iter_mut().for_each(|v| *v = b[co]);
        let in_channels: Box<dyn Iterator<Item = usize>> = if spec.depthwise {
            Box::new(std::iter::once(co))
        } else {
            Box::new(0..cin)
        };
        for ci in in_channels {
            let xc = &x.data[ci * n_in..(ci + 1) * n_in];
            let wbase = if spec.depthwise { co * taps } else { (co * cin + ci) * taps };
            for tp in 0..k {
                for tr in 0..k {
                    for tc in 0..k {
                        let wv = w[wbase + (tp * k + tr) * k + tc];
                        for_each_tap_pair(&plan, s, x.spatial, out_sp, (tp, tr, tc), |o, i, len| {
                            if s == 1 {
                                for (yo, xi) in yc[o..o + len].iter_mut().zip(&xc[i..i + len]) {
                                    *yo += wv * xi;
                                }
                            } else {
                                for j in 0..len {
                                    yc[o + j] += wv * xc[i + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv_forward`]: accumulates into `gx`, `gw`, `gb`.
pub fn conv_backward(
    x: &Tensor,
    w: &[f64],
    gy: &Tensor,
    spec: &ConvSpec,
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let cin = x.channels;
    let cout = gy.channels;
    let n_out = gy.voxels();
    let n_in = x.voxels();
    let k = spec.kernel;
    let taps = k * k * k;
    let plan = TapPlan::new(spec, x.spatial, gy.spatial);
    let s = spec.stride;
    for co in 0..cout {
        let gyc = &gy.data[co * n_out..(co + 1) * n_out];
        gb[co] += gyc.iter().sum::<f64>();
        let in_channels: Box<dyn Iterator<Item = usize>> = if spec.depthwise {
            Box::new(std::iter::once(co))
        } else {
            Box::new(0..cin)
        };
        for ci in in_channels {
            let xc = &x.data[ci * n_in..(ci + 1) * n_in];
            let gxc = &mut gx[ci * n_in..(ci + 1) * n_in];
            let wbase = if spec.depthwise { co * taps } else { (co * cin + ci) * taps };
            for tp in 0..k {
                for tr in 0..k {
                    for tc in 0..k {
                        let widx = wbase + (tp * k + tr) * k + tc;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for_each_tap_pair(&plan, s, x.spatial, gy.spatial, (tp, tr, tc), |o, i, len| {
                            if s == 1 {
                                for ((g, xi), gxi) in gyc[o..o + len]
                                    .iter()
                                    .zip(&xc[i..i + len])
                                    .zip(gxc[i..i + len].iter_mut())
                                {
                                    acc += g * xi;
                                    *gxi += wv * g;
                                }
                            } else {
                                for j in 0..len {
                                    let g = gyc[o + j];
                                    acc += g * xc[i + j * s];
                                    gxc[i + j * s] += wv * g;
                                }
                            }
                        });
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Per-axis linear interpolation weights for x2 upsampling with half-pixel
/// centers: `(i0, i1, w0, w1)` per output index.
fn upsample_axis(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn upsample_forward(x: &Tensor) -> Tensor {
    let [p, r, c] = x.spatial;
    let out_sp = [2 * p, 2 * r, 2 * c];
    let (ap, ar, ac) = (upsample_axis(p), upsample_axis(r), upsample_axis(c));
    let mut y = Tensor::zeros(x.channels, out_sp);
    let (n_in, n_out) = (x.voxels(), y.voxels());
    for ch in 0..x.channels {
        let xc = &x.data[ch * n_in..(ch + 1) * n_in];
        let yc = &mut y.data[ch * n_out..(ch + 1) * n_out];
        let mut o = 0;
        for &(p0, p1, wp0, wp1) in &ap {
            for &(r0, r1, wr0, wr1) in &ar {
                for &(c0, c1, wc0, wc1) in &ac {
                    let at = |pp: usize, rr: usize, cc: usize| xc[(pp * r + rr) * c + cc];
                    yc[o] = wp0 * (wr0 * (wc0 * at(p0, r0, c0) + wc1 * at(p0, r0, c1))
                        + wr1 * (wc0 * at(p0, r1, c0) + wc1 * at(p0, r1, c1)))
                        + wp1 * (wr0 * (wc0 * at(p1, r0, c0) + wc1 * at(p1, r0, c1))
                            + wr1 * (wc0 * at(p1, r1, c0) + wc1 * at(p1, r1, c1)));
                    o += 1;
                }
            }
        }
    }
    y
}

pub fn upsample_backward(in_spatial: [usize; 3], gy: &Tensor, gx: &mut [f64]) {
    let [p, r, c] = in_spatial;
    let (ap, ar, ac) = (upsample_axis(p), upsample_axis(r), upsample_axis(c));
    let n_in = p * r * c;
    let n_out = gy.voxels();
    for ch in 0..gy.channels {
        let gyc = &gy.data[ch * n_out..(ch + 1) * n_out];
        let gxc = &mut gx[ch * n_in..(ch + 1) * n_in];
        let mut o = 0;
        for &(p0, p1, wp0, wp1) in &ap {
            for &(r0, r1, wr0, wr1) in &ar {
                for &(c0, c1, wc0, wc1) in &ac {
                    let g = gyc[o];
                    for (pp, wp) in [(p0, wp0), (p1, wp1)] {
                        for (rr, wr) in [(r0, wr0), (r1, wr1)] {
                            for (cc, wc) in [(c0, wc0), (c1, wc1)] {
                                gxc[(pp * r + rr) * c + cc] += wp * wr * wc * g;
                            }
                        }
                    }
                    o += 1;
                }
            }
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Channel-wise layer norm at every voxel. Returns the output plus the
/// normalized input and per-voxel reciprocal std for the backward pass.
pub fn layer_norm_forward(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = x.channels;
    let n = x.voxels();
    let mut mean = vec![0.0; n];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(x.channel(ch)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let mut var = vec![0.0; n];
    for ch in 0..c {
        for ((s, v), m) in var.iter_mut().zip(x.channel(ch)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let rstd: Vec<f64> = var.iter().map(|s| 1.0 / (s / c as f64 + LAYER_NORM_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; c * n];
    let mut y = x.zeros_like();
    for ch in 0..c {
        let xc = x.channel(ch);
        for k in 0..n {
            let h = (xc[k] - mean[k]) * rstd[k];
            xhat[ch * n + k] = h;
            y.data[ch * n + k] = gamma[ch] * h + beta[ch];
        }
    }
    (y, xhat, rstd)
}

pub fn layer_norm_backward(
    gy: &Tensor,
    gamma: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gx: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    let c = gy.channels;
    let n = gy.voxels();
    let mut mean_g = vec![0.0; n];
    let mut mean_gx = vec![0.0; n];
    for ch in 0..c {
        for k in 0..n {
            let g = gy.data[ch * n + k];
            let h = xhat[ch * n + k];
            ggamma[ch] += g * h;
            gbeta[ch] += g;
            let dh = g * gamma[ch];
            mean_g[k] += dh;
            mean_gx[k] += dh * h;
        }
    }
    let inv_c = 1.0 / c as f64;
    for ch in 0..c {
        for k in 0..n {
            let dh = gy.data[ch * n + k] * gamma[ch];
            let h = xhat[ch * n + k];
            gx[ch * n + k] += rstd[k] * (dh - mean_g[k] * inv_c - h * mean_gx[k] * inv_c);
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition: every output voxel sums over taps with bounds checks.
    fn conv_reference(x: &Tensor, w: &[f64], b: &[f64], cout: usize, spec: &ConvSpec) -> Tensor {
        let out_sp = spec.out_spatial(x.spatial);
        let cout = if spec.depthwise { x.channels } else { cout };
        let k = spec.kernel as isize;
        let pad = (spec.dilation * (spec.kernel - 1) / 2) as isize;
        let mut y = Tensor::zeros(cout, out_sp);
        for co in 0..cout {
            for op in 0..out_sp[0] {
                for or in 0..out_sp[1] {
                    for oc in 0..out_sp[2] {
                        let mut acc = b[co];
                        let cis: Vec<usize> = if spec.depthwise { vec![co] } else { (0..x.channels).collect() };
                        for ci in cis {
                            for tp in 0..k {
                                for tr in 0..k {
                                    for tc in 0..k {
                                        let d = spec.dilation as isize;
                                        let s = spec.stride as isize;
                                        let ip = op as isize * s + tp * d - pad;
                                        let ir = or as isize * s + tr * d - pad;
                                        let ic = oc as isize * s + tc * d - pad;
                                        if ip < 0 || ir < 0 || ic < 0 {
                                            continue;
                                        }
                                        let (ip, ir, ic) = (ip as usize, ir as usize, ic as usize);
                                        if ip >= x.spatial[0] || ir >= x.spatial[1] || ic >= x.spatial[2] {
                                            continue;
                                        }
                                        let wi = if spec.depthwise {
                                            co as isize * k * k * k
                                        } else {
                                            (co * x.channels + ci) as isize * k * k * k
                                        } + (tp * k + tr) * k + tc;
                                        let xi = ci * x.voxels() + (ip * x.spatial[1] + ir) * x.spatial[2] + ic;
                                        acc += w[wi as usize] * x.data[xi];
                                    }
                                }
                            }
                        }
                        let yv = y.voxels();
                        y.data[co * yv + (op * out_sp[1] + or) * out_sp[2] + oc] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407) | 1;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 20_000) as f64 / 10_000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_reference() {
        let specs = [
            (ConvSpec::full(3), 3),
            (ConvSpec::full(3).with_stride(2), 2),
            (ConvSpec::pointwise(), 4),
            (ConvSpec::pointwise().with_stride(2), 2),
            (ConvSpec::depthwise(1), 0),
            (ConvSpec::depthwise(2), 0),
            (ConvSpec::depthwise(1).with_stride(2), 0),
            (ConvSpec::depthwise(4), 0),
        ];
        let x = Tensor::from_vec(2, [4, 6, 2], pseudo(2 * 48, 1));
        for (spec, cout) in specs {
            let cout_eff = if spec.depthwise { 2 } else { cout };
            let w = pseudo(spec.weight_len(2, cout_eff), 2);
            let b = pseudo(cout_eff, 3);
            let got = conv_forward(&x, &w, &b, cout, &spec);
            let want = conv_reference(&x, &w, &b, cout, &spec);
            assert_eq!(got.spatial, want.spatial);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "{spec:?}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> linear in x and w: check both adjoints by inner products.
        for spec in [ConvSpec::full(3).with_stride(2), ConvSpec::depthwise(2), ConvSpec::pointwise()] {
            let x = Tensor::from_vec(3, [4, 4, 2], pseudo(3 * 32, 5));
            let cout = if spec.depthwise { 3 } else { 2 };
            let w = pseudo(spec.weight_len(3, cout), 6);
            let zero_b = vec![0.0; cout];
            let y = conv_forward(&x, &w, &zero_b, cout, &spec);
            let g = Tensor::from_vec(y.channels, y.spatial, pseudo(y.data.len(), 7));
            let mut gx = vec![0.0; x.data.len()];
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; cout];
            conv_backward(&x, &w, &g, &spec, &mut gx, &mut gw, &mut gb);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data.iter().zip(&gx).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
            let gsum: Vec<f64> = (0..cout).map(|c| g.channel(c).iter().sum()).collect();
            assert_eq!(gb, gsum);
        }
    }

    #[test]
    fn stride_two_halves_even_dims() {
        let spec = ConvSpec::depthwise(1).with_stride(2);
        assert_eq!(spec.out_spatial([8, 16, 16]), [4, 8, 8]);
        assert_eq!(spec.out_spatial([2, 2, 2]), [1, 1, 1]);
        assert_eq!(ConvSpec::depthwise(4).out_spatial([1, 2, 2]), [1, 2, 2]);
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint() {
        let x = Tensor::from_vec(1, [1, 2, 3], vec![2.5; 6]);
        let y = upsample_forward(&x);
        assert_eq!(y.spatial, [2, 4, 6]);
        assert!(y.data.iter().all(|v| (v - 2.5).abs() < 1e-15));

        let x = Tensor::from_vec(2, [2, 3, 2], pseudo(24, 9));
        let y = upsample_forward(&x);
        let g = Tensor::from_vec(2, y.spatial, pseudo(y.data.len(), 10));
        let mut gx = vec![0.0; 24];
        upsample_backward(x.spatial, &g, &mut gx);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_interpolates_linearly() {
        let x = Tensor::from_vec(1, [1, 1, 2], vec![0.0, 1.0]);
        let y = upsample_forward(&x);
        assert_eq!(y.data[..4], [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn layer_norm_normalizes_channels() {
        let x = Tensor::from_vec(4, [1, 1, 3], pseudo(12, 11));
        let (y, _, _) = layer_norm_forward(&x, &[1.0; 4], &[0.0; 4]);
        for k in 0..3 {
            let vals: Vec<f64> = (0..4).map(|c| y.data[c * 3 + k]).collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
