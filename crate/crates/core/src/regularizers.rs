//! Spatio-temporal total variation.
//!
//! The spatial term is the isotropic, epsilon-smoothed TV of one volume,
//! averaged over voxels, with forward differences that vanish at the last
//! index of every axis. The temporal term compares the current volume with
//! every earlier reconstruction, weighting frame `j` of `i` by
//! `exp(-(i - j))` and normalizing by the weight sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TVWeights {
    pub lambda_tv: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub epsilon: f64,
}

impl Default for TVWeights {
    fn default() -> Self {
        Self {
            lambda_tv: 0.002,
            lambda_s: 1.0,
            lambda_t: 0.1,
            epsilon: 1e-8,
        }
    }
}

impl TVWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_tv, self.lambda_s, self.lambda_t]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
            && self.epsilon.is_finite()
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid TV weights {self:?}")))
        }
    }
}

/// Previously reconstructed volumes, oldest first. Append-only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameHistory {
    frames: Vec<Volume>,
}

impl FrameHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: Volume) -> Result<()> {
        if let Some(first) = self.frames.first() {
            if first.dims() != frame.dims() {
                return Err(Error::invalid("history frames must share one grid shape"));
            }
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn frames(&self) -> &[Volume] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `alpha_{j,i} = exp(-(i - j))` for `1 <= j < i`.
pub fn decay_weight(j: usize, i: usize) -> Result<f64> {
    if j == 0 || j >= i {
        return Err(Error::invalid(format!("decay weight needs 1 <= j < i, got j={j}, i={i}")));
    }
    Ok((-((i - j) as f64)).exp())
}

/// Value and gradient of a regularizer with respect to the current volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn spatial_tv(vol: &Volume, epsilon: f64) -> f64 {
    spatial_tv_impl(vol, epsilon, false).value
}

pub fn spatial_tv_grad(vol: &Volume, epsilon: f64) -> ValueGrad {
    spatial_tv_impl(vol, epsilon, true)
}

fn spatial_tv_impl(vol: &Volume, epsilon: f64, want_grad: bool) -> ValueGrad {
    let d = vol.dims();
    let x = vol.as_slice();
    let n = d.len();
    let plane = d.rows * d.cols;
    let mut value = 0.0;
    let mut grad = if want_grad { vec![0.0; n] } else { Vec::new() };
    for p in 0..d.planes {
        for r in 0..d.rows {
            for c in 0..d.cols {
                let q = d.index(r, c, p);
                let dp = if p + 1 < d.planes { x[q + plane] - x[q] } else { 0.0 };
                let dr = if r + 1 < d.rows { x[q + d.cols] - x[q] } else { 0.0 };
                let dc = if c + 1 < d.cols { x[q + 1] - x[q] } else { 0.0 };
                let s = (dp * dp + dr * dr + dc * dc + epsilon).sqrt();
                value += s;
                if want_grad {
                    let inv = 1.0 / s;
                    if p + 1 < d.planes {
                        grad[q + plane] += dp * inv;
                    }
                    if r + 1 < d.rows {
                        grad[q + d.cols] += dr * inv;
                    }
                    if c + 1 < d.cols {
                        grad[q + 1] += dc * inv;
                    }
                    grad[q] -= (dp + dr + dc) * inv;
                }
            }
        }
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    ValueGrad {
        value: value * scale,
        grad,
    }
}

pub fn temporal_tv(history: &FrameHistory, current: &Volume, epsilon: f64) -> Result<f64> {
    temporal_tv_impl(history, current, epsilon, false).map(|vg| vg.value)
}

pub fn temporal_tv_grad(history: &FrameHistory, current: &Volume, epsilon: f64) -> Result<ValueGrad> {
    temporal_tv_impl(history, current, epsilon, true)
}

fn temporal_tv_impl(
    history: &FrameHistory,
    current: &Volume,
    epsilon: f64,
    want_grad: bool,
) -> Result<ValueGrad> {
    let n = current.dims().len();
    let mut grad = if want_grad { vec![0.0; n] } else { Vec::new() };
    if history.is_empty() {
        return Ok(ValueGrad { value: 0.0, grad });
    }
    if history.frames()[0].dims() != current.dims() {
        return Err(Error::invalid("history and current volume differ in shape"));
    }
    let i = history.len() + 1;
    let weights: Vec<f64> = (1..i).map(|j| decay_weight(j, i)).collect::<Result<_>>()?;
    let total: f64 = weights.iter().sum();
    let x = current.as_slice();
    let mut value = 0.0;
    for (frame, w) in history.frames().iter().zip(&weights) {
        let a = w / total;
        let mut inner = 0.0;
        for (q, (&cur, &prev)) in x.iter().zip(frame.as_slice()).enumerate() {
            let diff = cur - prev;
            let s = (diff * diff + epsilon).sqrt();
            inner += s;
            if want_grad {
                grad[q] += a * diff / s;
            }
        }
        value += a * inner;
    }
    Ok(ValueGrad { value, grad })
}

/// `lambda_s * spatial + lambda_t * temporal`. The overall `lambda_tv` factor
/// is applied by the caller's loss.
pub fn tv4d(history: &FrameHistory, current: &Volume, weights: &TVWeights) -> Result<f64> {
    tv4d_grad(history, current, weights).map(|vg| vg.value)
}

pub fn tv4d_grad(history: &FrameHistory, current: &Volume, weights: &TVWeights) -> Result<ValueGrad> {
    let s = spatial_tv_grad(current, weights.epsilon);
    let t = temporal_tv_grad(history, current, weights.epsilon)?;
    let grad = if t.grad.is_empty() {
        s.grad.iter().map(|g| weights.lambda_s * g).collect()
    } else {
        s.grad
            .iter()
            .zip(&t.grad)
            .map(|(a, b)| weights.lambda_s * a + weights.lambda_t * b)
            .collect()
    };
    Ok(ValueGrad {
        value: weights.lambda_s * s.value + weights.lambda_t * t.value,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims3;
    use proptest::prelude::*;

    const E1: f64 = 0.36787944117144233;
    const E2: f64 = 0.1353352832366127;

    fn vol(dims: Dims3, values: &[f64]) -> Volume {
        crate::volume::devectorize(values, dims).unwrap()
    }

    #[test]
    fn constant_volume_is_sqrt_eps() {
        let v = Volume::filled(Dims3::new(3, 4, 5), 0.7);
        assert!((spatial_tv(&v, 1e-8) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn two_voxel_hand_value() {
        let v = vol(Dims3::new(2, 1, 1), &[0.0, 1.0]);
        let eps: f64 = 1e-8;
        let want = 0.5 * ((1.0 + eps).sqrt() + eps.sqrt());
        assert!((spatial_tv(&v, eps) - want).abs() < 1e-15);
        assert!((spatial_tv(&v, eps) - 0.50005).abs() < 1e-8);
    }

    #[test]
    fn spatial_tv_scales_with_amplitude() {
        let d = Dims3::new(4, 5, 3);
        let v = Volume::from_fn(d, |r, c, p| ((r * 7 + c * 3 + p * 11) % 5) as f64 * 0.3);
        let a = spatial_tv(&v, 1e-12);
        let b = spatial_tv(&v.map(|x| 3.0 * x), 1e-12);
        assert!((b / a - 3.0).abs() < 1e-4 * 3.0);
    }

    #[test]
    fn temporal_examples() {
        let d = Dims3::new(2, 2, 2);
        let cur = Volume::filled(d, 0.3);
        assert_eq!(temporal_tv(&FrameHistory::new(), &cur, 1e-8).unwrap(), 0.0);

        let mut h = FrameHistory::new();
        h.push(cur.clone()).unwrap();
        let got = temporal_tv(&h, &cur, 1e-8).unwrap();
        assert!((got - 8.0 * 1e-4).abs() < 1e-16);

        // i = 3: frame 1 weight e^-2, frame 2 weight e^-1.
        let mut h2 = FrameHistory::new();
        h2.push(Volume::filled(d, 0.0)).unwrap();
        h2.push(Volume::filled(d, 0.2)).unwrap();
        let eps: f64 = 1e-8;
        let per1 = 8.0 * ((0.3f64).powi(2) + eps).sqrt();
        let per2 = 8.0 * ((0.1f64).powi(2) + eps).sqrt();
        let want = (E2 * per1 + E1 * per2) / (E2 + E1);
        assert!((temporal_tv(&h2, &cur, eps).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn tv4d_examples() {
        let d = Dims3::new(2, 1, 1);
        let cur = vol(d, &[0.0, 1.0]);
        let zero = TVWeights { lambda_s: 0.0, lambda_t: 0.0, ..TVWeights::default() };
        let mut h = FrameHistory::new();
        h.push(vol(d, &[0.5, 0.5])).unwrap();
        assert_eq!(tv4d(&h, &cur, &zero).unwrap(), 0.0);

        let w = TVWeights::default();
        let spatial = 0.5 * ((1.0 + 1e-8f64).sqrt() + 1e-8f64.sqrt());
        assert!((tv4d(&FrameHistory::new(), &cur, &w).unwrap() - spatial).abs() < 1e-15);

        let temporal = 2.0 * (0.25 + 1e-8f64).sqrt();
        let want = 1.0 * spatial + 0.1 * temporal;
        assert!((tv4d(&h, &cur, &w).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn decay_weight_examples() {
        assert!((decay_weight(1, 2).unwrap() - 0.367879).abs() < 1e-6);
        assert!((decay_weight(1, 4).unwrap() - 0.049787).abs() < 1e-6);
        for j in 1..9 {
            let ratio = decay_weight(j, 10).unwrap() / decay_weight(j + 1, 10).unwrap();
            assert!((ratio - E1).abs() < 1e-12);
        }
        assert!(decay_weight(3, 3).is_err());
        assert!(decay_weight(4, 3).is_err());
        assert!(decay_weight(0, 3).is_err());
    }

    #[test]
    fn weights_decay_monotonically() {
        let ws: Vec<f64> = (1..20).rev().map(|j| decay_weight(j, 20).unwrap()).collect();
        assert!(ws.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn default_weights() {
        let w = TVWeights::default();
        assert_eq!((w.lambda_tv, w.lambda_s, w.lambda_t, w.epsilon), (0.002, 1.0, 0.1, 1e-8));
    }

    #[test]
    fn mismatched_history_is_rejected() {
        let mut h = FrameHistory::new();
        h.push(Volume::zeros(Dims3::new(2, 2, 2))).unwrap();
        assert!(h.push(Volume::zeros(Dims3::new(2, 2, 3))).is_err());
    }

    fn random_volume(d: Dims3, seed: u64) -> Volume {
        let mut state = seed | 1;
        Volume::from_fn(d, |_, _, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 10_000) as f64 / 10_000.0 - 0.5
        })
    }

    proptest! {
        #[test]
        fn regularizers_are_nonnegative(seed in any::<u64>()) {
            let d = Dims3::new(3, 4, 2);
            let cur = random_volume(d, seed);
            let mut h = FrameHistory::new();
            h.push(random_volume(d, seed.wrapping_add(1))).unwrap();
            h.push(random_volume(d, seed.wrapping_add(2))).unwrap();
            prop_assert!(spatial_tv(&cur, 1e-8) >= 0.0);
            prop_assert!(temporal_tv(&h, &cur, 1e-8).unwrap() >= 0.0);
            prop_assert!(tv4d(&h, &cur, &TVWeights::default()).unwrap() >= 0.0);
        }

        #[test]
        fn spatial_tv_respects_axis_permutation(seed in any::<u64>()) {
            // Swap rows and cols together with the volume axes.
            let d = Dims3::new(3, 5, 4);
            let v = random_volume(d, seed);
            let t = Volume::from_fn(Dims3::new(5, 3, 4), |r, c, p| v.get(c, r, p));
            prop_assert!((spatial_tv(&v, 1e-8) - spatial_tv(&t, 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_gradient_matches_differences() {
        let d = Dims3::new(4, 4, 4);
        let v = random_volume(d, 99);
        let g = spatial_tv_grad(&v, 1e-8);
        let h = 1e-6;
        for q in (0..64).step_by(5) {
            let mut plus = v.clone();
            plus.as_mut_slice()[q] += h;
            let mut minus = v.clone();
            minus.as_mut_slice()[q] -= h;
            let fd = (spatial_tv(&plus, 1e-8) - spatial_tv(&minus, 1e-8)) / (2.0 * h);
            assert!((fd - g.grad[q]).abs() <= 1e-4 * fd.abs().max(1e-3), "q={q} fd={fd} g={}", g.grad[q]);
        }
    }
}
