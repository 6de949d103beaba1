//! Image-quality metrics for reconstructed sequences: correlation, peak
//! signal-to-noise ratio, mean structural similarity and relative error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::phantom::ConductivitySequence;
use crate::volume::Volume;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::invalid(format!(
            "metric inputs must be nonempty and equal length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation.
pub fn cc(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant volume".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`] when the error is
/// negligible relative to the peak.
pub fn psnr(x: &[f64], reference: &[f64], peak: f64) -> Result<f64> {
    same_len(x, reference)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse < peak * peak * 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `||x - ref|| / ||ref||`.
pub fn err(x: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(x, reference)?;
    let den = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("relative error against a zero reference".into()));
    }
    let num = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|k| (-((k as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn ssim_plane(x: &[f64], y: &[f64], rows: usize, cols: usize, w: &[f64], c1: f64, c2: f64) -> f64 {
    let n = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - n {
        for c0 in 0..=cols - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in 0..n {
                for dc in 0..n {
                    let k = (r0 + dr) * cols + c0 + dc;
                    let g = w[dr * n + dc];
                    mx += g * x[k];
                    my += g * y[k];
                    sxx += g * x[k] * x[k];
                    syy += g * y[k] * y[k];
                    sxy += g * x[k] * y[k];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean over axial planes of single-scale SSIM with an 11x11 Gaussian
/// window. The dynamic range is taken from the joint min/max of both
/// volumes.
pub fn mssim(x: &Volume, reference: &Volume) -> Result<f64> {
    let dims = x.dims();
    if dims != reference.dims() {
        return Err(Error::invalid(format!(
            "mssim shape mismatch: {:?} vs {:?}",
            dims,
            reference.dims()
        )));
    }
    if dims.rows < SSIM_WINDOW || dims.cols < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "mssim needs in-plane size >= {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            dims.rows, dims.cols
        )));
    }
    let (lo, hi) = x
        .as_slice()
        .iter()
        .chain(reference.as_slice())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let w = gaussian_window();
    let total: f64 = (0..dims.planes)
        .map(|p| ssim_plane(x.plane(p), reference.plane(p), dims.rows, dims.cols, &w, c1, c2))
        .sum();
    Ok(total / dims.planes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub cc: f64,
    pub psnr: f64,
    pub mssim: f64,
    pub err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_frame: Vec<FrameMetrics>,
    pub means: FrameMetrics,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    frame: String,
    cc: f64,
    psnr: f64,
    mssim: f64,
    err: f64,
}

impl MetricsReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::invalid("metrics report needs at least one frame"));
        }
        let n = per_frame.len() as f64;
        let avg = |f: fn(&FrameMetrics) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
        let means = FrameMetrics {
            cc: avg(|m| m.cc),
            psnr: avg(|m| m.psnr),
            mssim: avg(|m| m.mssim),
            err: avg(|m| m.err),
        };
        Ok(Self { per_frame, means })
    }

    /// Header `frame,cc,psnr,mssim,err`, one row per frame, then a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let rows = self
            .per_frame
            .iter()
            .enumerate()
            .map(|(k, m)| ((k + 1).to_string(), m))
            .chain(std::iter::once(("mean".to_string(), &self.means)));
        for (frame, m) in rows {
            w.serialize(CsvRow {
                frame,
                cc: m.cc,
                psnr: m.psnr,
                mssim: m.mssim,
                err: m.err,
            })
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut per_frame = Vec::new();
        let mut means = None;
        for row in r.deserialize::<CsvRow>() {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            let m = FrameMetrics {
                cc: row.cc,
                psnr: row.psnr,
                mssim: row.mssim,
                err: row.err,
            };
            if row.frame == "mean" {
                means = Some(m);
            } else {
                per_frame.push(m);
            }
        }
        let means = means.ok_or_else(|| Error::format(path, "missing mean row"))?;
        Ok(Self { per_frame, means })
    }
}

/// Per-frame metrics against ground truth. `peak` defaults to each truth
/// frame's dynamic range.
pub fn evaluate_sequence(
    recon: &ConductivitySequence,
    truth: &ConductivitySequence,
    peak: Option<f64>,
) -> Result<MetricsReport> {
    if recon.len() != truth.len() {
        return Err(Error::invalid(format!(
            "reconstruction has {} frames, ground truth has {}",
            recon.len(),
            truth.len()
        )));
    }
    if recon.dims != truth.dims {
        return Err(Error::invalid(format!(
            "reconstruction grid {:?} differs from ground truth {:?}",
            recon.dims, truth.dims
        )));
    }
    let frames = (0..recon.len())
        .map(|k| {
            let (x, t) = (&recon.frames[k], &truth.frames[k]);
            let range = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - t.iter().cloned().fold(f64::INFINITY, f64::min);
            let peak = peak.unwrap_or(if range > 0.0 { range } else { 1.0 });
            Ok(FrameMetrics {
                cc: cc(x, t)?,
                psnr: psnr(x, t, peak)?,
                mssim: mssim(&recon.volume(k), &truth.volume(k))?,
                err: err(x, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_frames(frames)
}
