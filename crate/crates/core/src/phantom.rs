//! Dynamic thoracic phantoms: a healthy inhalation and a unilateral edema
//! case, each over a single inhalation phase.
//!
//! The lungs are ellipsoids that scale isotropically about their centers.
//! The left lung sits on the `+x` side of the grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{add_noise, forward_project, ReferenceMode, SensitivityMatrix, VoltageFrame, VoltageSequence};
use crate::geometry::GridGeometry;
use crate::io;
use crate::volume::{Dims3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomCase {
    HealthyCycle,
    EdemaCycle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, x: [f64; 3]) -> bool {
        let mut s = 0.0;
        for k in 0..3 {
            let d = (x[k] - self.center[k]) / self.semi_axes[k];
            s += d * d;
        }
        s <= 1.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            center: self.center,
            semi_axes: self.semi_axes.map(|a| a * factor),
        }
    }
}

/// Lung outline at end-exhale and end-inhale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LungShape {
    pub exhale: Ellipsoid,
    pub inhale: Ellipsoid,
}

impl LungShape {
    /// Shape at breathing phase `s` in `[0, 1]`.
    pub fn at_phase(&self, s: f64) -> Ellipsoid {
        let mut semi_axes = [0.0; 3];
        for (k, a) in semi_axes.iter_mut().enumerate() {
            *a = self.exhale.semi_axes[k] + s * (self.inhale.semi_axes[k] - self.exhale.semi_axes[k]);
        }
        Ellipsoid {
            center: self.exhale.center,
            semi_axes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LungPhantomSpec {
    pub case: PhantomCase,
    pub frames: usize,
    pub background_s: f64,
    pub lung_start_s: f64,
    pub lung_end_s: f64,
    pub edema_s: Option<f64>,
    pub left: LungShape,
    pub right: LungShape,
    /// Edema occupies the part of the left lung with
    /// `(y - center_y) / semi_axis_y < edema_cut` (posterior side).
    pub edema_cut: f64,
}

/// End-exhale size relative to end-inhale.
pub const EXHALE_SCALE: f64 = 0.75;

fn default_lungs(grid: &GridGeometry) -> (LungShape, LungShape) {
    let e = grid.extent();
    let [cx, cy, cz] = e.center();
    let span = e.span();
    let half = [0.5 * span[0], 0.5 * span[1], 0.5 * span[2]];
    let inhale_axes = [0.30 * half[0], 0.65 * half[1], 0.75 * half[2]];
    let lung = |sign: f64| {
        let inhale = Ellipsoid {
            center: [cx + sign * 0.43 * half[0], cy, cz],
            semi_axes: inhale_axes,
        };
        LungShape {
            exhale: inhale.scaled(EXHALE_SCALE),
            inhale,
        }
    };
    (lung(1.0), lung(-1.0))
}

impl LungPhantomSpec {
    /// Healthy inhalation: background 0.24 S/m, lungs 0.20 -> 0.105 S/m.
    pub fn healthy(grid: &GridGeometry, frames: usize) -> Self {
        let (left, right) = default_lungs(grid);
        Self {
            case: PhantomCase::HealthyCycle,
            frames,
            background_s: 0.24,
            lung_start_s: 0.20,
            lung_end_s: 0.105,
            edema_s: None,
            left,
            right,
            edema_cut: 0.0,
        }
    }

    /// Left-lung edema: healthy tissue 0.14 -> 0.0835 S/m, edema fixed at 0.24 S/m.
    pub fn edema(grid: &GridGeometry, frames: usize) -> Self {
        Self {
            case: PhantomCase::EdemaCycle,
            lung_start_s: 0.14,
            lung_end_s: 0.0835,
            edema_s: Some(0.24),
            ..Self::healthy(grid, frames)
        }
    }

    pub fn validate(&self, grid: &GridGeometry) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid(format!("phantom needs T >= 2 frames, got {}", self.frames)));
        }
        let mut conds = vec![self.background_s, self.lung_start_s, self.lung_end_s];
        conds.extend(self.edema_s);
        if conds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("conductivities must be strictly positive"));
        }
        let e = grid.extent();
        for (name, lung) in [("left", &self.left), ("right", &self.right)] {
            let full = lung.inhale;
            for k in 0..3 {
                if full.semi_axes[k] <= 0.0
                    || full.center[k] - full.semi_axes[k] < e.min[k]
                    || full.center[k] + full.semi_axes[k] > e.max[k]
                {
                    return Err(Error::invalid(format!(
                        "{name} lung exceeds the grid at full inhalation along axis {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Interval that contains every conductivity change the phantom can
    /// produce. When the lungs only lose conductivity relative to everything
    /// around them, the interval is one-sided.
    pub fn change_bounds(&self) -> (f64, f64) {
        let mut conds = vec![self.background_s, self.lung_start_s, self.lung_end_s];
        conds.extend(self.edema_s);
        let lo = conds.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = conds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lungs_max = self.lung_start_s.max(self.lung_end_s);
        let decreasing = self.lung_end_s <= self.lung_start_s
            && lungs_max <= self.background_s
            && self.edema_s.is_none_or(|e| e >= lungs_max);
        (lo - hi, if decreasing { 0.0 } else { hi - lo })
    }

    /// Lung conductivity at phase `s`.
    pub fn lung_conductivity(&self, s: f64) -> f64 {
        self.lung_start_s + s * (self.lung_end_s - self.lung_start_s)
    }
}

/// Half-cosine breathing phase for 1-based frame `i` of `t`: 0 at the first
/// frame, 1 at the last, monotone in between.
pub fn breathing_phase(i: f64, t: usize) -> f64 {
    let x = (i - 1.0) / (t as f64 - 1.0);
    0.5 * (1.0 - (std::f64::consts::PI * x).cos())
}

/// Boolean voxel masks for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomMasks {
    pub left: Vec<bool>,
    pub right: Vec<bool>,
    pub edema: Vec<bool>,
}

impl PhantomMasks {
    /// Lung voxels outside the edema region.
    pub fn healthy(&self) -> Vec<bool> {
        self.left
            .iter()
            .zip(&self.right)
            .zip(&self.edema)
            .map(|((l, r), e)| (*l || *r) && !*e)
            .collect()
    }
}

/// Masks at 1-based frame `i`.
pub fn masks(grid: &GridGeometry, spec: &LungPhantomSpec, i: usize) -> PhantomMasks {
    let s = breathing_phase(i as f64, spec.frames);
    let left = spec.left.at_phase(s);
    let right = spec.right.at_phase(s);
    let centers = grid.voxel_centers();
    let left_mask: Vec<bool> = centers.iter().map(|&x| left.contains(x)).collect();
    let right_mask: Vec<bool> = centers.iter().map(|&x| right.contains(x)).collect();
    let edema = centers
        .iter()
        .zip(&left_mask)
        .map(|(x, &in_left)| {
            spec.edema_s.is_some()
                && in_left
                && (x[1] - left.center[1]) / left.semi_axes[1] < spec.edema_cut
        })
        .collect();
    PhantomMasks {
        left: left_mask,
        right: right_mask,
        edema,
    }
}

/// Absolute conductivity volumes for frames `1..=T`.
pub fn absolute_frames(grid: &GridGeometry, spec: &LungPhantomSpec) -> Result<Vec<Volume>> {
    spec.validate(grid)?;
    Ok((1..=spec.frames)
        .map(|i| {
            let s = breathing_phase(i as f64, spec.frames);
            let lung = spec.lung_conductivity(s);
            let m = masks(grid, spec, i);
            let mut values = vec![spec.background_s; grid.voxel_count()];
            for (q, v) in values.iter_mut().enumerate() {
                if m.edema[q] {
                    *v = spec.edema_s.unwrap_or(spec.background_s);
                } else if m.left[q] || m.right[q] {
                    *v = lung;
                }
            }
            crate::volume::devectorize(&values, grid.dims()).expect("grid-sized")
        })
        .collect())
}

/// `Q x T` conductivity changes stored as `T` frames of `Q` voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConductivitySequence {
    pub dims: Dims3,
    pub frames: Vec<Vec<f64>>,
    pub grid_ref: String,
    pub is_ground_truth: bool,
    pub reference_mode: ReferenceMode,
    pub case: Option<PhantomCase>,
    pub method: Option<String>,
    pub conductivities: Option<serde_json::Value>,
}

impl ConductivitySequence {
    pub fn new(dims: Dims3, frames: Vec<Vec<f64>>, reference_mode: ReferenceMode) -> Result<Self> {
        let seq = Self {
            dims,
            frames,
            grid_ref: String::new(),
            is_ground_truth: false,
            reference_mode,
            case: None,
            method: None,
            conductivities: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, f) in self.frames.iter().enumerate() {
            if f.len() != self.dims.len() {
                return Err(Error::invalid(format!(
                    "frame {} has {} voxels, expected {}",
                    k + 1,
                    f.len(),
                    self.dims.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("frame {} has non-finite values", k + 1)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.len()
    }

    pub fn volume(&self, k: usize) -> Volume {
        crate::volume::devectorize(&self.frames[k], self.dims).expect("validated frame")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let flat: Vec<f64> = self.frames.iter().flatten().copied().collect();
        io::write_f64_le(path, &flat)?;
        io::write_json(
            &io::sidecar_path(path),
            &SequenceSidecar {
                q: self.dims.len(),
                t: self.len(),
                dims: self.dims,
                ordering: crate::volume::VOXEL_ORDERING.to_string(),
                grid_ref: self.grid_ref.clone(),
                is_ground_truth: self.is_ground_truth,
                reference_mode: self.reference_mode,
                case: self.case,
                method: self.method.clone(),
                conductivities: self.conductivities.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: SequenceSidecar = io::read_json(&io::sidecar_path(path))?;
        let flat = io::read_f64_le(path)?;
        if side.q != side.dims.len() || side.q == 0 || flat.len() != side.q * side.t {
            return Err(Error::format(
                path,
                format!("payload holds {} values, sidecar says Q={} T={}", flat.len(), side.q, side.t),
            ));
        }
        if side.ordering != crate::volume::VOXEL_ORDERING {
            return Err(Error::format(path, format!("unsupported ordering {:?}", side.ordering)));
        }
        let seq = Self {
            dims: side.dims,
            frames: flat.chunks_exact(side.q).map(<[f64]>::to_vec).collect(),
            grid_ref: side.grid_ref,
            is_ground_truth: side.is_ground_truth,
            reference_mode: side.reference_mode,
            case: side.case,
            method: side.method,
            conductivities: side.conductivities,
        };
        seq.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(seq)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceSidecar {
    #[serde(rename = "Q")]
    q: usize,
    #[serde(rename = "T")]
    t: usize,
    dims: Dims3,
    ordering: String,
    grid_ref: String,
    is_ground_truth: bool,
    reference_mode: ReferenceMode,
    case: Option<PhantomCase>,
    method: Option<String>,
    conductivities: Option<serde_json::Value>,
}

/// Builds the ground-truth change sequence for a phantom spec. The healthy
/// case is referenced to the empty background; the edema case to its first
/// frame, giving `T - 1` differential frames.
pub fn make_phantom(grid: &GridGeometry, spec: &LungPhantomSpec) -> Result<ConductivitySequence> {
    let absolute = absolute_frames(grid, spec)?;
    let (frames, reference_mode): (Vec<Vec<f64>>, _) = match spec.case {
        PhantomCase::HealthyCycle => (
            absolute
                .iter()
                .map(|v| v.as_slice().iter().map(|s| s - spec.background_s).collect())
                .collect(),
            ReferenceMode::EmptyBackground,
        ),
        PhantomCase::EdemaCycle => {
            let first = absolute[0].as_slice();
            (
                absolute[1..]
                    .iter()
                    .map(|v| v.as_slice().iter().zip(first).map(|(a, b)| a - b).collect())
                    .collect(),
                ReferenceMode::FirstFrame,
            )
        }
    };
    let mut seq = ConductivitySequence::new(grid.dims(), frames, reference_mode)?;
    seq.grid_ref = grid.id();
    seq.is_ground_truth = true;
    seq.case = Some(spec.case);
    seq.method = Some("ground_truth".into());
    seq.conductivities = Some(serde_json::json!({
        "background": spec.background_s,
        "lung_start": spec.lung_start_s,
        "lung_end": spec.lung_end_s,
        "edema": spec.edema_s,
    }));
    Ok(seq)
}

pub fn make_case1(grid: &GridGeometry, frames: usize) -> Result<ConductivitySequence> {
    make_phantom(grid, &LungPhantomSpec::healthy(grid, frames))
}

pub fn make_case2(grid: &GridGeometry, frames: usize) -> Result<ConductivitySequence> {
    make_phantom(grid, &LungPhantomSpec::edema(grid, frames))
}

/// `dv_i = J * dsigma_i` per frame, then noise at `snr_db` with seed `seed + i`.
/// Pass `f64::INFINITY` for noise-free data.
pub fn synthesize_measurements(
    seq: &ConductivitySequence,
    j: &SensitivityMatrix,
    snr_db: f64,
    seed: u64,
) -> Result<VoltageSequence> {
    if seq.voxel_count() != j.cols() {
        return Err(Error::invalid(format!(
            "sequence has {} voxels but the sensitivity has {} columns",
            seq.voxel_count(),
            j.cols()
        )));
    }
    if !seq.grid_ref.is_empty() && !j.grid_ref.is_empty() && seq.grid_ref != j.grid_ref {
        return Err(Error::invalid("sequence and sensitivity were built on different grids"));
    }
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(k, dsigma)| {
            let clean = VoltageFrame::new(forward_project(j, dsigma)?, k + 1);
            add_noise(&clean, snr_db, seed.wrapping_add(k as u64 + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = VoltageSequence::new(frames, seq.reference_mode)?;
    out.snr_db = snr_db.is_finite().then_some(snr_db);
    out.seed = seed;
    Ok(out)
}
