//! Linearized forward model `dv = J * dsigma` with an analytic lead-field
//! sensitivity, plus measurement noise and file persistence.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ElectrodeArray, GridGeometry, MeasurementProtocol, Quad};
use crate::io;

/// Dense `M x Q` sensitivity operator, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub normalized: bool,
    pub projected: bool,
    pub grid_ref: String,
    pub protocol_ref: String,
}

impl SensitivityMatrix {
    pub fn from_rows(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sensitivity entry at {i}")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            normalized: false,
            projected: false,
            grid_ref: String::new(),
            protocol_ref: String::new(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self::from_rows(n, n, values).expect("identity is well formed")
    }

    /// Number of measurements `M`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of voxels `Q`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, q: usize) -> f64 {
        self.values[i * self.cols + q]
    }

    /// `J^T y`.
    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::invalid(format!(
                "adjoint expects length {}, got {}",
                self.rows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.values.chunks_exact(self.cols).zip(y) {
            if yi == 0.0 {
                continue;
            }
            for (o, &j) in out.iter_mut().zip(row) {
                *o += j * yi;
            }
        }
        Ok(out)
    }

    /// Checks that this operator was built for the given grid and protocol.
    pub fn check_against(&self, grid: &GridGeometry, protocol: &MeasurementProtocol) -> Result<()> {
        if self.cols != grid.voxel_count() || self.rows != protocol.count() {
            return Err(Error::invalid(format!(
                "sensitivity is {}x{}, setup needs {}x{}",
                self.rows,
                self.cols,
                protocol.count(),
                grid.voxel_count()
            )));
        }
        if !self.grid_ref.is_empty() && self.grid_ref != grid.id() {
            return Err(Error::invalid("sensitivity grid_ref does not match grid"));
        }
        if !self.protocol_ref.is_empty() && self.protocol_ref != protocol.id() {
            return Err(Error::invalid("sensitivity protocol_ref does not match protocol"));
        }
        Ok(())
    }
}

/// Gradient of the free-space unit point-source potential
/// `1 / (4 pi |r - e|)` at `r`, with the distance clamped below at `floor`.
fn point_source_gradient(r: [f64; 3], e: [f64; 3], floor: f64) -> [f64; 3] {
    let d = [r[0] - e[0], r[1] - e[1], r[2] - e[2]];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if dist == 0.0 {
        return [0.0; 3];
    }
    let clamped = dist.max(floor);
    // -(r - e) / (4 pi |r - e|^3), direction kept, magnitude from the clamped distance
    let scale = -1.0 / (4.0 * PI * clamped * clamped * dist);
    [d[0] * scale, d[1] * scale, d[2] * scale]
}

/// One sensitivity row: `S(r) = -grad u_drive(r) . grad u_meas(r) * voxel_volume`.
pub fn sensitivity_row(grid: &GridGeometry, array: &ElectrodeArray, quad: Quad) -> Vec<f64> {
    let floor = 0.5 * grid.pitch().iter().cloned().fold(f64::INFINITY, f64::min);
    let vol = grid.voxel_volume();
    grid.voxel_centers()
        .into_iter()
        .map(|r| {
            let gd = pair_gradient(r, array.positions[quad[0]], array.positions[quad[1]], floor);
            let gm = pair_gradient(r, array.positions[quad[2]], array.positions[quad[3]], floor);
            -(gd[0] * gm[0] + gd[1] * gm[1] + gd[2] * gm[2]) * vol
        })
        .collect()
}

fn pair_gradient(r: [f64; 3], source: [f64; 3], sink: [f64; 3], floor: f64) -> [f64; 3] {
    let a = point_source_gradient(r, source, floor);
    let b = point_source_gradient(r, sink, floor);
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Assembles the unnormalized lead-field sensitivity for a protocol.
pub fn assemble_sensitivity(
    grid: &GridGeometry,
    array: &ElectrodeArray,
    protocol: &MeasurementProtocol,
) -> Result<SensitivityMatrix> {
    let n_el = array.len();
    if let Some(q) = protocol.pairs.iter().find(|q| q.iter().any(|&e| e >= n_el)) {
        return Err(Error::invalid(format!(
            "protocol entry {q:?} references a missing electrode (have {n_el})"
        )));
    }
    let floor = 0.5 * grid.pitch().iter().cloned().fold(f64::INFINITY, f64::min);
    let vol = grid.voxel_volume();
    let centers = grid.voxel_centers();
    let q_len = centers.len();

    // Per-electrode gradient fields; a pair field is source minus sink.
    let fields: Vec<Vec<[f64; 3]>> = array
        .positions
        .iter()
        .map(|&e| centers.iter().map(|&r| point_source_gradient(r, e, floor)).collect())
        .collect();

    let mut values = Vec::with_capacity(protocol.count() * q_len);
    for quad in &protocol.pairs {
        let (ds, dk, mp, mm) = (&fields[quad[0]], &fields[quad[1]], &fields[quad[2]], &fields[quad[3]]);
        for q in 0..q_len {
            let mut dot = 0.0;
            for k in 0..3 {
                dot += (ds[q][k] - dk[q][k]) * (mp[q][k] - mm[q][k]);
            }
            values.push(-dot * vol);
        }
    }
    let mut j = SensitivityMatrix::from_rows(protocol.count(), q_len, values)?;
    j.grid_ref = grid.id();
    j.protocol_ref = protocol.id();
    Ok(j)
}

/// Scales every row to unit Euclidean norm. The projection flag is set
/// alongside; no further projection is applied.
pub fn normalize_sensitivity(j: &SensitivityMatrix) -> Result<SensitivityMatrix> {
    let mut out = j.clone();
    for (i, row) in out.values.chunks_exact_mut(j.cols).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateOperator { row: i });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out.normalized = true;
    out.projected = true;
    Ok(out)
}

/// `J * dsigma`.
pub fn forward_project(j: &SensitivityMatrix, dsigma: &[f64]) -> Result<Vec<f64>> {
    if dsigma.len() != j.cols {
        return Err(Error::invalid(format!(
            "forward projection expects length {}, got {}",
            j.cols,
            dsigma.len()
        )));
    }
    Ok(j.values
        .chunks_exact(j.cols)
        .map(|row| row.iter().zip(dsigma).map(|(a, b)| a * b).sum())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    EmptyBackground,
    FirstFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoltageFrame {
    pub values: Vec<f64>,
    /// 1-based frame index.
    pub frame_index: usize,
    /// `None` for noise-free data.
    pub snr_db: Option<f64>,
}

impl VoltageFrame {
    pub fn new(values: Vec<f64>, frame_index: usize) -> Self {
        Self {
            values,
            frame_index,
            snr_db: None,
        }
    }
}

/// Adds zero-mean Gaussian noise at the requested per-frame SNR. The noise
/// variance is `mean(v^2) / 10^(snr_db / 10)`. `f64::INFINITY` is the
/// noise-free sentinel.
pub fn add_noise(v: &VoltageFrame, snr_db: f64, seed: u64) -> Result<VoltageFrame> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    if snr_db == f64::INFINITY {
        return Ok(v.clone());
    }
    let n = v.values.len();
    let power = v.values.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64;
    if power == 0.0 {
        return Err(Error::invalid("SNR is undefined for an all-zero signal"));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::numerical("add_noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = v.values.iter().map(|x| x + normal.sample(&mut rng)).collect();
    Ok(VoltageFrame {
        values,
        frame_index: v.frame_index,
        snr_db: Some(snr_db),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoltageSequence {
    pub frames: Vec<VoltageFrame>,
    pub reference_mode: ReferenceMode,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl VoltageSequence {
    pub fn new(frames: Vec<VoltageFrame>, reference_mode: ReferenceMode) -> Result<Self> {
        let seq = Self {
            frames,
            reference_mode,
            snr_db: None,
            seed: 0,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.measurements();
        for (k, f) in self.frames.iter().enumerate() {
            if f.values.len() != m {
                return Err(Error::invalid(format!(
                    "frame {} has {} measurements, expected {m}",
                    k + 1,
                    f.values.len()
                )));
            }
            if f.frame_index != k + 1 {
                return Err(Error::invalid(format!(
                    "frame indices must be contiguous from 1, found {} at position {}",
                    f.frame_index,
                    k + 1
                )));
            }
            if f.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("frame {} has non-finite values", k + 1)));
            }
        }
        Ok(())
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Measurements per frame `M`.
    pub fn measurements(&self) -> usize {
        self.frames.first().map_or(0, |f| f.values.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let flat: Vec<f64> = self.frames.iter().flat_map(|f| f.values.iter().copied()).collect();
        io::write_f64_le(path, &flat)?;
        io::write_json(
            &io::sidecar_path(path),
            &VoltageSidecar {
                m: self.measurements(),
                t: self.len(),
                reference_mode: self.reference_mode,
                snr_db: self.snr_db,
                seed: self.seed,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: VoltageSidecar = io::read_json(&io::sidecar_path(path))?;
        let flat = io::read_f64_le(path)?;
        if flat.len() != side.m * side.t || side.m == 0 {
            return Err(Error::format(
                path,
                format!("payload holds {} values, sidecar says {}x{}", flat.len(), side.t, side.m),
            ));
        }
        let frames = flat
            .chunks_exact(side.m)
            .enumerate()
            .map(|(k, chunk)| VoltageFrame {
                values: chunk.to_vec(),
                frame_index: k + 1,
                snr_db: side.snr_db,
            })
            .collect();
        let seq = Self {
            frames,
            reference_mode: side.reference_mode,
            snr_db: side.snr_db,
            seed: side.seed,
        };
        seq.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(seq)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VoltageSidecar {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    reference_mode: ReferenceMode,
    snr_db: Option<f64>,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixSidecar {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "Q")]
    q: usize,
    normalized: bool,
    projected: bool,
    grid_ref: String,
    protocol_ref: String,
}

pub fn save_matrix(j: &SensitivityMatrix, path: &Path) -> Result<()> {
    io::write_f64_le(path, &j.values)?;
    io::write_json(
        &io::sidecar_path(path),
        &MatrixSidecar {
            m: j.rows,
            q: j.cols,
            normalized: j.normalized,
            projected: j.projected,
            grid_ref: j.grid_ref.clone(),
            protocol_ref: j.protocol_ref.clone(),
        },
    )
}

pub fn load_matrix(path: &Path) -> Result<SensitivityMatrix> {
    let side: MatrixSidecar = io::read_json(&io::sidecar_path(path))?;
    let values = io::read_f64_le(path)?;
    if side.m == 0 || side.q == 0 || values.len() != side.m * side.q {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} values, sidecar says M={} Q={}",
                values.len(),
                side.m,
                side.q
            ),
        ));
    }
    let mut j = SensitivityMatrix::from_rows(side.m, side.q, values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    j.normalized = side.normalized;
    j.projected = side.projected;
    j.grid_ref = side.grid_ref;
    j.protocol_ref = side.protocol_ref;
    Ok(j)
}
