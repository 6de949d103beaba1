//! The sequence reconstruction pipeline: warm-start pretraining on one
//! frame, per-frame optimization of the network parameters against the
//! data term plus 4D total variation, and parameter hand-off between frames.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{forward_project, SensitivityMatrix, VoltageFrame, VoltageSequence};
use crate::io;
use crate::phantom::ConductivitySequence;
use crate::priornet::{sample_noise, Adam, FastResUNet, NetworkConfig, NoiseInput, ParameterState, Provenance};
use crate::regularizers::{tv4d_grad, FrameHistory, TVWeights};
use crate::volume::{Dims3, Volume};

pub const LR_SIMULATION: f64 = 5e-4;
pub const LR_MEASURED: f64 = 1e-4;
const NOISE_SEED_SALT: u64 = 0x5A5A_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// `||J x - dv||`
    L2,
    /// `||J x - dv||^2`
    Squared,
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l2" => Ok(DataMode::L2),
            "squared" => Ok(DataMode::Squared),
            other => Err(Error::invalid(format!("unknown data mode {other:?}; expected l2 or squared"))),
        }
    }
}

/// Affine map from the sigmoid output `o` to `lo + (hi - lo) * o`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputMap {
    pub lo: f64,
    pub hi: f64,
}

impl Default for OutputMap {
    fn default() -> Self {
        Self { lo: -0.135, hi: 0.0 }
    }
}

impl OutputMap {
    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn apply(&self, o: &Volume) -> Volume {
        o.map(|v| self.lo + self.span() * v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Upws,
    Tpp,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "upws" => Ok(Strategy::Upws),
            "tpp" => Ok(Strategy::Tpp),
            other => Err(Error::invalid(format!("unknown strategy {other:?}; expected upws or tpp"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Upws => "upws",
            Strategy::Tpp => "tpp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub iters_warm: usize,
    pub iters_first: usize,
    pub iters_next: usize,
    pub learning_rate: f64,
    pub optimizer_betas: (f64, f64),
    pub tv_weights: TVWeights,
    pub seed: u64,
    pub record_every: usize,
    pub network: NetworkConfig,
    pub output_map: OutputMap,
    pub data_mode: DataMode,
    /// 1-based frame whose measurement drives warm-start pretraining.
    pub warm_start_frame: usize,
    pub disabled: BTreeSet<Strategy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::simulation()
    }
}

impl RunConfig {
    pub fn simulation() -> Self {
        Self {
            iters_warm: 1800,
            iters_first: 450,
            iters_next: 250,
            learning_rate: LR_SIMULATION,
            optimizer_betas: (0.9, 0.999),
            tv_weights: TVWeights::default(),
            seed: 0,
            record_every: 1,
            network: NetworkConfig::default(),
            output_map: OutputMap::default(),
            data_mode: DataMode::L2,
            warm_start_frame: 1,
            disabled: BTreeSet::new(),
        }
    }

    pub fn measured() -> Self {
        Self {
            learning_rate: LR_MEASURED,
            ..Self::simulation()
        }
    }

    pub fn stage_ratio(&self) -> String {
        format!("{}:{}:{}", self.iters_warm, self.iters_first, self.iters_next)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.tv_weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        let (b1, b2) = self.optimizer_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid(format!("optimizer betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be >= 1"));
        }
        if self.output_map.hi <= self.output_map.lo || !self.output_map.span().is_finite() {
            return Err(Error::invalid("output map needs lo < hi"));
        }
        if self.warm_start_frame == 0 {
            return Err(Error::invalid("warm_start_frame is 1-based"));
        }
        Ok(())
    }

    /// Network config with the run seed applied.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.seed,
            ..self.network.clone()
        }
    }

    pub fn noise_seed(&self) -> u64 {
        self.seed ^ NOISE_SEED_SALT
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }
}

/// Applies an ablation: without warm-start, frame 1 starts from a fresh
/// init; without propagation, every frame restarts from frame 1's starting
/// point. Cold-started stages get the warm-start budget.
pub fn ablation_mode(cfg: &RunConfig, disable: &BTreeSet<Strategy>) -> RunConfig {
    let mut out = cfg.clone();
    out.disabled.extend(disable.iter().copied());
    if out.disabled.contains(&Strategy::Upws) {
        out.iters_first = cfg.iters_warm;
    }
    if out.disabled.contains(&Strategy::Tpp) {
        out.iters_next = cfg.iters_warm;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub reg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub data: f64,
    pub reg: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn is_finite(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.data.is_finite() && r.reg.is_finite() && r.total.is_finite())
    }

    /// First recorded iteration whose data term is at or below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.data <= threshold).map(|r| r.iteration)
    }
}

/// Data term, regularizer and gradient with respect to the mapped volume.
struct Objective<'a> {
    j: &'a SensitivityMatrix,
    dv: &'a [f64],
    history: &'a FrameHistory,
    weights: &'a TVWeights,
    mode: DataMode,
}

impl Objective<'_> {
    fn evaluate(&self, x: &Volume, with_grad: bool) -> Result<(LossTerms, Vec<f64>)> {
        let pred = forward_project(self.j, x.as_slice())?;
        let r: Vec<f64> = pred.iter().zip(self.dv).map(|(p, d)| p - d).collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (data, scale) = match self.mode {
            DataMode::L2 => (norm, if norm > 0.0 { 1.0 / norm } else { 0.0 }),
            DataMode::Squared => (norm * norm, 2.0),
        };
        let tv = tv4d_grad(self.history, x, self.weights)?;
        let reg = self.weights.lambda_tv * tv.value;
        let terms = LossTerms {
            total: data + reg,
            data,
            reg,
        };
        if !(terms.total.is_finite() && data.is_finite() && reg.is_finite()) {
            return Err(Error::numerical("loss", "non-finite loss value"));
        }
        if !with_grad {
            return Ok((terms, Vec::new()));
        }
        let mut g = self.j.adjoint(&r)?;
        for (gi, ti) in g.iter_mut().zip(&tv.grad) {
            *gi = scale * *gi + self.weights.lambda_tv * ti;
        }
        Ok((terms, g))
    }
}

fn check_frame(j: &SensitivityMatrix, net: &FastResUNet, dv: &[f64]) -> Result<()> {
    if dv.len() != j.rows() {
        return Err(Error::invalid(format!(
            "frame has {} measurements, sensitivity has {} rows",
            dv.len(),
            j.rows()
        )));
    }
    if j.cols() != net.dims().len() {
        return Err(Error::invalid(format!(
            "sensitivity has {} columns, network grid has {} voxels",
            j.cols(),
            net.dims().len()
        )));
    }
    Ok(())
}

/// Loss of the current parameters: data misfit of the mapped network
/// output plus `lambda_tv * tv4d`.
#[allow(clippy::too_many_arguments)]
pub fn loss(
    net: &FastResUNet,
    theta: &ParameterState,
    z: &NoiseInput,
    j: &SensitivityMatrix,
    dv: &[f64],
    history: &FrameHistory,
    cfg: &RunConfig,
) -> Result<LossTerms> {
    check_frame(j, net, dv)?;
    let x = cfg.output_map.apply(&net.forward(theta, z)?);
    let obj = Objective {
        j,
        dv,
        history,
        weights: &cfg.tv_weights,
        mode: cfg.data_mode,
    };
    Ok(obj.evaluate(&x, false)?.0)
}

/// Loss and its gradient with respect to every parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    net: &FastResUNet,
    theta: &ParameterState,
    z: &NoiseInput,
    j: &SensitivityMatrix,
    dv: &[f64],
    history: &FrameHistory,
    cfg: &RunConfig,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    check_frame(j, net, dv)?;
    let obj = Objective {
        j,
        dv,
        history,
        weights: &cfg.tv_weights,
        mode: cfg.data_mode,
    };
    let map = cfg.output_map;
    let (_, terms, grads) = net.forward_backward(theta, z, |o| {
        let x = map.apply(o);
        let (terms, mut g) = obj.evaluate(&x, true)?;
        g.iter_mut().for_each(|v| *v *= map.span());
        Ok((terms, g))
    })?;
    Ok((terms, grads))
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub volume: Volume,
    pub theta: ParameterState,
    pub trace: LossTrace,
}

/// Optimizes `theta_init` for `iters` Adam steps and returns the final
/// iterate. The trace holds iteration 0 (the starting point) and every
/// `record_every`-th step, always including the last.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_frame(
    net: &FastResUNet,
    theta_init: &ParameterState,
    z: &NoiseInput,
    j: &SensitivityMatrix,
    dv: &[f64],
    history: &FrameHistory,
    iters: usize,
    cfg: &RunConfig,
) -> Result<FrameOutput> {
    check_frame(j, net, dv)?;
    let obj = Objective {
        j,
        dv,
        history,
        weights: &cfg.tv_weights,
        mode: cfg.data_mode,
    };
    let map = cfg.output_map;
    let mut theta = theta_init.clone();
    let mut adam = Adam::new(cfg.learning_rate, cfg.optimizer_betas, &theta);
    let mut trace = LossTrace::default();
    let start = Instant::now();
    let record = |trace: &mut LossTrace, k: usize, t: LossTerms| {
        trace.records.push(TraceRecord {
            iteration: k,
            data: t.data,
            reg: t.reg,
            total: t.total,
            seconds: start.elapsed().as_secs_f64(),
        });
    };
    for k in 0..iters {
        let (_, terms, grads) = net
            .forward_backward(&theta, z, |o| {
                let x = map.apply(o);
                let (terms, mut g) = obj.evaluate(&x, true)?;
                g.iter_mut().for_each(|v| *v *= map.span());
                Ok((terms, g))
            })
            .map_err(|e| tag(e, k, &trace))?;
        if k % cfg.record_every == 0 {
            record(&mut trace, k, terms);
        }
        adam.step(&mut theta, &grads);
        if !theta.is_finite() {
            return Err(tag(Error::numerical("adam", "non-finite parameters"), k + 1, &trace));
        }
    }
    let volume = map.apply(&net.forward(&theta, z)?);
    let (terms, _) = obj.evaluate(&volume, false).map_err(|e| tag(e, iters, &trace))?;
    record(&mut trace, iters, terms);
    Ok(FrameOutput { volume, theta, trace })
}

fn tag(e: Error, k: usize, trace: &LossTrace) -> Error {
    match e {
        Error::Numerical { stage, message } => Error::Numerical {
            stage,
            message: format!(
                "{message} at iteration {k} (last recorded data term {:?})",
                trace.last().map(|r| r.data)
            ),
        },
        other => other,
    }
}

/// Single-frame pretraining from a fresh init, empty history.
pub fn upws_pretrain(
    net: &FastResUNet,
    z: &NoiseInput,
    j: &SensitivityMatrix,
    dv0: &VoltageFrame,
    cfg: &RunConfig,
) -> Result<(ParameterState, LossTrace)> {
    let init = net.init_parameters()?;
    let out = reconstruct_frame(net, &init, z, j, &dv0.values, &FrameHistory::new(), cfg.iters_warm, cfg)?;
    let mut theta = out.theta;
    theta.provenance = Provenance::Upws;
    Ok((theta, out.trace))
}

/// One stage of a sequence run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `"upws"` or `"frame_<i>"`.
    pub stage: String,
    pub provenance: Provenance,
    pub iterations: usize,
    pub theta_in: String,
    pub theta_out: String,
    pub noise: String,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub sequence: ConductivitySequence,
    pub traces: Vec<LossTrace>,
    pub warm_trace: Option<LossTrace>,
    pub stages: Vec<StageRecord>,
    /// Final parameters of each frame.
    pub checkpoints: Vec<ParameterState>,
    pub warm_checkpoint: Option<ParameterState>,
    /// Wall-clock seconds per frame (warm-start time is charged to frame 1).
    pub timing: Vec<f64>,
    pub noise_seed: u64,
}

impl ReconstructionResult {
    pub fn provenance_chain(&self) -> Vec<Provenance> {
        self.stages.iter().map(|s| s.provenance).collect()
    }

    pub fn write_traces_csv(&self, path: &Path) -> Result<()> {
        write_traces_csv(path, self.warm_trace.as_ref(), &self.traces)
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        io::ensure_parent(path)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("frame,seconds,accumulated\n");
        let mut acc = 0.0;
        for (k, s) in self.timing.iter().enumerate() {
            acc += s;
            text.push_str(&format!("{},{:?},{:?}\n", k + 1, s, acc));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Columns `frame,iteration,data,reg,total,seconds`; the warm-start stage
/// is written as frame 0.
pub fn write_traces_csv(path: &Path, warm: Option<&LossTrace>, traces: &[LossTrace]) -> Result<()> {
    io::ensure_parent(path)?;
    let mut text = String::from("frame,iteration,data,reg,total,seconds\n");
    let stages = warm.map(|t| (0, t)).into_iter().chain(traces.iter().enumerate().map(|(k, t)| (k + 1, t)));
    for (frame, t) in stages {
        for r in &t.records {
            text.push_str(&format!(
                "{frame},{},{:?},{:?},{:?},{:?}\n",
                r.iteration, r.data, r.reg, r.total, r.seconds
            ));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a trace CSV back as `(frame, trace)` pairs in file order.
pub fn read_traces_csv(path: &Path) -> Result<Vec<(usize, LossTrace)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(usize, LossTrace)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("malformed trace row {}", n + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let frame: usize = f[0].parse().map_err(|_| bad())?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let rec = TraceRecord {
            iteration: f[1].parse().map_err(|_| bad())?,
            data: num(f[2])?,
            reg: num(f[3])?,
            total: num(f[4])?,
            seconds: num(f[5])?,
        };
        match out.last_mut() {
            Some((fr, t)) if *fr == frame => t.records.push(rec),
            _ => out.push((frame, LossTrace { records: vec![rec] })),
        }
    }
    Ok(out)
}

/// Runs warm-start pretraining and then every frame in order, handing the
/// final parameters of each frame to the next.
pub fn reconstruct_sequence(
    j: &SensitivityMatrix,
    v: &VoltageSequence,
    dims: Dims3,
    cfg: &RunConfig,
) -> Result<ReconstructionResult> {
    reconstruct_sequence_with(j, v, dims, cfg, None)
}

/// Like [`reconstruct_sequence`], with an optional external warm-start frame.
pub fn reconstruct_sequence_with(
    j: &SensitivityMatrix,
    v: &VoltageSequence,
    dims: Dims3,
    cfg: &RunConfig,
    warm_frame: Option<&VoltageFrame>,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    v.validate()?;
    if v.is_empty() {
        return Err(Error::invalid("voltage sequence is empty"));
    }
    if v.measurements() != j.rows() || dims.len() != j.cols() {
        return Err(Error::invalid(format!(
            "sequence ({} measurements, {} voxels) does not match sensitivity {}x{}",
            v.measurements(),
            dims.len(),
            j.rows(),
            j.cols()
        )));
    }
    let net = FastResUNet::new(cfg.network_config(), dims)?;
    let z = sample_noise(dims, cfg.noise_seed());
    let z_sum = z.checksum();
    let use_upws = !cfg.disabled.contains(&Strategy::Upws);
    let use_tpp = !cfg.disabled.contains(&Strategy::Tpp);

    let mut stages = Vec::new();
    let clock = Instant::now();
    let (start, warm_trace, warm_checkpoint) = if use_upws {
        let dv0 = match warm_frame {
            Some(f) => f.clone(),
            None => v
                .frames
                .get(cfg.warm_start_frame - 1)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("warm-start frame {} is out of range", cfg.warm_start_frame)))?,
        };
        let init = net.init_parameters()?;
        let (theta, trace) = upws_pretrain(&net, &z, j, &dv0, cfg)?;
        stages.push(StageRecord {
            stage: "upws".into(),
            provenance: Provenance::Upws,
            iterations: cfg.iters_warm,
            theta_in: init.checksum(),
            theta_out: theta.checksum(),
            noise: z_sum.clone(),
        });
        (theta.handed_off(Provenance::Upws), Some(trace), Some(theta))
    } else {
        (net.init_parameters()?, None, None)
    };
    let warm_seconds = clock.elapsed().as_secs_f64();

    let mut history = FrameHistory::new();
    let mut frames = Vec::with_capacity(v.len());
    let mut traces = Vec::with_capacity(v.len());
    let mut checkpoints: Vec<ParameterState> = Vec::with_capacity(v.len());
    let mut timing = Vec::with_capacity(v.len());
    for (k, frame) in v.frames.iter().enumerate() {
        let clock = Instant::now();
        let (theta_init, iters) = if k == 0 {
            (start.clone(), cfg.iters_first)
        } else if use_tpp {
            (checkpoints[k - 1].handed_off(Provenance::Tpp), cfg.iters_next)
        } else {
            (start.clone(), cfg.iters_next)
        };
        let out = reconstruct_frame(&net, &theta_init, &z, j, &frame.values, &history, iters, cfg).map_err(|e| {
            match e {
                Error::Numerical { stage, message } => Error::Numerical {
                    stage: format!("{stage} (frame {})", k + 1),
                    message,
                },
                other => other,
            }
        })?;
        let provenance = if k == 0 {
            start.provenance
        } else if use_tpp {
            Provenance::Tpp
        } else {
            start.provenance
        };
        stages.push(StageRecord {
            stage: format!("frame_{}", k + 1),
            provenance,
            iterations: iters,
            theta_in: theta_init.checksum(),
            theta_out: out.theta.checksum(),
            noise: z_sum.clone(),
        });
        history.push(out.volume.clone())?;
        frames.push(out.volume.into_vec());
        traces.push(out.trace);
        let mut theta = out.theta;
        theta.provenance = provenance;
        checkpoints.push(theta);
        timing.push(clock.elapsed().as_secs_f64() + if k == 0 { warm_seconds } else { 0.0 });
    }

    let mut sequence = ConductivitySequence::new(dims, frames, v.reference_mode)?;
    sequence.grid_ref = j.grid_ref.clone();
    sequence.method = Some("d2ip".into());
    Ok(ReconstructionResult {
        sequence,
        traces,
        warm_trace,
        stages,
        checkpoints,
        warm_checkpoint,
        timing,
        noise_seed: cfg.noise_seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::tv4d;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            network: NetworkConfig {
                base_channels: 4,
                ..NetworkConfig::default()
            },
            iters_warm: 3,
            iters_first: 2,
            iters_next: 2,
            learning_rate: 1e-2,
            ..RunConfig::default()
        }
    }

    fn random_matrix(m: usize, q: usize, seed: u64) -> SensitivityMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SensitivityMatrix::from_rows(m, q, (0..m * q).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn defaults_match_published_budget() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage_ratio(), "1800:450:250");
        assert_eq!(cfg.learning_rate, 5e-4);
        assert_eq!(RunConfig::measured().learning_rate, 1e-4);
        assert_eq!(cfg.optimizer_betas, (0.9, 0.999));
        cfg.validate().unwrap();
    }

    #[test]
    fn ablation_modes() {
        let cfg = RunConfig::default();
        assert_eq!(ablation_mode(&cfg, &BTreeSet::new()), cfg);
        let both = ablation_mode(&cfg, &[Strategy::Upws, Strategy::Tpp].into());
        assert_eq!((both.iters_first, both.iters_next), (1800, 1800));
        let tpp = ablation_mode(&cfg, &[Strategy::Tpp].into());
        assert_eq!((tpp.iters_first, tpp.iters_next), (450, 1800));
        assert_eq!("TPP".parse::<Strategy>().unwrap(), Strategy::Tpp);
        assert!("foo".parse::<Strategy>().is_err());
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let dims = Dims3::new(8, 8, 8);
        let cfg = tiny_cfg();
        let net = FastResUNet::new(cfg.network_config(), dims).unwrap();
        let theta = net.init_parameters().unwrap();
        let z = sample_noise(dims, 9);
        let j = random_matrix(4, dims.len(), 1);
        let dv = vec![0.3, -0.1, 0.7, 0.2];
        let mut history = FrameHistory::new();
        history.push(Volume::filled(dims, 0.01)).unwrap();
        let got = loss(&net, &theta, &z, &j, &dv, &history, &cfg).unwrap();

        let o = net.forward(&theta, &z).unwrap();
        let x: Vec<f64> = o.as_slice().iter().map(|v| -0.135 + 0.135 * v).collect();
        let mut r2 = 0.0;
        for (i, d) in dv.iter().enumerate() {
            let p: f64 = (0..dims.len()).map(|q| j.get(i, q) * x[q]).sum();
            r2 += (p - d) * (p - d);
        }
        let xv = crate::volume::devectorize(&x, dims).unwrap();
        let reg = 0.002 * tv4d(&history, &xv, &cfg.tv_weights).unwrap();
        assert!((got.data - r2.sqrt()).abs() < 1e-10 * r2.sqrt());
        assert!((got.reg - reg).abs() < 1e-12);
        assert!((got.total - (r2.sqrt() + reg)).abs() < 1e-10);
    }

    #[test]
    fn zero_lambda_and_zero_residual() {
        let dims = Dims3::new(8, 8, 8);
        let mut cfg = tiny_cfg();
        cfg.tv_weights.lambda_tv = 0.0;
        let net = FastResUNet::new(cfg.network_config(), dims).unwrap();
        let theta = net.init_parameters().unwrap();
        let z = sample_noise(dims, 2);
        let j = random_matrix(6, dims.len(), 3);
        let x = cfg.output_map.apply(&net.forward(&theta, &z).unwrap());
        let dv = forward_project(&j, x.as_slice()).unwrap();
        let t = loss(&net, &theta, &z, &j, &dv, &FrameHistory::new(), &cfg).unwrap();
        assert_eq!(t.reg, 0.0);
        assert_eq!(t.total, t.data);
        assert!(t.data < 1e-12);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let dims = Dims3::new(8, 8, 8);
        let cfg = tiny_cfg();
        let net = FastResUNet::new(cfg.network_config(), dims).unwrap();
        let theta = net.init_parameters().unwrap();
        let z = sample_noise(dims, 2);
        let j = random_matrix(6, dims.len(), 3);
        let dv = vec![0.1; 6];
        let out = reconstruct_frame(&net, &theta, &z, &j, &dv, &FrameHistory::new(), 0, &cfg).unwrap();
        assert!(out.theta.same_values(&theta));
        let expect = cfg.output_map.apply(&net.forward(&theta, &z).unwrap());
        assert_eq!(out.volume, expect);
        assert_eq!(out.trace.len(), 1);

        let zero = RunConfig { iters_warm: 0, ..cfg.clone() };
        let (warm, _) = upws_pretrain(&net, &z, &j, &VoltageFrame::new(dv, 1), &zero).unwrap();
        assert!(warm.same_values(&theta));
        assert_eq!(warm.provenance, Provenance::Upws);
    }

    #[test]
    fn steps_change_parameters_and_trace_layout() {
        let dims = Dims3::new(8, 8, 8);
        let cfg = RunConfig { record_every: 2, ..tiny_cfg() };
        let net = FastResUNet::new(cfg.network_config(), dims).unwrap();
        let theta = net.init_parameters().unwrap();
        let z = sample_noise(dims, 2);
        let j = random_matrix(6, dims.len(), 3);
        let dv = vec![0.1; 6];
        let out = reconstruct_frame(&net, &theta, &z, &j, &dv, &FrameHistory::new(), 5, &cfg).unwrap();
        assert_ne!(out.theta.checksum(), theta.checksum());
        let its: Vec<usize> = out.trace.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 2, 4, 5]);
        assert!(out.trace.is_finite());
    }

    #[test]
    fn sequence_hand_off_and_csv() {
        let dims = Dims3::new(8, 8, 8);
        let cfg = tiny_cfg();
        let j = random_matrix(5, dims.len(), 4);
        let frames = (1..=3)
            .map(|i| VoltageFrame::new(vec![0.1 * i as f64; 5], i))
            .collect();
        let v = VoltageSequence::new(frames, crate::forward::ReferenceMode::EmptyBackground).unwrap();
        let res = reconstruct_sequence(&j, &v, dims, &cfg).unwrap();
        assert_eq!(res.sequence.len(), 3);
        assert_eq!(
            res.provenance_chain(),
            vec![Provenance::Upws, Provenance::Upws, Provenance::Tpp, Provenance::Tpp]
        );
        for w in res.stages.windows(2) {
            assert_eq!(w[1].theta_in, w[0].theta_out);
            assert_eq!(w[1].noise, w[0].noise);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        res.write_traces_csv(&path).unwrap();
        let back = read_traces_csv(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[1].1, res.traces[0]);

        let cold = ablation_mode(&cfg, &[Strategy::Upws, Strategy::Tpp].into());
        let res = reconstruct_sequence(&j, &v, dims, &cold).unwrap();
        assert!(res.warm_trace.is_none());
        let first_in = &res.stages[0].theta_in;
        assert!(res.stages.iter().all(|s| &s.theta_in == first_in));
        assert!(res.stages.iter().all(|s| s.iterations == 3));
    }

    #[test]
    fn config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let cfg = ablation_mode(&RunConfig::default(), &[Strategy::Tpp].into());
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
