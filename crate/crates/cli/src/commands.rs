use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use d2ip_core::baselines::{tv_reconstruct, TikhonovConfig, TikhonovSolver};
use d2ip_core::d2ip::{ablation_mode, read_traces_csv, reconstruct_sequence_with, LossTrace, OutputMap, Strategy};
use d2ip_core::forward::{
    assemble_sensitivity, load_matrix, normalize_sensitivity, save_matrix, SensitivityMatrix, VoltageFrame,
    VoltageSequence,
};
use d2ip_core::geometry::{build_grid, default_electrodes, Extent, Setup};
use d2ip_core::metrics::evaluate_sequence;
use d2ip_core::phantom::{make_phantom, masks, synthesize_measurements, ConductivitySequence, LungPhantomSpec};
use d2ip_core::volume::Dims3;
use serde::{Deserialize, Serialize};

use crate::config::{resolve_output, ExperimentConfig, Method, Scenario};
use crate::error::{CliError, CliResult};
use crate::plot::{bar_chart, line_chart, LineChart, Series};

pub const MANIFEST: &str = "manifest.json";
pub const GEOMETRY: &str = "geometry.json";
pub const SENSITIVITY: &str = "sensitivity.f64";
pub const TRUTH: &str = "truth.f64";
pub const VOLTAGES: &str = "voltages.f64";
pub const MASKS: &str = "masks.json";
pub const RECON: &str = "recon.f64";
pub const TRACES: &str = "traces.csv";
pub const TIMING: &str = "timing.csv";
pub const STAGES: &str = "stages.json";
pub const METRICS: &str = "metrics.csv";
pub const NO_GROUND_TRUTH: &str = "no ground truth";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: serde_json::Value,
}

impl Manifest {
    fn new(command: &str, argv: &[String], config: &ExperimentConfig) -> Self {
        Self {
            tool: "d2ip".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: argv.to_vec(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: serde_json::Value::Null,
        }
    }

    fn record(map: &mut BTreeMap<String, String>, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| d2ip_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        map.insert(path.display().to_string(), d2ip_core::io::fingerprint(&bytes));
        Ok(())
    }

    fn output(&mut self, path: &Path) -> CliResult<()> {
        Self::record(&mut self.outputs, path)
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        Self::record(&mut self.inputs, path)
    }

    fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST);
        d2ip_core::io::write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::MissingInput(path));
        }
        Ok(d2ip_core::io::read_json(&path)?)
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn mkdir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(d2ip_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_timing(path: &Path, seconds: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(["frame", "seconds", "accumulated"]).map_err(|e| CliError::csv(path, e))?;
    let mut acc = 0.0;
    for (k, s) in seconds.iter().enumerate() {
        acc += s;
        w.write_record([(k + 1).to_string(), format!("{s:?}"), format!("{acc:?}")])
            .map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::csv(path, e))
}

pub fn read_timing(path: &Path) -> CliResult<Vec<(usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    r.deserialize::<(usize, f64, f64)>()
        .map(|row| row.map_err(|e| CliError::csv(path, e)))
        .collect()
}

pub fn build_setup(cfg: &ExperimentConfig) -> CliResult<Setup> {
    let grid = build_grid(cfg.rows, cfg.cols, cfg.planes, Extent::thorax())?;
    let electrodes = default_electrodes(&grid)?;
    Ok(Setup::new(grid, electrodes, cfg.scheme)?)
}

pub fn simulate(cfg: &ExperimentConfig, argv: &[String]) -> CliResult<PathBuf> {
    cfg.validate()?;
    let spec_for = |grid| match cfg.scenario {
        Scenario::Case1 => Ok(LungPhantomSpec::healthy(grid, cfg.frames)),
        Scenario::Case2 => Ok(LungPhantomSpec::edema(grid, cfg.frames)),
        Scenario::External => Err(CliError::Config(
            "the external scenario has no simulator; pass measured files to `reconstruct`".into(),
        )),
    };
    let setup = build_setup(cfg)?;
    let spec = spec_for(&setup.grid)?;
    let out = resolve_output(&cfg.output_dir);
    mkdir(&out)?;

    let j = normalize_sensitivity(&assemble_sensitivity(&setup.grid, &setup.electrodes, &setup.protocol)?)?;
    let truth = make_phantom(&setup.grid, &spec)?;
    let v = synthesize_measurements(&truth, &j, cfg.noise_snr(), cfg.seed)?;

    let mut manifest = Manifest::new("simulate", argv, cfg);
    let geometry = out.join(GEOMETRY);
    setup.save(&geometry)?;
    let sens = out.join(SENSITIVITY);
    save_matrix(&j, &sens)?;
    let truth_path = out.join(TRUTH);
    truth.save(&truth_path)?;
    let volt = out.join(VOLTAGES);
    v.save(&volt)?;
    for p in [&geometry, &sens, &truth_path, &volt] {
        manifest.output(p)?;
    }
    let m = masks(&setup.grid, &spec, cfg.frames);
    let indices = |mask: &[bool]| mask.iter().enumerate().filter(|(_, b)| **b).map(|(q, _)| q).collect::<Vec<_>>();
    let mask_path = out.join(MASKS);
    d2ip_core::io::write_json(
        &mask_path,
        &serde_json::json!({
            "frame": cfg.frames,
            "left": indices(&m.left),
            "right": indices(&m.right),
            "edema": indices(&m.edema),
            "healthy": indices(&m.healthy()),
        }),
    )?;
    manifest.output(&mask_path)?;
    manifest.notes = serde_json::json!({
        "measurements": j.rows(),
        "voxels": j.cols(),
        "voltage_frames": v.len(),
        "reference_mode": v.reference_mode,
    });
    manifest.write(&out)?;
    println!(
        "simulated {:?}: {} frames of {} measurements on {}x{}x{} -> {}",
        cfg.scenario,
        v.len(),
        j.rows(),
        cfg.rows,
        cfg.cols,
        cfg.planes,
        out.display()
    );
    Ok(out)
}

pub struct ReconstructInputs {
    pub input_dir: PathBuf,
    pub sensitivity: Option<PathBuf>,
    pub voltages: Option<PathBuf>,
    pub warm_voltages: Option<PathBuf>,
    pub disable: BTreeSet<Strategy>,
    /// Take the output map from the simulated scenario's conductivity range.
    pub scenario_output_map: bool,
}

fn load_inputs(cfg: &ExperimentConfig, inp: &ReconstructInputs) -> CliResult<(SensitivityMatrix, VoltageSequence, Dims3, Vec<PathBuf>)> {
    let sens = inp.sensitivity.clone().unwrap_or_else(|| inp.input_dir.join(SENSITIVITY));
    let volt = inp.voltages.clone().unwrap_or_else(|| inp.input_dir.join(VOLTAGES));
    require(&sens)?;
    require(&volt)?;
    let j = load_matrix(&sens)?;
    let v = VoltageSequence::load(&volt)?;
    let geometry = inp.input_dir.join(GEOMETRY);
    let mut used = vec![sens, volt];
    let dims = if geometry.exists() {
        let setup = Setup::load(&geometry)?;
        j.check_against(&setup.grid, &setup.protocol)?;
        used.push(geometry);
        setup.grid.dims()
    } else {
        Dims3::new(cfg.rows, cfg.cols, cfg.planes)
    };
    if dims.len() != j.cols() {
        return Err(CliError::Config(format!(
            "grid {}x{}x{} has {} voxels but the sensitivity has {} columns",
            dims.rows,
            dims.cols,
            dims.planes,
            dims.len(),
            j.cols()
        )));
    }
    Ok((j, v, dims, used))
}

/// Conductivity-change interval of a simulated scenario, if the input
/// directory came from `simulate`.
fn scenario_bounds(input_dir: &Path) -> CliResult<Option<(f64, f64)>> {
    let (manifest, geometry) = (input_dir.join(MANIFEST), input_dir.join(GEOMETRY));
    if !manifest.exists() || !geometry.exists() {
        return Ok(None);
    }
    let m = Manifest::load(input_dir)?;
    if m.command != "simulate" {
        return Ok(None);
    }
    let grid = Setup::load(&geometry)?.grid;
    Ok(match m.config.scenario {
        Scenario::Case1 => Some(LungPhantomSpec::healthy(&grid, m.config.frames).change_bounds()),
        Scenario::Case2 => Some(LungPhantomSpec::edema(&grid, m.config.frames).change_bounds()),
        Scenario::External => None,
    })
}

fn mu_tag(mu: f64) -> String {
    format!("{mu}")
}

pub fn reconstruct(cfg: &ExperimentConfig, inp: &ReconstructInputs, argv: &[String]) -> CliResult<PathBuf> {
    cfg.validate()?;
    let (j, v, dims, used) = load_inputs(cfg, inp)?;
    let out = resolve_output(&cfg.output_dir);
    mkdir(&out)?;
    let mut cfg = cfg.clone();
    let mut manifest_notes = serde_json::Map::new();
    let mut outputs: Vec<PathBuf> = Vec::new();

    match cfg.method {
        Method::D2ip => {
            if inp.scenario_output_map {
                if let Some((lo, hi)) = scenario_bounds(&inp.input_dir)? {
                    cfg.d2ip.output_map = OutputMap { lo, hi };
                }
            }
            cfg.d2ip = ablation_mode(&cfg.d2ip, &inp.disable);
            let warm = match &inp.warm_voltages {
                Some(p) => {
                    require(p)?;
                    let seq = VoltageSequence::load(p)?;
                    Some(seq.frames.first().cloned().unwrap_or_else(|| VoltageFrame::new(Vec::new(), 1)))
                }
                None => None,
            };
            let res = reconstruct_sequence_with(&j, &v, dims, &cfg.d2ip, warm.as_ref())?;
            let recon = out.join(RECON);
            res.sequence.save(&recon)?;
            let traces = out.join(TRACES);
            res.write_traces_csv(&traces)?;
            let timing = out.join(TIMING);
            write_timing(&timing, &res.timing)?;
            let stages = out.join(STAGES);
            d2ip_core::io::write_json(&stages, &res.stages)?;
            let ckpt_dir = out.join("checkpoints");
            let net_cfg = cfg.d2ip.network_config();
            if let Some(theta) = &res.warm_checkpoint {
                let p = ckpt_dir.join("upws.ckpt");
                theta.save(&p, &net_cfg)?;
                outputs.push(p);
            }
            for (k, theta) in res.checkpoints.iter().enumerate() {
                let p = ckpt_dir.join(format!("frame_{:03}.ckpt", k + 1));
                theta.save(&p, &net_cfg)?;
                outputs.push(p);
            }
            outputs.extend([recon, traces, timing, stages]);
            manifest_notes.insert("noise_seed".into(), res.noise_seed.into());
            manifest_notes.insert(
                "provenance".into(),
                serde_json::to_value(res.provenance_chain()).unwrap_or_default(),
            );
            println!(
                "d2ip: {} frames, stage ratio {}, {:.2}s total -> {}",
                res.sequence.len(),
                cfg.d2ip.stage_ratio(),
                res.timing.iter().sum::<f64>(),
                out.display()
            );
        }
        Method::Tikhonov => {
            let mus = cfg.mu_values();
            let sweep = !cfg.tikhonov.sweep.is_empty();
            let solve = |mu: f64| -> CliResult<(ConductivitySequence, Vec<f64>)> {
                let mu_cfg = TikhonovConfig::new(mu)?;
                let clock = Instant::now();
                let solver = TikhonovSolver::new(&j);
                let factor = solver.factor(mu_cfg.mu)?;
                let setup = clock.elapsed().as_secs_f64();
                let mut seconds = Vec::with_capacity(v.len());
                let mut frames = Vec::with_capacity(v.len());
                for (k, f) in v.frames.iter().enumerate() {
                    let clock = Instant::now();
                    frames.push(factor.solve(&f.values)?);
                    seconds.push(clock.elapsed().as_secs_f64() + if k == 0 { setup } else { 0.0 });
                }
                let mut seq = ConductivitySequence::new(dims, frames, v.reference_mode)?;
                seq.grid_ref = j.grid_ref.clone();
                seq.method = Some(format!("tikhonov(mu={mu})"));
                Ok((seq, seconds))
            };
            let results: Vec<CliResult<(ConductivitySequence, Vec<f64>)>> = if cfg.parallel && mus.len() > 1 {
                std::thread::scope(|s| {
                    let handles: Vec<_> = mus.iter().map(|&mu| s.spawn(move || solve(mu))).collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Config("solver thread panicked".into()))))
                        .collect()
                })
            } else {
                mus.iter().map(|&mu| solve(mu)).collect()
            };
            for (mu, r) in mus.iter().zip(results) {
                let (seq, seconds) = r?;
                let (recon, timing) = if sweep {
                    (
                        out.join(format!("recon_mu_{}.f64", mu_tag(*mu))),
                        out.join(format!("timing_mu_{}.csv", mu_tag(*mu))),
                    )
                } else {
                    (out.join(RECON), out.join(TIMING))
                };
                seq.save(&recon)?;
                write_timing(&timing, &seconds)?;
                outputs.extend([recon, timing]);
            }
            manifest_notes.insert("mu".into(), serde_json::to_value(&mus).unwrap_or_default());
            println!("tikhonov: {} frames for mu in {:?} -> {}", v.len(), mus, out.display());
        }
        Method::Tv => {
            let mut frames = Vec::with_capacity(v.len());
            let mut seconds = Vec::with_capacity(v.len());
            let trace_path = out.join("tv_trace.csv");
            let mut w = csv::Writer::from_path(&trace_path).map_err(|e| CliError::csv(&trace_path, e))?;
            w.write_record(["frame", "iteration", "objective"])
                .map_err(|e| CliError::csv(&trace_path, e))?;
            for (k, f) in v.frames.iter().enumerate() {
                let clock = Instant::now();
                let r = tv_reconstruct(&j, &f.values, dims, &cfg.tv)?;
                seconds.push(clock.elapsed().as_secs_f64());
                for (it, obj) in r.trace.iter().enumerate() {
                    w.write_record([(k + 1).to_string(), it.to_string(), format!("{obj:?}")])
                        .map_err(|e| CliError::csv(&trace_path, e))?;
                }
                frames.push(r.x);
            }
            w.flush().map_err(|e| CliError::csv(&trace_path, e))?;
            let mut seq = ConductivitySequence::new(dims, frames, v.reference_mode)?;
            seq.grid_ref = j.grid_ref.clone();
            seq.method = Some(format!("tv(lambda={})", cfg.tv.lambda_tv));
            let recon = out.join(RECON);
            seq.save(&recon)?;
            let timing = out.join(TIMING);
            write_timing(&timing, &seconds)?;
            outputs.extend([recon, timing, trace_path]);
            println!("tv: {} frames -> {}", v.len(), out.display());
        }
    }

    let mut manifest = Manifest::new("reconstruct", argv, &cfg);
    for p in &used {
        manifest.input(p)?;
    }
    if let Some(p) = &inp.warm_voltages {
        manifest.input(p)?;
    }
    for p in &outputs {
        manifest.output(p)?;
    }
    manifest_notes.insert("input_dir".into(), inp.input_dir.display().to_string().into());
    manifest.notes = serde_json::Value::Object(manifest_notes);
    manifest.write(&out)?;
    Ok(out)
}

pub struct EvaluateInputs {
    pub recon: PathBuf,
    pub truth: Option<PathBuf>,
    pub peak: Option<f64>,
}

pub fn evaluate(cfg: &ExperimentConfig, inp: &EvaluateInputs, argv: &[String]) -> CliResult<PathBuf> {
    require(&inp.recon)?;
    let recon = ConductivitySequence::load(&inp.recon)?;
    let out = resolve_output(&cfg.output_dir);
    mkdir(&out)?;
    let mut manifest = Manifest::new("evaluate", argv, cfg);
    manifest.input(&inp.recon)?;

    let truth = match &inp.truth {
        Some(p) => {
            require(p)?;
            manifest.input(p)?;
            Some(ConductivitySequence::load(p)?).filter(|t| t.is_ground_truth)
        }
        None => None,
    };
    let Some(truth) = truth else {
        let marker = out.join("metrics_skipped.txt");
        std::fs::write(&marker, format!("{NO_GROUND_TRUTH}\n")).map_err(|e| d2ip_core::Error::Io {
            path: marker.clone(),
            source: e,
        })?;
        manifest.output(&marker)?;
        manifest.notes = serde_json::json!({ "metrics": NO_GROUND_TRUTH });
        manifest.write(&out)?;
        println!("{NO_GROUND_TRUTH}: metrics skipped for {}", inp.recon.display());
        return Ok(out);
    };

    let report = evaluate_sequence(&recon, &truth, inp.peak)?;
    let csv_path = out.join(METRICS);
    report.write_csv(&csv_path)?;
    manifest.output(&csv_path)?;
    let label = recon.method.clone().unwrap_or_else(|| "reconstruction".into());
    for (name, pick) in [
        ("cc", (|m: &d2ip_core::metrics::FrameMetrics| m.cc) as fn(&_) -> f64),
        ("psnr", |m| m.psnr),
        ("mssim", |m| m.mssim),
        ("err", |m| m.err),
    ] {
        let path = out.join(format!("{name}.png"));
        let chart = LineChart {
            title: format!("{name} per frame"),
            x_label: "frame".into(),
            y_label: name.into(),
            log_y: false,
            series: vec![Series {
                label: label.clone(),
                points: report
                    .per_frame
                    .iter()
                    .enumerate()
                    .map(|(k, m)| ((k + 1) as f64, pick(m)))
                    .collect(),
            }],
        };
        line_chart(&path, &chart).map_err(|e| CliError::plot(&path, e))?;
        manifest.output(&path)?;
    }
    manifest.notes = serde_json::to_value(report.means).unwrap_or_default();
    manifest.write(&out)?;
    let m = report.means;
    println!(
        "means over {} frames: cc {:.4} psnr {:.2} mssim {:.4} err {:.4} -> {}",
        report.per_frame.len(),
        m.cc,
        m.psnr,
        m.mssim,
        m.err,
        out.display()
    );
    Ok(out)
}

struct RunSummary {
    label: String,
    method: String,
    cold: bool,
    timings: Vec<(String, Vec<(usize, f64, f64)>)>,
    traces: Vec<(usize, LossTrace)>,
}

fn label_of(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_run(dir: &Path) -> CliResult<RunSummary> {
    let manifest = Manifest::load(dir)?;
    let label = label_of(dir);
    let mut timings = Vec::new();
    let main = dir.join(TIMING);
    if main.exists() {
        timings.push((label.clone(), read_timing(&main)?));
    }
    let mut extra: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| d2ip_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("timing_mu_") && n.ends_with(".csv"))
        })
        .collect();
    extra.sort();
    for p in extra {
        let name = p.file_stem().and_then(|n| n.to_str()).unwrap_or("timing").replace("timing_", "");
        timings.push((format!("{label} {name}"), read_timing(&p)?));
    }
    if timings.is_empty() {
        return Err(CliError::MissingInput(main));
    }
    let trace_path = dir.join(TRACES);
    let traces = if trace_path.exists() {
        read_traces_csv(&trace_path)?
    } else {
        Vec::new()
    };
    let d = &manifest.config.d2ip.disabled;
    Ok(RunSummary {
        label,
        method: format!("{:?}", manifest.config.method).to_lowercase(),
        cold: manifest.config.method == Method::D2ip && d.contains(&Strategy::Upws) && d.contains(&Strategy::Tpp),
        timings,
        traces,
    })
}

pub fn report(cfg: &ExperimentConfig, runs: &[PathBuf], argv: &[String]) -> CliResult<PathBuf> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let summaries = runs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    let out = resolve_output(&cfg.output_dir);
    mkdir(&out)?;
    let mut manifest = Manifest::new("report", argv, cfg);
    for d in runs {
        manifest.input(&d.join(MANIFEST))?;
    }

    let acc_path = out.join("accumulated_time.png");
    let series: Vec<Series> = summaries
        .iter()
        .flat_map(|s| {
            s.timings.iter().map(|(label, rows)| Series {
                label: label.clone(),
                points: rows.iter().map(|r| (r.0 as f64, r.2)).collect(),
            })
        })
        .collect();
    line_chart(
        &acc_path,
        &LineChart {
            title: "accumulated time".into(),
            x_label: "frame".into(),
            y_label: "seconds".into(),
            log_y: false,
            series: series.clone(),
        },
    )
    .map_err(|e| CliError::plot(&acc_path, e))?;
    manifest.output(&acc_path)?;

    let bar_path = out.join("total_time.png");
    let categories: Vec<String> = series.iter().map(|s| s.label.clone()).collect();
    let totals: Vec<f64> = series.iter().map(|s| s.points.last().map_or(0.0, |p| p.1)).collect();
    bar_chart(&bar_path, "total time", "seconds", &categories, &[("total".into(), totals)])
        .map_err(|e| CliError::plot(&bar_path, e))?;
    manifest.output(&bar_path)?;

    let summary_path = out.join("summary.csv");
    {
        let mut w = csv::Writer::from_path(&summary_path).map_err(|e| CliError::csv(&summary_path, e))?;
        w.write_record(["run", "method", "frames", "total_seconds", "mean_frame_seconds"])
            .map_err(|e| CliError::csv(&summary_path, e))?;
        for s in &summaries {
            for (label, rows) in &s.timings {
                let total = rows.last().map_or(0.0, |r| r.2);
                w.write_record([
                    label.clone(),
                    s.method.clone(),
                    rows.len().to_string(),
                    format!("{total:?}"),
                    format!("{:?}", total / rows.len().max(1) as f64),
                ])
                .map_err(|e| CliError::csv(&summary_path, e))?;
            }
        }
        w.flush().map_err(|e| CliError::csv(&summary_path, e))?;
    }
    manifest.output(&summary_path)?;

    for s in summaries.iter().filter(|s| !s.traces.is_empty()) {
        let path = out.join(format!("convergence_{}.png", s.label));
        let series = s
            .traces
            .iter()
            .map(|(frame, t)| Series {
                label: if *frame == 0 { "upws".into() } else { format!("frame {frame}") },
                points: t.records.iter().map(|r| (r.iteration as f64, r.data)).collect(),
            })
            .collect();
        line_chart(
            &path,
            &LineChart {
                title: format!("data term {}", s.label),
                x_label: "iteration".into(),
                y_label: "data".into(),
                log_y: true,
                series,
            },
        )
        .map_err(|e| CliError::plot(&path, e))?;
        manifest.output(&path)?;
    }

    if let Some(cold) = summaries.iter().find(|s| s.cold && !s.traces.is_empty()) {
        let path = out.join("speedup.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::csv(&path, e))?;
        w.write_record(["run", "frame", "threshold", "iterations", "cold_iterations", "speedup"])
            .map_err(|e| CliError::csv(&path, e))?;
        let frames: BTreeMap<usize, &LossTrace> = cold.traces.iter().filter(|(f, _)| *f > 0).map(|(f, t)| (*f, t)).collect();
        for s in summaries.iter().filter(|s| !s.traces.is_empty()) {
            for (frame, t) in s.traces.iter().filter(|(f, _)| *f > 0) {
                let Some(ct) = frames.get(frame) else { continue };
                let Some(last) = ct.last() else { continue };
                let threshold = 1.05 * last.data;
                let ci = ct.iterations_to(threshold);
                let ri = t.iterations_to(threshold);
                let fmt = |v: Option<usize>| v.map_or_else(|| "not reached".to_string(), |n| n.to_string());
                let speedup = match (ci, ri) {
                    (Some(c), Some(r)) => format!("{:?}", c as f64 / r.max(1) as f64),
                    _ => String::new(),
                };
                w.write_record([
                    s.label.clone(),
                    frame.to_string(),
                    format!("{threshold:?}"),
                    fmt(ri),
                    fmt(ci),
                    speedup,
                ])
                .map_err(|e| CliError::csv(&path, e))?;
            }
        }
        w.flush().map_err(|e| CliError::csv(&path, e))?;
        manifest.output(&path)?;
    }

    manifest.write(&out)?;
    println!("report over {} runs -> {}", summaries.len(), out.display());
    Ok(out)
}
