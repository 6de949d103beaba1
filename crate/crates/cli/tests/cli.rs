use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d2ip_core::forward::ReferenceMode;
use d2ip_core::phantom::ConductivitySequence;
use d2ip_core::volume::Dims3;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_d2ip"));
    c.env_remove("D2IP_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, scenario: &str, frames: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("sim_{scenario}_{frames}"));
    let frames = frames.to_string();
    let mut args = vec!["simulate", "--scenario", scenario, "--frames", &frames, "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: [&str; 8] = [
    "--iters-warm",
    "3",
    "--iters-first",
    "2",
    "--iters-next",
    "2",
    "--base-channels",
    "4",
];

#[test]
fn simulate_writes_a_self_describing_run() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "case1", 20, &[]);
    for f in ["geometry.json", "sensitivity.f64", "sensitivity.f64.json", "truth.f64", "voltages.f64", "manifest.json"] {
        assert!(sim.join(f).exists(), "{f} missing");
    }
    let side = json(&sim.join("voltages.f64.json"));
    assert_eq!(side["T"], 20);
    assert_eq!(side["M"], 416);
    let manifest = json(&sim.join("manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config"]["frames"], 20);
    assert!(manifest["argv"].as_array().unwrap().len() > 3);
}

#[test]
fn edema_scenario_has_one_fewer_differential_frame() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "case2", 20, &[]);
    assert_eq!(json(&sim.join("voltages.f64.json"))["T"], 19);
    assert_eq!(json(&sim.join("voltages.f64.json"))["reference_mode"], "first_frame");
}

#[test]
fn simulation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["simulate", "--frames", "4", "--snr-db", "30", "--seed", "7", "--out", s(out)]);
    }
    for f in ["sensitivity.f64", "truth.f64", "voltages.f64"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tikhonov_sweep_writes_one_output_per_mu() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "case1", 3, &["--snr-db", "40"]);
    let out = dir.path().join("tik");
    ok(&["reconstruct", "--input", s(&sim), "--method", "tikhonov", "--mu-sweep", "--parallel", "--out", s(&out)]);
    let recons: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            n.starts_with("recon_mu_") && n.ends_with(".f64")
        })
        .collect();
    assert_eq!(recons.len(), 10);
    assert!(out.join("timing_mu_0.001.csv").exists());
    assert!(out.join("recon_mu_0.01.f64").exists());
}

#[test]
fn d2ip_provenance_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "case1", 3, &[]);
    let warm = dir.path().join("warm");
    let mut args = vec!["reconstruct", "--input", s(&sim), "--method", "d2ip", "--out", s(&warm)];
    args.extend_from_slice(&TINY);
    ok(&args);
    let stages = json(&warm.join("stages.json"));
    let chain: Vec<&str> = stages.as_array().unwrap().iter().map(|s| s["provenance"].as_str().unwrap()).collect();
    assert_eq!(chain, ["upws", "upws", "tpp", "tpp"]);
    let st = stages.as_array().unwrap();
    for w in st.windows(2) {
        assert_eq!(w[1]["theta_in"], w[0]["theta_out"]);
    }
    assert!(warm.join("checkpoints/upws.ckpt").exists());
    assert!(warm.join("checkpoints/frame_003.ckpt").exists());
    let manifest = json(&warm.join("manifest.json"));
    assert_eq!(manifest["config"]["d2ip"]["output_map"]["lo"], -0.135);

    let cold = dir.path().join("cold");
    let mut args = vec!["reconstruct", "--input", s(&sim), "--method", "d2ip", "--disable", "upws,tpp", "--out", s(&cold)];
    args.extend_from_slice(&TINY);
    ok(&args);
    let stages = json(&cold.join("stages.json"));
    let st = stages.as_array().unwrap();
    assert_eq!(st.len(), 3);
    assert!(st.iter().all(|s| s["provenance"] == "kaiming_init" && s["iterations"] == 3));
    assert!(st.iter().all(|s| s["theta_in"] == st[0]["theta_in"]));

    let report = dir.path().join("report");
    ok(&["report", s(&warm), s(&cold), "--out", s(&report)]);
    for f in ["accumulated_time.png", "total_time.png", "summary.csv", "speedup.csv", "convergence_warm.png"] {
        assert!(report.join(f).exists(), "{f} missing");
    }
    let summary = std::fs::read_to_string(report.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn evaluate_identity_and_missing_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "case1", 4, &[]);
    let truth = sim.join("truth.f64");
    let out = dir.path().join("eval");
    ok(&["evaluate", "--recon", s(&truth), "--truth", s(&truth), "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frame,cc,psnr,mssim,err");
    assert_eq!(lines.len(), 1 + 4 + 1);
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert!((f[1].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f[2], "100.0");
        assert!((f[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0);
    }
    for p in ["cc.png", "psnr.png", "mssim.png", "err.png"] {
        assert!(out.join(p).exists());
    }

    let skipped = dir.path().join("skip");
    let o = ok(&["evaluate", "--recon", s(&truth), "--out", s(&skipped)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("no ground truth"));
    assert_eq!(std::fs::read_to_string(skipped.join("metrics_skipped.txt")).unwrap().trim(), "no ground truth");
    assert!(!skipped.join("metrics.csv").exists());
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("x");
    let o = run(&["reconstruct", "--input", s(&missing), "--method", "tikhonov", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));

    assert_eq!(run(&["simulate", "--frames", "0", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--scenario", "external", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--bogus"]).status.code(), Some(2));

    let dims = Dims3::new(12, 12, 1);
    let truth_path = dir.path().join("t.f64");
    let flat_path = dir.path().join("flat.f64");
    let mut truth = ConductivitySequence::new(dims, vec![(0..144).map(|k| k as f64).collect()], ReferenceMode::EmptyBackground)
        .unwrap();
    truth.is_ground_truth = true;
    truth.save(&truth_path).unwrap();
    ConductivitySequence::new(dims, vec![vec![0.5; 144]], ReferenceMode::EmptyBackground)
        .unwrap()
        .save(&flat_path)
        .unwrap();
    let o = run(&["evaluate", "--recon", s(&flat_path), "--truth", s(&truth_path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn output_root_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(&cfg_path, r#"{"frames": 3, "rows": 8, "cols": 8, "planes": 8, "output_dir": "from_config"}"#).unwrap();
    let o = bin()
        .env("D2IP_OUTPUT_ROOT", dir.path())
        .args(["simulate", "--config", s(&cfg_path), "--planes", "16"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sim = dir.path().join("from_config");
    let side = json(&sim.join("voltages.f64.json"));
    assert_eq!(side["T"], 3);
    let geom = json(&sim.join("geometry.json"));
    assert_eq!((geom["R"].as_u64(), geom["P"].as_u64()), (Some(8), Some(16)));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["simulate", "--config", s(&bad)]).status.code(), Some(2));
}
