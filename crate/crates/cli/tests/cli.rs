use std::path::Path;
use std::process::{Command, Output};

fn gsvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsvr")).args(args).output().expect("run gsvr")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(gsvr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gsvr(&["simulate"]).status.code(), Some(1));
    assert_eq!(gsvr(&["simulate", "--preset", "huge", "--out-dir", "x"]).status.code(), Some(1));
    assert_eq!(gsvr(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("case.json");
    let out = gsvr(&["reconstruct", p(&missing), "--out-dir", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(p(&missing)), "{}", stderr(&out));
}

#[test]
fn invalid_config_exits_3_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case");
    assert!(gsvr(&["simulate", "--preset", "desk", "--seed", "1", "--out-dir", p(&case)]).status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[loss]\nlambda1 = -1.0\n").unwrap();
    let out = gsvr(&["reconstruct", p(&case.join("case.json")), "--config", p(&cfg), "--out-dir", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("loss.lambda1"), "{}", stderr(&out));

    std::fs::write(case.join("stacks.gstk"), b"GSTKgarbage").unwrap();
    let out = gsvr(&["reconstruct", p(&case.join("case.json")), "--out-dir", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case");
    assert!(gsvr(&["simulate", "--preset", "desk", "--seed", "2", "--out-dir", p(&case)]).status.success());
    let cfg = dir.path().join("wild.toml");
    std::fs::write(
        &cfg,
        "preset = \"desk\"\nmax_restarts = 0\n[lr]\nintensity = 1e200\ncenter_start = 1e200\n\
         [[stages]]\nname = \"only\"\nresolution_factor = 2\niterations = 5\nbudget = 100\n",
    )
    .unwrap();
    let out = gsvr(&["reconstruct", p(&case.join("case.json")), "--config", p(&cfg), "--out-dir", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn simulate_is_deterministic_and_configurable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(gsvr(&["simulate", "--preset", "desk", "--seed", "7", "--out-dir", p(&a)]).status.success());
    assert!(gsvr(&["simulate", "--preset", "desk", "--seed", "7", "--out-dir", p(&b), "--threads", "1"]).status.success());
    for name in ["case.json", "stacks.gstk", "truth.gvol", "truth.ggau", "truth_transforms.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let protocol = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk_protocol.toml");
    let c = dir.path().join("c");
    assert!(gsvr(&["simulate", "--config", protocol, "--seed", "7", "--out-dir", p(&c)]).status.success());
    let text = std::fs::read_to_string(c.join("case.json")).unwrap();
    assert!(text.contains("\"case_id\": \"gaussian-mixture-seed7\""));
}

#[test]
fn simulate_reconstruct_evaluate_export_chain() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case");
    let run = dir.path().join("run");
    let quick = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quick.toml");
    assert!(gsvr(&["simulate", "--preset", "desk", "--seed", "3", "--out-dir", p(&case)]).status.success());
    let manifest = case.join("case.json");
    let out = gsvr(&["reconstruct", p(&manifest), "--config", quick, "--out-dir", p(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["recon.ggau", "recon.gvol", "transforms.json", "run_log.jsonl", "config.toml", "checkpoint.gadm"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let log = std::fs::read_to_string(run.join("run_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "config");
    assert_eq!(first["config"]["stages"][0]["iterations"], 20);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["kind"], "summary");

    let out = gsvr(&["evaluate", p(&manifest), "--recon", p(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["case_id"], "gaussian-mixture-seed3");
    for key in ["raw", "registered", "gauge_aligned"] {
        assert!(metrics[key]["psnr"].as_f64().unwrap() > 10.0, "{key}");
    }
    assert!(metrics["motion"]["rotation_deg"]["median"].is_number());

    let png = dir.path().join("png");
    assert!(gsvr(&["export-slices", p(&run.join("recon.ggau")), "--out-dir", p(&png), "--like", p(&case.join("truth.gvol"))]).status.success());
    assert!(gsvr(&["export-slices", p(&case.join("truth.gvol")), "--out-dir", p(&png), "--window", "0,1"]).status.success());
    for prefix in ["recon", "truth"] {
        for view in ["sagittal", "coronal", "axial"] {
            let bytes = std::fs::read(png.join(format!("{prefix}_{view}.pgm"))).unwrap();
            assert!(bytes.starts_with(b"P5\n64 64\n255\n"), "{prefix}_{view}");
            assert_eq!(bytes.len(), 13 + 64 * 64);
        }
    }

    // The stack file alone is also a valid input.
    let out = gsvr(&["reconstruct", p(&case.join("stacks.gstk")), "--config", quick, "--out-dir", p(&dir.path().join("bare"))]);
    assert!(out.status.success(), "{}", stderr(&out));
}
