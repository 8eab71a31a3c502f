use std::path::{Path, PathBuf};
use std::process::Command;

use normfim::experiments::{load_and_verify, ExperimentConfig, RunOutput};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn normfim(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_normfim")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn shipped_configs_parse() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn predict_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("predict_relu.json");
    let (code, stdout, stderr) = normfim(&[
        "predict",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("bn_middle_bound"), "{stdout}");
    let (_, out) = load_and_verify(dir.path()).unwrap();
    assert!(matches!(out, RunOutput::Predictions(ref v) if v.len() == 5));
}

#[test]
fn small_fig1_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"kind": "fig1_sharpness",
            "net": {"depth": 3, "alpha": [1.0, 1.0], "outputs": 1, "sigma_w2": 2.0,
                    "sigma_b2": 0.0, "activations": ["relu", "relu"]},
            "widths": [16, 32], "ensembles": 2}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = |threads: &str, out: &Path| {
        normfim(&[
            "fig1",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "4",
            "--threads",
            threads,
        ])
    };
    let (code, _, stderr) = run("1", &out);
    assert_eq!(code, 0, "{stderr}");
    for f in ["metadata.json", "result.json", "fig1.csv", "fig1_members.csv", "fig1.gp"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let (meta, _) = load_and_verify(&out).unwrap();
    assert_eq!(meta.master_seed, 4);
    let out2 = dir.path().join("out2");
    let (code, _, _) = run("3", &out2);
    assert_eq!(code, 0);
    for f in ["metadata.json", "result.json", "fig1.csv"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(out2.join(f)).unwrap());
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"kind": "predict_only", "net": {}, "colour": 3}"#).unwrap();
    let (code, _, stderr) = normfim(&["predict", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 2, "{stderr}");

    let cfg = configs_dir().join("predict_relu.json");
    let (code, _, _) = normfim(&["fig1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "kind mismatch is a config error");

    let one = dir.path().join("one.json");
    std::fs::write(
        &one,
        r#"{"kind": "fig1_sharpness",
            "net": {"depth": 3, "alpha": [1.0, 1.0], "outputs": 2, "sigma_w2": 2.0,
                    "sigma_b2": 0.1, "activations": ["relu", "relu"]},
            "modes": ["layernorm"], "widths": [8], "ensembles": 1}"#,
    )
    .unwrap();
    let (code, _, stderr) = normfim(&[
        "fig1",
        "--config",
        one.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{stderr}");
}
