use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neutral_residues::extension::{attach, ExtensionConfig};
use neutral_residues::report::read_metrics;
use neutral_residues::training::checkpoint::{load_checkpoint, save_extended, LoadedModel};
use neutral_residues::{BackboneModel, ExtendedModel};
use serde_json::{json, Value};

const TINY: &str = r#"{
  "model": {"n_layers": 1, "model_dim": 16, "n_heads": 2, "ffn_latent": 24, "max_seq_len": 16},
  "pretrain": {"total_steps": 6, "warmup_steps": 2, "batch_size": 2, "seq_len": 16, "eval_interval": 3, "eval_windows": 4},
  "train": {"total_steps": 4, "warmup_steps": 1, "batch_size": 2, "seq_len": 16, "eval_interval": 2, "eval_windows": 4},
  "data": {"tokens_per_language": 4000}
}"#;

fn nres() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nres"));
    cmd.env_remove("NRES_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("nres starts")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), stderr(out));
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.json")
    }

    fn train_backbone(&self, out: &str) -> PathBuf {
        let out = self.path(out);
        assert_ok(&run(nres()
            .arg("train-backbone")
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(&out)));
        out.join("model.ckpt")
    }

    fn extend(&self, backbone: &Path, out: &str, flags: &[&str]) -> Output {
        run(nres()
            .arg("extend")
            .arg("--config")
            .arg(self.config())
            .arg("--backbone")
            .arg(backbone)
            .arg("--out")
            .arg(self.path(out))
            .args(flags))
    }
}

fn written_extension(dir: &Path) -> ExtensionConfig {
    let text = std::fs::read_to_string(dir.join("config.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    serde_json::from_value(v["extension"].clone()).unwrap()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let ws = Workspace::new();
    let missing = ws.path("nope.json");
    let out = run(nres()
        .arg("train-backbone")
        .arg("--config")
        .arg(&missing)
        .arg("--out")
        .arg(ws.path("o")));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.json"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let ws = Workspace::new();
    let cfg = ws.path("bad.json");
    std::fs::write(&cfg, r#"{"model": {"n_layers": 1, "widht": 3}}"#).unwrap();
    let out = run(nres()
        .arg("train-backbone")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(ws.path("o")));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.widht"), "{}", stderr(&out));
}

#[test]
fn backbone_training_is_loadable_and_reproducible() {
    let ws = Workspace::new();
    let a = ws.train_backbone("a");
    let b = ws.train_backbone("b");
    let (model, step) = load_checkpoint::<f32>(&a).unwrap();
    assert!(matches!(model, LoadedModel::Backbone(_)));
    assert_eq!(step, 6);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let metrics = read_metrics(&ws.path("a").join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.iter().map(|r| r.step).collect::<Vec<_>>(), [3, 6]);
}

#[test]
fn seed_env_var_matches_seed_flag() {
    let ws = Workspace::new();
    let base = |out: &str| {
        let mut c = nres();
        c.arg("train-backbone")
            .arg("--config")
            .arg(ws.config())
            .arg("--out")
            .arg(ws.path(out))
            .arg("--steps")
            .arg("2");
        c
    };
    assert_ok(&run(base("flag").arg("--seed").arg("9")));
    assert_ok(&run(base("env").env("NRES_SEED", "9")));
    assert_ok(&run(&mut base("default")));
    let read = |d: &str| std::fs::read(ws.path(d).join("model.ckpt")).unwrap();
    assert_eq!(read("flag"), read("env"));
    assert_ne!(read("flag"), read("default"));
}

#[test]
fn extend_flags_reach_the_presets() {
    let ws = Workspace::new();
    let backbone = ws.train_backbone("bb");

    let out = ws.extend(
        &backbone,
        "nr",
        &[
            "--method", "adapter", "--gate", "relu", "--l1", "--alpha", "0.01", "--p", "0.1",
        ],
    );
    assert_ok(&out);
    assert_eq!(written_extension(&ws.path("nr")), ExtensionConfig::neutral_residues());

    let out = ws.extend(
        &backbone,
        "vanilla",
        &["--method", "adapter", "--gate", "none", "--init", "he"],
    );
    assert_ok(&out);
    assert_eq!(
        written_extension(&ws.path("vanilla")),
        ExtensionConfig::vanilla_adapter()
    );

    let (model, _) = load_checkpoint::<f32>(&ws.path("nr").join("model.ckpt")).unwrap();
    assert_eq!(model.extension(), Some(&ExtensionConfig::neutral_residues()));
    assert!(ws.path("nr").join("spectra.csv").exists());
    let metrics = read_metrics(&ws.path("nr").join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 2);
}

#[test]
fn contradictory_extend_flags_are_usage_errors() {
    let ws = Workspace::new();
    let backbone = ws.train_backbone("bb");
    for flags in [
        &["--method", "adapter", "--alpha", "-1"][..],
        &["--method", "adapter", "--gate", "relu", "--ce"][..],
        &["--method", "lora", "--gate", "relu"][..],
        &["--method", "adapter", "--budget", "0"][..],
    ] {
        let out = ws.extend(&backbone, "x", flags);
        assert_eq!(out.status.code(), Some(2), "{flags:?}: {}", stderr(&out));
    }
    let out = ws.extend(&backbone, "x", &["--method", "dropout"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_fails() {
    let ws = Workspace::new();
    let out = run(nres().arg("eval").arg("--model").arg(ws.path("absent.ckpt")));
    assert_ne!(out.status.code(), Some(0));
    let out = ws.extend(&ws.path("absent.ckpt"), "x", &[]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("absent.ckpt"));
}

#[test]
fn eval_reports_both_domains() {
    let ws = Workspace::new();
    let backbone = ws.train_backbone("bb");
    let out = run(nres()
        .arg("eval")
        .arg("--config")
        .arg(ws.config())
        .arg("--model")
        .arg(&backbone));
    assert_ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["step"], json!(6));
    let pre = read_metrics(&ws.path("bb").join("metrics.jsonl")).unwrap();
    assert_eq!(report["nll_old"].as_f64().unwrap(), pre.last().unwrap().nll_old);
}

#[test]
fn spectra_flags_zero_adapter_matrices() {
    let ws = Workspace::new();
    let backbone_path = ws.train_backbone("bb");
    let LoadedModel::Backbone(backbone) = load_checkpoint::<f32>(&backbone_path).unwrap().0 else {
        panic!("expected a backbone");
    };
    let backbone: BackboneModel = backbone;
    let mut model: ExtendedModel = attach(&backbone, &ExtensionConfig::neutral_residues(), 0).unwrap();
    let ids: Vec<_> = model.adapters().map(|(_, a)| a.a_g).collect();
    for id in ids {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    let ckpt = ws.path("zero.ckpt");
    save_extended(&model, 0, &ckpt).unwrap();
    let out = run(nres()
        .arg("spectra")
        .arg("--model")
        .arg(&ckpt)
        .arg("--out")
        .arg(ws.path("s")));
    assert_ok(&out);
    let csv = std::fs::read_to_string(ws.path("s").join("spectra.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("owner,layer,index,value,zero_matrix"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().any(|r| r[0] == "adapter"));
    for r in &rows {
        assert_eq!(r[4] == "true", r[0] == "adapter", "{r:?}");
    }
}

#[test]
fn one_point_sweep_equals_a_single_extension() {
    let ws = Workspace::new();
    let backbone = ws.train_backbone("bb");
    let grid = ws.path("grid.json");
    std::fs::write(&grid, r#"{"method": ["neutral_residues"], "lr": [0.001]}"#).unwrap();
    let out = run(nres()
        .arg("sweep")
        .arg("--config")
        .arg(ws.config())
        .arg("--backbone")
        .arg(&backbone)
        .arg("--grid")
        .arg(&grid)
        .arg("--out")
        .arg(ws.path("sweep")));
    assert_ok(&out);
    assert_ok(&ws.extend(
        &backbone,
        "single",
        &["--method", "adapter", "--gate", "relu", "--l1", "--lr", "0.001"],
    ));
    let swept = std::fs::read(ws.path("sweep/run-000/metrics.jsonl")).unwrap();
    let single = std::fs::read(ws.path("single/metrics.jsonl")).unwrap();
    assert_eq!(swept, single);
    let table = std::fs::read_to_string(ws.path("sweep/tradeoff.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn sweep_grid_rows_are_the_cross_product() {
    let ws = Workspace::new();
    let backbone = ws.train_backbone("bb");
    let grid = ws.path("grid.json");
    std::fs::write(
        &grid,
        r#"{"method": ["lora", "vanilla_adapter"], "lr": [1e-4, 3e-4, 1e-3, 3e-3]}"#,
    )
    .unwrap();
    let out = run(nres()
        .arg("sweep")
        .arg("--config")
        .arg(ws.config())
        .arg("--backbone")
        .arg(&backbone)
        .arg("--grid")
        .arg(&grid)
        .arg("--steps")
        .arg("2")
        .arg("--jobs")
        .arg("2")
        .arg("--out")
        .arg(ws.path("sweep")));
    assert_ok(&out);
    let table = std::fs::read_to_string(ws.path("sweep/tradeoff.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    let methods: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert!(methods.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn malformed_grid_is_a_usage_error() {
    let ws = Workspace::new();
    let backbone = ws.train_backbone("bb");
    let grid = ws.path("grid.json");
    std::fs::write(&grid, r#"{"lrs": [0.1]}"#).unwrap();
    let out = run(nres()
        .arg("sweep")
        .arg("--backbone")
        .arg(&backbone)
        .arg("--grid")
        .arg(&grid)
        .arg("--out")
        .arg(ws.path("sweep")));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lrs"), "{}", stderr(&out));
}

#[test]
fn zero_steps_write_an_untrained_checkpoint() {
    let ws = Workspace::new();
    let out = run(nres()
        .arg("train-backbone")
        .arg("--config")
        .arg(ws.config())
        .arg("--steps")
        .arg("0")
        .arg("--out")
        .arg(ws.path("zero")));
    assert_ok(&out);
    let (_, step) = load_checkpoint::<f32>(&ws.path("zero").join("model.ckpt")).unwrap();
    assert_eq!(step, 0);
    assert!(read_metrics(&ws.path("zero").join("metrics.jsonl")).unwrap().is_empty());
}
