use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cra_core::arch::{build_toy, ArchDescriptor, Variant};
use cra_core::attention::AttentionTrace;
use cra_core::model::{InitOptions, Model};
use cra_core::Tensor;

fn cra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cra")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn analyze_cra_resnet50() {
    let o = cra(&["analyze", "--arch", "resnet50", "--variant", "cra", "--hw", "7,7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("CRA-ResNet-50 <7,7>, 26.31M, "));
}

#[test]
fn analyze_base_resnet50() {
    let o = cra(&["analyze", "--arch", "resnet50", "--variant", "base"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("ResNet-50, 25.56M, "));
}

#[test]
fn analyze_json_has_exact_counts() {
    let o = cra(&["analyze", "--arch", "resnet56", "--variant", "se", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v[0]["params_display"], "860.14K");
    assert!(v[0]["per_layer"].as_array().unwrap().len() > 100);
}

#[test]
fn cifar_net_at_imagenet_size_is_a_usage_error() {
    let o = cra(&["analyze", "--arch", "resnet56", "--input-size", "224"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported architecture"));
}

#[test]
fn hw_needs_cra_variant() {
    assert_eq!(cra(&["analyze", "--arch", "resnet50", "--hw", "7,7"]).status.code(), Some(2));
}

#[test]
fn ablation_default_targets() {
    let o = cra(&["ablation", "--arch", "resnet50"]);
    let out = stdout(&o);
    let params: Vec<_> = out.lines().map(|l| l.split(", ").nth(1).unwrap()).collect();
    assert_eq!(params, ["26.31M", "25.95M", "25.71M", "25.59M"]);
}

#[test]
fn ablation_single_target() {
    let o = cra(&["ablation", "--arch", "resnet50", "--targets", "3,3", "--format", "csv"]);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().nth(1).unwrap().contains(",25.71M,"));
}

#[test]
fn ablation_malformed_targets() {
    for bad in ["7,7;5", "0,0", "a,b", "7,7;;5,5"] {
        let o = cra(&["ablation", "--arch", "resnet50", "--targets", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn gradcheck_passes_on_both_toys() {
    for model in ["toy-cra", "toy-se"] {
        let o = cra(&["gradcheck", "--model", model, "--tol", "1e-3"]);
        assert_eq!(o.status.code(), Some(0), "{model}: {}", stdout(&o));
        assert!(stdout(&o).lines().last().unwrap().starts_with("PASS"));
    }
}

#[test]
fn gradcheck_failure_exits_one() {
    let o = cra(&["gradcheck", "--model", "toy-cra", "--tol", "1e-12"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_is_deterministic() {
    let a = cra(&["gradcheck", "--seed", "4", "--format", "json"]);
    let b = cra(&["gradcheck", "--seed", "4", "--format", "json"]);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(v["tensors"].as_array().unwrap().iter().any(|t| t["group"] == "gdconv_kernel"));
}

fn write_run(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let config = serde_json::json!({
        "model": {"arch": "toy", "variant": "cra", "width": 8, "input_size": 16, "target": [4, 4], "classes": 3},
        "data": {"synthetic": {"n": 48, "classes": 3, "seed": 5, "side": 16, "test_n": 12}},
        "out_dir": dir.join("run"),
        "lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 16, "epochs": epochs,
        "lr_milestones": [1, 2], "seed": 3
    });
    let path = dir.join("toy.json");
    fs::write(&path, config.to_string()).unwrap();
    path
}

#[test]
fn train_writes_history_with_decaying_lr() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_run(dir.path(), 3);
    let o = cra(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    let lrs: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(lrs.len(), 3);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(dir.path().join("run/last/trainer.json").exists());
}

#[test]
fn train_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = cra(&["train", "--config", write_run(a.path(), 2).to_str().unwrap()]);
    let ob = cra(&["train", "--config", write_run(b.path(), 2).to_str().unwrap()]);
    assert_eq!(oa.stdout, ob.stdout);
    for f in ["p0000.crat", "v0003.crat", "trainer.json"] {
        assert_eq!(fs::read(a.path().join("run/last").join(f)).unwrap(), fs::read(b.path().join("run/last").join(f)).unwrap(), "{f}");
    }
}

fn set(path: &Path, key: &str, value: serde_json::Value) {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v[key] = value;
    fs::write(path, v.to_string()).unwrap();
}

#[test]
fn train_resume_extends_run() {
    let straight = tempfile::tempdir().unwrap();
    cra(&["train", "--config", write_run(straight.path(), 3).to_str().unwrap()]);

    let dir = tempfile::tempdir().unwrap();
    cra(&["train", "--config", write_run(dir.path(), 1).to_str().unwrap()]);
    let path = write_run(dir.path(), 3);
    set(&path, "resume", true.into());
    let o = cra(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["history.csv", "last/p0000.crat", "last/v0003.crat", "last/trainer.json", "best/p0005.crat"] {
        assert_eq!(fs::read(straight.path().join("run").join(f)).unwrap(), fs::read(dir.path().join("run").join(f)).unwrap(), "{f}");
    }

    set(&path, "lr", 0.1.into());
    let o = cra(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("different configuration"));
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"model": {"arch": "toy", "variant": "cra"}}"#).unwrap();
    assert_eq!(cra(&["train", "--config", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cra(&["train", "--config", "/nonexistent/run.json"]).status.code(), Some(2));
}

fn zero_checkpoint(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let d = build_toy(Variant::Cra, 4, 8, 16, Some((4, 4))).unwrap();
    let model = Model::<f32>::materialize(&d, InitOptions { seed: 1, zero_attention: true }).unwrap();
    let ckpt = dir.join("ckpt");
    model.save(&ckpt).unwrap();
    let input = dir.join("x.crat");
    Tensor::<f32>::from_fn(vec![2, 3, 16, 16], |i| (i % 7) as f32 / 7.0).unwrap().save(&input).unwrap();
    (ckpt, input)
}

#[test]
fn attentions_of_zero_checkpoint_are_half() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, input) = zero_checkpoint(dir.path());
    let o = cra(&["attentions", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("site_key,channel_index,attention_value"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.starts_with("CRA.1.1,") && r.ends_with(",0.5")));
}

#[test]
fn attentions_json_is_keyed_by_site() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, input) = zero_checkpoint(dir.path());
    let o = cra(&["attentions", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--index", "1", "--out", "json"]);
    let trace = AttentionTrace::from_json(&stdout(&o)).unwrap();
    assert_eq!(trace.get("CRA.1.1").unwrap(), &[0.5; 8]);
    let o = cra(&["attentions", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap(), "--index", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn attentions_need_cra() {
    let dir = tempfile::tempdir().unwrap();
    let d = build_toy(Variant::Base, 4, 8, 16, None).unwrap();
    Model::<f32>::materialize(&d, InitOptions::default()).unwrap().save(dir.path().join("base")).unwrap();
    let (_, input) = zero_checkpoint(dir.path());
    let o = cra(&["attentions", "--checkpoint", dir.path().join("base").to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no CRA modules"));
}

#[test]
fn export_desc_round_trips() {
    let o = cra(&["export-desc", "--arch", "resnet110", "--variant", "cra", "--hw", "4,4", "--classes", "100"]);
    let d = ArchDescriptor::from_json(&stdout(&o)).unwrap();
    assert_eq!(d.num_classes, 100);
    assert_eq!(d.cra_sites().count(), 54);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    let o = cra(&["export-desc", "--arch", "resnet50", "--output", path.to_str().unwrap()]);
    assert!(o.stdout.is_empty());
    assert!(ArchDescriptor::from_json(&fs::read_to_string(path).unwrap()).is_ok());
}

#[test]
fn thread_count_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_cra")).env("CRA_NUM_THREADS", "0").args(["analyze", "--arch", "resnet56"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_cra")).env("CRA_NUM_THREADS", "2").args(["analyze", "--arch", "resnet56"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn one_subcommand_required() {
    assert_eq!(cra(&[]).status.code(), Some(2));
    assert_eq!(cra(&["analyze", "ablation"]).status.code(), Some(2));
}
