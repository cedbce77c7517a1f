use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use fedprompt_cli::{main_with, RunManifest, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use fedprompt_core::corpus::DatasetManifest;
use fedprompt_core::metrics::{load_history, load_summary};
use fedprompt_core::partitioner::load_heatmap;

const TINY: &str = r#"
max_rounds = 3
patience = 3
seeds = [1, 2, 3]

[partition]
num_clients = 8
n_labeled = 16
xi = 8

[model]
d_model = 16
num_layers = 1
num_heads = 2
d_ffn = 32
max_seq_len = 24

[data.synth]
examples_per_class = 100

[data.corpus]
sentences = 200

[pretrain]
steps = 20

[grid]
n_labeled = [8, 16]
gamma = [0.001, 100.0]
mode = ["fedprompt", "fedcls"]
augmentation = [false]
"#;

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("fedprompt").chain(args.iter().copied()))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(run(&["run"]), EXIT_CONFIG);
    assert_eq!(run(&["run", "--config", s(&tmp.path().join("absent.toml"))]), EXIT_CONFIG);
    let bad = write_config(tmp.path(), "max_rounds = 3\nunknown_key = 1\n");
    assert_eq!(run(&["run", "--config", s(&bad)]), EXIT_CONFIG);
    let invalid = write_config(tmp.path(), "[partition]\nnum_clients = 4\nxi = 9\n");
    assert_eq!(run(&["run", "--config", s(&invalid), "--out", s(&tmp.path().join("o"))]), EXIT_CONFIG);
    assert_eq!(run(&["partition", "--dataset", s(&tmp.path().join("none.jsonl")), "--out", s(tmp.path())]), EXIT_CONFIG);
}

#[test]
fn unwritable_output_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data.jsonl");
    assert_eq!(run(&["synth", "--examples-per-class", "20", "--out", s(&data)]), EXIT_OK);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = blocker.join("model.ckpt");
    assert_eq!(run(&["pretrain", "--dataset", s(&data), "--steps", "2", "--out", s(&out)]), EXIT_RUNTIME);
}

#[test]
fn synth_then_partition_writes_consistent_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data.jsonl");
    assert_eq!(run(&["synth", "--examples-per-class", "250", "--seed", "4", "--out", s(&data)]), EXIT_OK);
    assert!(data.with_extension("manifest.json").is_file());

    for (gamma, dir) in [("100", "uniform"), ("0.001", "skewed")] {
        let out = tmp.path().join(dir);
        let code = run(&[
            "partition", "--dataset", s(&data), "--num-clients", "8", "--xi", "8", "--n-labeled", "32",
            "--gamma", gamma, "--seed", "3", "--out", s(&out),
        ]);
        assert_eq!(code, EXIT_OK);
        let matrix = load_heatmap(&out.join("heatmap.csv")).unwrap();
        assert_eq!(matrix.total(), 32);
        assert_eq!(matrix.counts.len(), 8);
        assert!(out.join("partition.json").is_file());
        if dir == "skewed" {
            let top = matrix.row_totals().into_iter().max().unwrap();
            assert!(top as f64 >= 0.9 * 32.0, "largest row {top}");
        }
    }
}

#[test]
fn partition_reads_labels_from_flag_or_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data.jsonl");
    assert_eq!(run(&["synth", "--examples-per-class", "30", "--out", s(&data)]), EXIT_OK);
    let manifest_path = data.with_extension("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let out = tmp.path().join("p");
    let base = ["partition", "--dataset", s(&data), "--num-clients", "4", "--xi", "2", "--n-labeled", "8", "--out", s(&out)];
    assert_eq!(run(&base), EXIT_OK);
    fs::remove_file(&manifest_path).unwrap();
    assert_eq!(run(&base), EXIT_CONFIG);
    let labels = manifest.label_names.join(",");
    let mut with_labels = base.to_vec();
    with_labels.extend(["--labels", &labels]);
    assert_eq!(run(&with_labels), EXIT_OK);
    let mut wrong = base.to_vec();
    wrong.extend(["--labels", "x,y"]);
    assert_eq!(run(&wrong), EXIT_CONFIG);
}

#[test]
fn run_writes_histories_summary_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    assert_eq!(run(&["run", "--config", s(&config), "--out", s(&out)]), EXIT_OK);
    for seed in 1..=3 {
        let rows = load_history(&out.join(format!("history_seed{seed}.csv"))).unwrap();
        assert_eq!(rows[0].1.round, 0);
        assert!(rows.iter().all(|(ctx, _)| ctx.seed == seed && ctx.n_labeled == 16));
    }
    let summary = load_summary(&out.join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0].seeds, 3);

    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let digest: String = Sha256::digest(TINY.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(manifest.config_digest, digest);
    assert_eq!(manifest.seeds, vec![1, 2, 3]);
    assert_eq!(manifest.tool_version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn run_is_byte_deterministic_and_honours_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let code = run(&["run", "--config", s(&config), "--out", s(&out), "--seeds", "5,6", "--max-rounds", "2", "--mode", "fedcls"]);
        assert_eq!(code, EXIT_OK);
        outputs.push(fs::read(out.join("history_seed5.csv")).unwrap());
        assert!(!out.join("history_seed1.csv").exists());
        let rows = load_history(&out.join("history_seed6.csv")).unwrap();
        assert!(rows.len() <= 3);
        assert!(rows.iter().all(|(_, r)| r.mode.to_string() == "fedcls"));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sweep_fills_grid_and_gain_then_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let out = tmp.path().join("sweep");
    assert_eq!(run(&["sweep", "--config", s(&config), "--out", s(&out), "--seeds", "1,2"]), EXIT_OK);
    let rows = load_summary(&out.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        let partner = rows
            .iter()
            .find(|o| o.n_labeled == r.n_labeled && o.gamma == r.gamma && o.augmentation == r.augmentation && o.mode != r.mode)
            .unwrap();
        let (p, c) = if r.mode.to_string() == "fedprompt" { (r, partner) } else { (partner, r) };
        assert!((r.gain.unwrap() - (p.mean - c.mean)).abs() < 2e-6);
    }
    let before = fs::read(out.join("summary.csv")).unwrap();

    let cell = out.join("n8_g0.001_fedcls_noaug");
    assert!(cell.join("manifest.json").is_file());
    let untouched = out.join("n16_g100_fedprompt_noaug/history_seed1.csv");
    let stamp = fs::metadata(&untouched).unwrap().modified().unwrap();
    fs::remove_dir_all(&cell).unwrap();
    assert_eq!(run(&["sweep", "--config", s(&config), "--out", s(&out), "--seeds", "1,2"]), EXIT_OK);
    assert!(cell.join("manifest.json").is_file());
    assert_eq!(fs::metadata(&untouched).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), before);
}

#[test]
fn pretrain_from_config_matches_run_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let ckpt = tmp.path().join("m.ckpt");
    assert_eq!(run(&["pretrain", "--config", s(&config), "--seed", "1", "--out", s(&ckpt)]), EXIT_OK);
    let with_ckpt = TINY.replace("steps = 20", &format!("steps = 20\ncheckpoint = {:?}", s(&ckpt)));
    let config2 = tmp.path().join("ckpt.toml");
    fs::write(&config2, with_ckpt).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(run(&["run", "--config", s(&config), "--out", s(&a), "--seeds", "1"]), EXIT_OK);
    assert_eq!(run(&["run", "--config", s(&config2), "--out", s(&b), "--seeds", "1"]), EXIT_OK);
    assert_eq!(fs::read(a.join("history_seed1.csv")).unwrap(), fs::read(b.join("history_seed1.csv")).unwrap());
}
