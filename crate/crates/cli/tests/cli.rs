use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aqpl_cli::experiment::{Summary, CURVES_HEADER};
use aqpl_core::dataset::load_state;
use tempfile::TempDir;

const SMALL: &str = r#"
[dataset]
n = 200
test_n = 300
dim = 5
spread = 1.0
margin_max = 2.0

[train]
pretrain_epochs = 3
epochs_per_round = 1
batch_queries = 5
rounds = 1

[experiment]
severities = [0.1, 0.23, 0.4]
"#;

fn aqpl(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aqpl"));
    cmd.args(args).env_remove("AQPL_OUTPUT_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn one_round_gives_two_metric_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let o = aqpl(&["run", s(&cfg), "--output-dir", s(&out)], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = out.join("metrics_aqpl_seed0.csv");
    let header = fs::read_to_string(&metrics).unwrap();
    assert!(header.starts_with(
        "round,queries,clean_acc,corrupted_acc_mean,corrupted_acc@0.1,corrupted_acc@0.23,corrupted_acc@0.4,mean_sigma\n"
    ));
    let rows = csv_rows(&metrics);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0].as_str(), rows[0][1].as_str()), ("0", "0"));
    assert_eq!((rows[1][0].as_str(), rows[1][1].as_str()), ("1", "10"));
    assert_eq!(csv_rows(&out.join("queries_aqpl_seed0.csv")).len(), 10);

    let cp = load_state(&out.join("checkpoint_aqpl_seed0.json")).unwrap();
    assert_eq!(cp.round, 1);
    assert_eq!(cp.query_log.len(), 10);
    assert_eq!(cp.triplets.iter().filter(|t| t.annotated).count(), 10);
}

#[test]
fn strategies_times_seeds_files_and_summary_agree() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let o = aqpl(
        &["run", s(&cfg), "--output-dir", s(&out), "--seeds", "3,4", "--strategies", "aqpl,random"],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metric_files: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("metrics_"))
        .collect();
    assert_eq!(metric_files.len(), 4);

    let summary: Summary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.strategies.len(), 2);
    for st in &summary.strategies {
        assert_eq!(st.seeds, vec![3, 4]);
        let mut finals = Vec::new();
        for p in &st.per_seed {
            let rows = csv_rows(&out.join(format!("metrics_{}_seed{}.csv", st.strategy, p.seed)));
            let last = rows.last().unwrap();
            let corrupted: f64 = last[3].parse().unwrap();
            assert_eq!(corrupted, p.corrupted_accuracy_mean);
            assert_eq!(last[2].parse::<f64>().unwrap(), p.clean_accuracy);
            finals.push(corrupted);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        assert!((mean - st.corrupted_accuracy_mean.mean).abs() < 1e-15);
    }
}

#[test]
fn missing_dataset_path_exits_2_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("idx.toml");
    fs::write(
        &cfg,
        r#"
[dataset]
kind = "idx"
train_images = "nope/train-images"
train_labels = "nope/train-labels"
test_images = "nope/test-images"
test_labels = "nope/test-labels"
[oracle]
kind = "reference-model"
"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = aqpl(&["run", s(&cfg), "--output-dir", s(&out)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-images"));
    assert!(!out.exists());

    let o = aqpl(&["run", s(&tmp.path().join("absent.toml"))], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = aqpl(&["run"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_dir_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SMALL.replace("[experiment]", "[experiment]\noutput_dir = \"from-file\"")).unwrap();
    let env_dir = tmp.path().join("from-env");
    let o = aqpl(&["run", s(&cfg)], &[("AQPL_OUTPUT_DIR", &env_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env_dir.join("summary.json").is_file());
    assert!(!tmp.path().join("from-file").exists());

    // The command line wins over the environment.
    let flag_dir = tmp.path().join("from-flag");
    let o = aqpl(&["run", s(&cfg), "--output-dir", s(&flag_dir)], &[("AQPL_OUTPUT_DIR", &env_dir)]);
    assert!(o.status.success());
    assert!(flag_dir.join("summary.json").is_file());
}

#[test]
fn compare_writes_paired_curves() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("cmp");
    let o = aqpl(&["compare", s(&cfg), "--output-dir", s(&out), "--seeds", "0,1", "--rounds", "2"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CURVES_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * 3);
    let names: Vec<&str> = rows.iter().step_by(3).map(|r| r[0]).collect();
    assert_eq!(names, ["aqpl", "random", "clean-uncertainty", "noise-uncertainty"]);
    // Every strategy starts from the same pretrained models.
    let starts: Vec<&str> = rows.iter().filter(|r| r[1] == "0").map(|r| r[3]).collect();
    assert!(starts.windows(2).all(|w| w[0] == w[1]), "{starts:?}");
    for r in &rows {
        let std: f64 = r[4].parse().unwrap();
        assert!(std >= 0.0);
    }
    let metric_files = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("metrics_"))
        .count();
    assert_eq!(metric_files, 8);

    let again = tmp.path().join("cmp2");
    let o = aqpl(&["compare", s(&cfg), "--output-dir", s(&again), "--seeds", "0,1", "--rounds", "2"], &[]);
    assert!(o.status.success());
    assert_eq!(text, fs::read_to_string(again.join("curves.csv")).unwrap());
}

#[test]
fn theory_suite_output() {
    let o = aqpl(&["theory"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")), "{text}");

    let o = aqpl(&["theory", "--sigma-grid", "0.1:2.0:0.1", "--misaligned"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("sigma grid 0.1:2:0.1 (20 levels)"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("REPORT misaligned")), "{text}");

    let o = aqpl(&["theory", "--sigma-grid", "3:1:0.1"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn human_oracle_times_out_into_flagged_simulation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("human");
    let o = aqpl(
        &[
            "serve",
            s(&cfg),
            "--output-dir",
            s(&out),
            "--serve-addr",
            "127.0.0.1:0",
            "--oracle-timeout-secs",
            "0",
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("annotation service on http://127.0.0.1:"));
    let rows = csv_rows(&out.join("queries_aqpl_seed0.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[7] == "simulated-fallback"), "{rows:?}");
}

fn write_idx(dir: &Path, stem: &str, count: usize, seed: u32) {
    let (rows, cols) = (6u32, 6u32);
    let mut images = vec![0, 0, 8, 3];
    for v in [count as u32, rows, cols] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(count as u32).to_be_bytes());
    let mut state = seed;
    for i in 0..count {
        let class = i % 10;
        labels.push(class as u8);
        for p in 0..(rows * cols) as usize {
            state = state.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            let jitter = (state >> 16) as u8 % 40;
            // Each digit lights its own three pixels.
            let lit = p / 3 == class;
            images.push(if lit { 215 + jitter } else { jitter });
        }
    }
    fs::write(dir.join(format!("{stem}-images.idx")), images).unwrap();
    fs::write(dir.join(format!("{stem}-labels.idx")), labels).unwrap();
}

#[test]
fn image_dataset_runs_with_reference_oracle() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    write_idx(&data, "train", 80, 1);
    write_idx(&data, "test", 40, 2);
    let cfg = tmp.path().join("idx.toml");
    fs::write(
        &cfg,
        r#"
[dataset]
kind = "idx"
train_images = "data/train-images.idx"
train_labels = "data/train-labels.idx"
test_images = "data/test-images.idx"
test_labels = "data/test-labels.idx"

[model]
arch = "mlp"
hidden = 8

[train]
pretrain_epochs = 2
epochs_per_round = 1
batch_queries = 3
rounds = 2
samples = 10

[oracle]
samples = 1000
reference_epochs = 5
reference_hidden = 8
"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = aqpl(&["run", s(&cfg), "--output-dir", s(&out)], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("metrics_aqpl_seed0.csv"));
    assert_eq!(rows.len(), 3);
    let queries = csv_rows(&out.join("queries_aqpl_seed0.csv"));
    assert_eq!(queries.len(), 12);
    let ladder_ok = |v: &str| {
        let x: f64 = v.parse().unwrap();
        (0.0..=0.9).contains(&x) && (x * 100.0 - (x * 100.0).round()).abs() < 1e-9
    };
    assert!(queries.iter().all(|r| ladder_ok(&r[6])), "{queries:?}");

    let weak = fs::read_to_string(&cfg).unwrap().replace("samples = 1000", "samples = 10");
    fs::write(&cfg, weak).unwrap();
    let o = aqpl(&["run", s(&cfg), "--output-dir", s(&tmp.path().join("weak"))], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(rows[2][1], "12");
    // Image checkpoints leave features out; loading needs the source data.
    let cp = load_state(&out.join("checkpoint_aqpl_seed0.json")).unwrap();
    assert!(cp.triplets.iter().all(|t| t.x.is_none()));
    assert!(cp.image_shape.is_some());
    assert!(cp.triplets(None).is_err());
}
