mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{randn, rng};
use fetsim::cli::{sha256_file, EXIT_BUDGET, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, SEED_ENV};
use fetsim::linkage::{read_party_csv, LinkFile};

fn fetsim(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fetsim"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove(SEED_ENV);
    if let Some(s) = env_seed {
        cmd.env(SEED_ENV, s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 160-row table with 10 features whose label depends on columns 0 and 9.
fn write_table(dir: &Path) -> PathBuf {
    let (n, d) = (160, 10);
    let x = randn(&[n, d], &mut rng(1));
    let mut text = String::from("label");
    for j in 0..d {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for r in 0..n {
        let row = x.row(r);
        text.push_str(&format!("{}", u8::from(row[0] + row[9] > 0.0)));
        for v in row {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    let path = dir.join("table.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn write_config(dir: &Path, table: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "[data]\nraw = \"{}\"\n\n[linkage]\nparties = 3\nkey_dims = 2\n\n\
         [model]\nhidden_size = 8\nnum_heads = 2\nnum_blocks = 1\nffn_size = 16\nnum_neighbors = 3\n\
         num_parties = 2\nkey_dims = 2\nmask_hidden = 8\n\n[train]\nepochs = 2\nbatch_size = 32\n{extra}",
        table.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synthesize_splits_columns_four_three_three() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let out = dir.path().join("parties");
    let o = fetsim(&["synthesize", "--input", s(&table), "-k", "3", "--key-dims", "2", "--out", s(&out)], None);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let widths: Vec<usize> = (0..3)
        .map(|i| read_party_csv(&out.join(format!("party_{i}.csv"))).unwrap().num_features())
        .collect();
    assert_eq!(widths, [4, 3, 3]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["inputs"][0]["sha256"], sha256_file(&table).unwrap());
}

#[test]
fn reduced_primary_keeps_only_components() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let out = dir.path().join("parties");
    let o = fetsim(
        &["synthesize", "--input", s(&table), "-k", "3", "--key-dims", "2", "--reduce-primary", "--out", s(&out)],
        None,
    );
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let p = read_party_csv(&out.join("party_0.csv")).unwrap();
    assert_eq!(p.feature_names, ["pc_0", "pc_1"]);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let run = |name: &str, args: &[&str], env: Option<&str>| {
        let out = dir.path().join(name);
        let mut a = vec!["synthesize", "--input", s(&table), "--key-dims", "2"];
        a.extend_from_slice(args);
        a.extend_from_slice(&["--out", s(&out)]);
        let o = fetsim(&a, env);
        assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
        std::fs::read(out.join("party_1.csv")).unwrap()
    };
    let flag = run("flag", &["--seed", "5"], None);
    let env = run("env", &[], Some("5"));
    let both = run("both", &["--seed", "5"], Some("6"));
    let other = run("other", &[], Some("6"));
    assert_eq!(flag, env);
    assert_eq!(flag, both);
    assert_ne!(flag, other);
    let o = fetsim(&["synthesize", "--input", s(&table), "--out", s(&dir.path().join("x"))], Some("abc"));
    assert_eq!(code(&o), EXIT_VALIDATION);
}

#[test]
fn missing_label_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nolabel.csv");
    std::fs::write(&path, "a,b,c\n1,2,3\n4,5,6\n").unwrap();
    let o = fetsim(&["synthesize", "--input", s(&path), "--out", s(&dir.path().join("o"))], None);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("label"), "{}", stderr(&o));
}

#[test]
fn link_writes_a_readable_index() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let parties = dir.path().join("parties");
    let o = fetsim(&["synthesize", "--input", s(&table), "-k", "3", "--key-dims", "2", "--out", s(&parties)], None);
    assert_eq!(code(&o), EXIT_OK);
    let files: Vec<PathBuf> = (0..3).map(|i| parties.join(format!("party_{i}.csv"))).collect();
    let out = dir.path().join("links");
    let mut args = vec!["link", "-K", "4", "--subsample", "0.5", "--epoch", "2", "--out", s(&out), "--parties"];
    args.extend(files.iter().map(|p| s(p)));
    let o = fetsim(&args, None);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let lf = LinkFile::read(&out.join("links_epoch2.bin")).unwrap();
    assert_eq!((lf.k, lf.epoch, lf.links.len(), lf.primary_rows.len()), (4, 2, 2, 160));
    assert!(lf.links.iter().all(|l| l.idx.iter().all(|&i| i < 160)));
}

#[test]
fn train_replays_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let cfg = write_config(dir.path(), &table, "");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = fetsim(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out)], None);
        assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
        out
    };
    let a = run("a");
    let b = run("b");
    for f in ["metrics.jsonl", "checkpoint.json", "summary.csv"] {
        assert_eq!(sha256_file(&a.join(f)).unwrap(), sha256_file(&b.join(f)).unwrap(), "{f}");
    }
    let lines = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    // Evaluate the checkpoint on freshly synthesized party files.
    let parties = dir.path().join("parties");
    let o = fetsim(
        &["synthesize", "--input", s(&table), "-k", "3", "--key-dims", "2", "--seed", "3", "--out", s(&parties)],
        None,
    );
    assert_eq!(code(&o), EXIT_OK);
    let ev = dir.path().join("eval");
    let ck = a.join("checkpoint.json");
    let mut args = vec!["evaluate", "--checkpoint", s(&ck), "--out", s(&ev), "--parties"];
    let files: Vec<PathBuf> = (0..3).map(|i| parties.join(format!("party_{i}.csv"))).collect();
    args.extend(files.iter().map(|p| s(p)));
    let o = fetsim(&args, None);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let rec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(rec["metric"], "accuracy");
    assert_eq!(rec["rows"], 160);
    let v = rec["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn single_party_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let cfg = write_config(dir.path(), &table, "");
    let o = fetsim(&["train", "--config", s(&cfg), "--parties", "1", "--out", s(&dir.path().join("o"))], None);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("linkage.parties"), "{}", stderr(&o));
}

#[test]
fn baselines_train_from_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let cfg = write_config(dir.path(), &table, "solo_hidden = [8]\ntop1sim_hidden = [8]\n");
    for model in ["solo", "top1sim"] {
        let out = dir.path().join(model);
        let o = fetsim(&["train", "--config", s(&cfg), "--model", model, "--out", s(&out)], None);
        assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
        let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
        assert!(summary.lines().nth(1).unwrap().starts_with(model));
    }
}

#[test]
fn budget_cap_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let cfg = write_config(dir.path(), &table, "");
    let out = dir.path().join("o");
    let o = fetsim(&["train", "--config", s(&cfg), "--sigma", "0.7", "--eps-cap", "0.3", "--out", s(&out)], None);
    assert_eq!(code(&o), EXIT_BUDGET, "{}", stderr(&o));
    assert!(stderr(&o).contains("budget"));
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let cfg = write_config(dir.path(), &table, "lr = 1e200\noptimizer = \"sgd\"\n");
    let o = fetsim(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], None);
    assert_eq!(code(&o), EXIT_NUMERIC, "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let cfg = write_config(dir.path(), &table, "learning_rate = 0.1\n");
    let o = fetsim(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], None);
    assert_eq!(code(&o), EXIT_VALIDATION);
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));
}

#[test]
fn accountant_writes_one_row_per_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("acc");
    let o = fetsim(
        &["accountant", "--sigmas", "0.5,1,2,4", "--q", "0.01", "--steps", "1000", "-k", "5", "--out", s(&out)],
        None,
    );
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("epsilon_curve.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["sigma", "epsilon_with_mpc", "epsilon_no_mpc"]
    );
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]));
    assert!(rows.iter().all(|r| r[1] <= r[2]));
    let o = fetsim(&["accountant", "--sigmas", "0,1", "--out", s(&out)], None);
    assert_eq!(code(&o), EXIT_VALIDATION);
}

#[test]
fn ablation_writes_a_row_per_grid_value() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_table(dir.path());
    let cfg = write_config(dir.path(), &table, "");
    let out = dir.path().join("abl");
    let o = fetsim(
        &["ablate", "--suite", "neighbors_K", "--grid", "1,3", "--seeds", "2", "--config", s(&cfg), "--out", s(&out)],
        None,
    );
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("ablation_neighbors_K.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let o = fetsim(&["ablate", "--suite", "bogus", "--grid", "1", "--config", s(&cfg), "--out", s(&out)], None);
    assert_eq!(code(&o), EXIT_VALIDATION);
}
