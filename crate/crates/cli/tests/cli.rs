use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clzsl_cli::train::{RunManifest, METRICS_FILE, RUN_MANIFEST_FILE, WEIGHTS_FILE};
use clzsl_core::{checkpoint, data, TrainConfig};

fn clzsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clzsl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = clzsl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "C_s=5", "--set", "C_u=2", "--set", "samples_per_class=10"];
const QUICK: [&str; 10] = [
    "--preset",
    "synthetic",
    "--set",
    "epochs=3",
    "--set",
    "batch_size=8",
    "--set",
    "k_neighbors=2",
    "--set",
    "update_start_epoch=2",
];

fn small_corpus(root: &Path) -> PathBuf {
    let dir = root.join("corpus");
    let mut args = vec!["synth", "--out", s(&dir)];
    args.extend(SMALL);
    ok(&args);
    dir
}

fn quick_train(corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--corpus", s(corpus), "--out", s(out)];
    args.extend(QUICK);
    args.extend(extra);
    clzsl(&args)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_a_loadable_corpus_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--out", s(&a), "--seed", "4"]);
    ok(&["synth", "--out", s(&b), "--seed", "4"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let (corpus, _) = data::load_corpus(&a).unwrap();
    assert_eq!(corpus.len(), 25 * 30);
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    ok(&["synth", "--out", s(&dir)]);
    let out = clzsl(&["synth", "--out", s(&dir), "--seed", "1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&["synth", "--out", s(&dir), "--seed", "1", "--force"]);
}

#[test]
fn malformed_synth_config_reports_line_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.json");
    fs::write(&cfg, "{\n  \"C_s\": 4,\n  \"C_u\": 2\n  \"K\": 8\n}").unwrap();
    let out = clzsl(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));

    fs::write(&cfg, "{\n  \"C_s\": 4,\n  \"regions\": 2\n}").unwrap();
    let out = clzsl(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("regions") && err.contains("line 3"), "{err}");
}

#[test]
fn train_writes_manifest_logs_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let run = tmp.path().join("run");
    assert!(quick_train(&corpus, &run, &[]).status.success());
    let m = RunManifest::read(&run.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(m.config.epochs, 3);
    assert_eq!(m.synth.as_ref().map(|c| c.samples_per_class), Some(10));
    assert_eq!(fs::read_to_string(run.join(METRICS_FILE)).unwrap().lines().count(), 3);
    for e in 1..=3 {
        assert!(run.join(format!("checkpoints/epoch-{e:04}/checkpoint.json")).exists());
    }
    let header = fs::read_to_string(run.join(WEIGHTS_FILE)).unwrap();
    assert_eq!(header.lines().next(), Some("epoch,batch,sample,class_id,loss,omega"));
    // 40 train_seen samples per epoch
    assert_eq!(header.lines().count(), 1 + 3 * 40);
}

#[test]
fn preset_resolution_is_echoed_into_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["synth", "--out", s(&corpus)]);
    let run = tmp.path().join("run");
    ok(&["train", "--corpus", s(&corpus), "--out", s(&run), "--preset", "cub-paper", "--epochs", "0"]);
    let c = RunManifest::read(&run.join(RUN_MANIFEST_FILE)).unwrap().config;
    assert_eq!(
        (c.temperature, c.decay, c.percentile, c.eta, c.k_neighbors, c.update_start_epoch),
        (10.0, 0.9, 0.8, 0.08, 10, 15)
    );
}

#[test]
fn baseline_flags_keep_prototypes_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let run = tmp.path().join("run");
    assert!(quick_train(&corpus, &run, &["--no-pcl", "--no-pup"]).status.success());
    let (state, config) = checkpoint::load(&run.join("checkpoints/epoch-0003")).unwrap();
    assert!(!config.use_pcl && !config.use_pup);
    let (_, space) = data::load_corpus(&corpus).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(state.store.current().data()), bits(space.prototypes().data()));

    let report = ok(&["inspect-weights", "--weights", s(&run.join(WEIGHTS_FILE)), "--top", "1", "--bottom", "1"]);
    let flagged = report.lines().filter(|l| l.ends_with("no differentiation")).count();
    assert_eq!(flagged, 3);
}

#[test]
fn missing_corpus_is_a_filesystem_error_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-corpus");
    let out = clzsl(&["train", "--corpus", s(&missing), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-corpus"));
}

#[test]
fn divergence_exits_with_numeric_failure_after_writing_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let run = tmp.path().join("run");
    let out = quick_train(&corpus, &run, &["--set", "lr_theta=1e300", "--set", "clip_norm=null"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss at epoch"));
    assert!(run.join(RUN_MANIFEST_FILE).exists());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&clzsl(&["frobnicate"])), 1);
    assert_eq!(code(&clzsl(&["train", "--out", "x"])), 1);
    assert_eq!(code(&clzsl(&["train", "--corpus", "c", "--out", "x", "--set", "nope"])), 1);
    assert_eq!(code(&clzsl(&["--help"])), 0);
}

#[test]
fn replay_reproduces_metrics_and_rejects_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(quick_train(&corpus, &a, &["--seed", "9"]).status.success());
    let manifest = a.join(RUN_MANIFEST_FILE);
    ok(&["train", "--replay", s(&manifest), "--out", s(&b)]);
    assert_eq!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
    assert_eq!(fs::read(a.join(WEIGHTS_FILE)).unwrap(), fs::read(b.join(WEIGHTS_FILE)).unwrap());
    assert_eq!(fs::read(&manifest).unwrap(), fs::read(b.join(RUN_MANIFEST_FILE)).unwrap());
    let out = clzsl(&["train", "--replay", s(&manifest), "--out", s(&b), "--force", "--seed", "1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_emits_both_modes_and_checks_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let run = tmp.path().join("run");
    assert!(quick_train(&corpus, &run, &[]).status.success());
    let ckpt = run.join("checkpoints/epoch-0003");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--both"]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["mode"], "czsl");
    assert_eq!(lines[1]["mode"], "gzsl");
    // eval agrees with the last logged epoch
    let last: serde_json::Value =
        serde_json::from_str(fs::read_to_string(run.join(METRICS_FILE)).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(lines[1]["harmonic"], last["metrics"]["harmonic"]);
    assert_eq!(lines[0]["acc"], last["metrics"]["acc_czsl"]);

    let blob = ckpt.join(checkpoint::TENSORS_FILE);
    let mut bytes = fs::read(&blob).unwrap();
    bytes[8] ^= 0x10;
    fs::write(&blob, bytes).unwrap();
    let out = clzsl(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn noiseless_corpus_evaluates_near_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("clean");
    ok(&[
        "synth",
        "--out",
        s(&corpus),
        "--set",
        "instance_dropout_rate=0",
        "--set",
        "prototype_noise_sigma=0",
        "--set",
        "feature_noise_sigma=0",
    ]);
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&run),
        "--preset",
        "synthetic",
        "--checkpoint-every",
        "0",
        "--no-weight-log",
    ]);
    let out = ok(&["eval", "--checkpoint", s(&run.join("checkpoints/epoch-0030")), "--corpus", s(&corpus), "--both"]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["acc"].as_f64(), Some(100.0));
    let h = lines[1]["harmonic"].as_f64().unwrap();
    assert!(h >= 90.0, "H {h}");
}

fn write_grid(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("grid.json");
    fs::write(&p, text).unwrap();
    p
}

fn sweep(corpus: &Path, grid: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["sweep", "--corpus", s(corpus), "--grid", s(grid)];
    args.extend(QUICK);
    args.extend(["--set", "epochs=2"]);
    args.extend(extra);
    clzsl(&args)
}

#[test]
fn sweep_rows_follow_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let grid = write_grid(tmp.path(), r#"{"temperature": [1, 10, 30]}"#);
    let out = sweep(&corpus, &grid, &["--seed", "5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        rd.headers().unwrap().iter().collect::<Vec<_>>(),
        ["index", "params", "seed", "acc_czsl", "acc_unseen", "acc_seen", "harmonic"]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[2][1], r#"{"temperature":30}"#);
    assert_eq!(rows.iter().map(|r| r[2].to_string()).collect::<Vec<_>>(), ["5", "6", "7"]);

    let parallel = tmp.path().join("p.csv");
    assert!(sweep(&corpus, &grid, &["--seed", "5", "--jobs", "3", "--out", s(&parallel)]).status.success());
    assert_eq!(fs::read_to_string(parallel).unwrap(), text);
}

#[test]
fn empty_grid_gives_header_only_and_unknown_fields_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let out = sweep(&corpus, &write_grid(tmp.path(), "{}"), &[]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "index,params,seed,acc_czsl,acc_unseen,acc_seen,harmonic\n"
    );
    let out = sweep(&corpus, &write_grid(tmp.path(), r#"{"beta": [0.9], "tau": [1]}"#), &[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
}

#[test]
fn sweep_over_beta_mirrors_the_prototype_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let grid = write_grid(tmp.path(), r#"{"beta": [0.8, 0.9, 0.995]}"#);
    let out = sweep(&corpus, &grid, &[]);
    let text = String::from_utf8(out.stdout).unwrap();
    let betas: Vec<f64> = csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| serde_json::from_str::<serde_json::Value>(&r.unwrap()[1]).unwrap()["beta"].as_f64().unwrap())
        .collect();
    assert_eq!(betas, [0.8, 0.9, 0.995]);
}

#[test]
fn inspect_ranking_matches_an_independent_sort() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let run = tmp.path().join("run");
    assert!(quick_train(&corpus, &run, &[]).status.success());
    let weights = run.join(WEIGHTS_FILE);
    let report = ok(&["inspect-weights", "--weights", s(&weights), "--top", "3", "--bottom", "3"]);

    // oracle: parse the CSV by hand, scale ω by batch size, sort
    let text = fs::read_to_string(&weights).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut sizes: HashMap<(&str, &str), usize> = HashMap::new();
    for r in &rows {
        *sizes.entry((r[0], r[1])).or_default() += 1;
    }
    for epoch in ["1", "2", "3"] {
        let mut scored: Vec<(f64, usize, usize)> = rows
            .iter()
            .filter(|r| r[0] == epoch)
            .map(|r| {
                let w: f64 = r[5].parse().unwrap();
                (w * sizes[&(r[0], r[1])] as f64, r[1].parse().unwrap(), r[2].parse().unwrap())
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let top: Vec<usize> = scored.iter().take(3).map(|t| t.2).collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let bottom: Vec<usize> = scored.iter().take(3).map(|t| t.2).collect();

        let section: Vec<&str> = report
            .lines()
            .skip_while(|l| !l.starts_with(&format!("epoch {epoch} ")))
            .skip(1)
            .take_while(|l| l.starts_with("  "))
            .collect();
        assert_eq!(section.len(), 6);
        let sample = |l: &&str| -> usize {
            let f: Vec<&str> = l.split_whitespace().collect();
            f[3].parse().unwrap()
        };
        let got_top: Vec<usize> = section.iter().filter(|l| l.trim_start().starts_with("top")).map(sample).collect();
        let got_bottom: Vec<usize> = section.iter().filter(|l| l.trim_start().starts_with("bottom")).map(sample).collect();
        assert_eq!(got_top, top, "epoch {epoch}");
        assert_eq!(got_bottom, bottom, "epoch {epoch}");
    }
}

#[test]
fn malformed_weights_csv_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("w.csv");
    fs::write(&p, "epoch,batch,sample,class_id,loss,omega\n1,0,3,2,0.5,abc\n").unwrap();
    let out = clzsl(&["inspect-weights", "--weights", s(&p)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 1"));
}

#[test]
fn config_file_and_flags_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = small_corpus(tmp.path());
    let cfg = tmp.path().join("train.json");
    fs::write(&cfg, r#"{"preset": "sun-paper", "epochs": 1, "batch_size": 8, "k_neighbors": 2}"#).unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&run),
        "--config",
        s(&cfg),
        "--set",
        "temperature=3",
        "--no-pup",
    ]);
    let c: TrainConfig = RunManifest::read(&run.join(RUN_MANIFEST_FILE)).unwrap().config;
    assert_eq!((c.epochs, c.decay, c.temperature, c.use_pup), (1, 0.5, 3.0, false));
}
