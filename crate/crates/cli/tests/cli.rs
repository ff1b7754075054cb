use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fever_core::eval::FeatureFile;
use fever_core::losses::SimilarPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const TINY: &str = r#"
[model]
input_shape = [3, 8, 8]
channels = [4, 8]

[teacher]
d_face = [8, 4]

[student]
d_face = 8

[teacher_train]
n_steps = 6
batch_triplets = 4
batch_labeled = 4

[student_train]
n_steps = 6
batch_triplets = 4
batch_labeled = 4
batch_unlabeled = 4

[probe]
max_iter = 100

[data]
n_triplets = 40
n_labeled = 32
n_unlabeled = 16
n_eval_triplets = 30
n_eval_labeled = 24
n_transfer_train = 21
n_transfer_test = 21

[ablation]
seeds = [0]
n_steps = 3
teacher_batch_triplets = 4
teacher_batch_labeled = 4
student_batch_triplets = 4
student_batch_labeled = 4
student_batch_unlabeled = 4
"#;

fn tmp() -> TempDir {
    tempfile::Builder::new().tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap()
}

fn fever(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fever"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fever(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a failing command and returns its exit code and parsed error line.
fn fails(dir: &Path, args: &[&str]) -> (i32, serde_json::Value) {
    let out = fever(dir, args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected a one-line error, got {stderr:?}");
    (out.status.code().unwrap(), serde_json::from_str(lines[0]).unwrap())
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{extra}\n{TINY}")).unwrap();
    p
}

fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "run.toml", "--out", "out"][..], rest].concat()
}

fn pipeline(dir: &Path) {
    write_config(dir, "");
    ok(dir, &with(&["gen-data"]));
    ok(dir, &with(&["train-teacher", "--index", "0"]));
    ok(dir, &with(&["train-teacher", "--index", "1"]));
    ok(dir, &with(&["train-student", "--teacher", "out/teacher0.ckpt", "--teacher", "out/teacher1.ckpt"]));
    ok(dir, &with(&["eval-triplet", "--checkpoint", "out/student.ckpt"]));
    ok(dir, &with(&["eval-probe", "--checkpoint", "out/student.ckpt"]));
}

#[test]
fn full_pipeline_writes_manifest_and_reloadable_checkpoints() {
    let d = tmp();
    pipeline(d.path());
    let out = d.path().join("out");
    let manifest = fs::read_to_string(out.join("MANIFEST")).unwrap();
    for f in [
        "resolved_config.toml",
        "data/triplets.csv",
        "data/transfer_test.csv",
        "teacher0.ckpt",
        "teacher1_metrics.jsonl",
        "student.ckpt",
        "eval_triplet.json",
        "eval_probe.json",
    ] {
        assert!(manifest.lines().any(|l| l == f), "{f} missing from MANIFEST");
    }
    for line in manifest.lines() {
        assert!(out.join(line).is_file(), "{line} listed but absent");
    }
    let metrics = fs::read_to_string(out.join("student_metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval_triplet.json")).unwrap()).unwrap();
    assert_eq!(eval["triplets"], 30);
}

#[test]
fn pipeline_reruns_are_bitwise_identical() {
    let (a, b) = (tmp(), tmp());
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "teacher0_metrics.jsonl",
        "teacher1_metrics.jsonl",
        "student_metrics.jsonl",
        "student.ckpt",
        "eval_triplet.json",
        "eval_probe.json",
    ] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn manifests_from_config_train_like_synthetic_data() {
    let d = tmp();
    let dir = d.path();
    write_config(dir, "");
    ok(dir, &["--config", "run.toml", "--out", "gen", "gen-data"]);
    let p = dir.join("gen/data/cfg.toml");
    fs::write(
        &p,
        format!("[data]\ntriplets = \"triplets.csv\"\nlabeled = \"labeled.csv\"\nunlabeled = \"unlabeled.csv\"\n{}", TINY.replace("[data]", "[unused]").split("[unused]").next().unwrap()),
    )
    .unwrap();
    let stdout = ok(dir, &["--config", "gen/data/cfg.toml", "--out", "m", "train-teacher"]);
    assert!(stdout.contains("step 6"), "{stdout}");
    // Stored PNGs quantize pixels to 8 bits, so the run only needs to succeed.
    assert!(dir.join("m/teacher0.ckpt").is_file());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let d = tmp();
    let dir = d.path();
    write_config(dir, "");
    fs::write(dir.join("short.toml"), TINY.replacen("n_steps = 6", "n_steps = 3", 2)).unwrap();
    ok(dir, &["--config", "run.toml", "--out", "full", "train-teacher"]);
    ok(dir, &["--config", "short.toml", "--out", "half", "train-teacher"]);
    ok(dir, &["--config", "run.toml", "--out", "rest", "train-teacher", "--resume", "half/teacher0.ckpt"]);
    assert_eq!(
        fs::read(dir.join("rest/teacher0.ckpt")).unwrap(),
        fs::read(dir.join("full/teacher0.ckpt")).unwrap()
    );
    let full = fs::read_to_string(dir.join("full/teacher0_metrics.jsonl")).unwrap();
    let rest = fs::read_to_string(dir.join("rest/teacher0_metrics.jsonl")).unwrap();
    assert_eq!(rest.lines().collect::<Vec<_>>(), full.lines().skip(3).collect::<Vec<_>>());
}

#[test]
fn empty_config_echoes_training_defaults() {
    let d = tmp();
    let dir = d.path();
    fs::write(dir.join("empty.toml"), "").unwrap();
    // eval-triplet on a tiny feature file is the cheapest command.
    let f = FeatureFile::new(1, vec![0.0, 0.0, 1.0], Some(vec![12, 12, 12])).unwrap();
    f.save(&dir.join("f.feat")).unwrap();
    ok(dir, &["--config", "empty.toml", "--out", "o", "eval-triplet", "--features", "f.feat"]);
    let echo = fs::read_to_string(dir.join("o/resolved_config.toml")).unwrap();
    assert!(echo.contains("alpha = 0.1"), "{echo}");
    assert!(echo.contains("momentum = 0.9"));
    assert!(echo.contains("C = 10000.0"));
}

#[test]
fn random_embeddings_score_chance() {
    let d = tmp();
    let dir = d.path();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<f32> = (0..3 * n * 16).map(|_| rng.random::<f32>() - 0.5).collect();
    let labels: Vec<u32> = (0..n)
        .flat_map(|_| [SimilarPair::ALL[rng.random_range(0..3)].code(); 3])
        .collect();
    FeatureFile::new(16, rows, Some(labels)).unwrap().save(&dir.join("r.feat")).unwrap();
    ok(dir, &["--out", "o", "eval-triplet", "--features", "r.feat"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("o/eval_triplet.json")).unwrap()).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((acc - 1.0 / 3.0).abs() <= 0.02, "{acc}");
}

#[test]
fn ablate_emits_four_rows_as_text_and_csv() {
    let d = tmp();
    let dir = d.path();
    write_config(dir, "");
    let stdout = ok(dir, &["--config", "run.toml", "--out", "o", "ablate"]);
    for row in ["teacher", "student, no distillation", "distilled student, no unlabeled", "distilled student"] {
        assert!(stdout.lines().any(|l| l.starts_with(row)), "{row} missing:\n{stdout}");
    }
    let csv = fs::read_to_string(dir.join("o/ablation.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",median,")).count(), 4);
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let d = tmp();
    let dir = d.path();
    fs::write(dir.join("m.toml"), "[optim]\nmomentum = 1.5\n").unwrap();
    let (code, e) = fails(dir, &["--config", "m.toml", "--out", "o", "ablate"]);
    assert_eq!(code, 2);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("momentum"));
    fs::write(dir.join("u.toml"), "[optim]\nmoment = 0.5\n").unwrap();
    let (code, e) = fails(dir, &["--config", "u.toml", "--out", "o", "ablate"]);
    assert_eq!(code, 2);
    assert!(e["message"].as_str().unwrap().contains("did you mean `momentum`"));
    let (code, e) = fails(dir, &["--config", "missing.toml", "--out", "o", "ablate"]);
    assert_eq!((code, e["error"].as_str()), (2, Some("config")));
}

#[test]
fn data_errors_exit_3() {
    let d = tmp();
    let dir = d.path();
    let (code, _) = fails(dir, &["--out", "o", "train-student", "--teacher", "nope.ckpt"]);
    assert_eq!(code, 3);
    fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let (code, e) = fails(dir, &["--out", "o", "train-student", "--teacher", "junk.ckpt"]);
    assert_eq!((code, e["error"].as_str()), (3, Some("checkpoint")));
    fs::write(dir.join("bad.csv"), "path,label\nimg.png,9\n").unwrap();
    write_config(dir, "");
    let (code, e) = fails(
        dir,
        &["--config", "run.toml", "--out", "o", "extract-features", "--checkpoint", "junk.ckpt", "--manifest", "bad.csv", "--kind", "labeled"],
    );
    assert_eq!(code, 3, "{e}");
}

#[test]
fn student_checkpoint_is_not_a_teacher() {
    let d = tmp();
    pipeline(d.path());
    let (code, e) = fails(d.path(), &["--config", "run.toml", "--out", "x", "train-student", "--teacher", "out/student.ckpt"]);
    assert_eq!(code, 3);
    assert!(e["message"].as_str().unwrap().contains("not a teacher"));
}

#[test]
fn divergent_training_exits_4() {
    let d = tmp();
    let dir = d.path();
    fs::write(dir.join("run.toml"), TINY.replace("[model]", "[optim]\nlr = 1e30\n\n[model]")).unwrap();
    let (code, e) = fails(dir, &["--config", "run.toml", "--out", "o", "train-teacher"]);
    assert_eq!((code, e["error"].as_str()), (4, Some("numeric")));
}

#[test]
fn one_teacher_suffices() {
    let d = tmp();
    let dir = d.path();
    write_config(dir, "");
    ok(dir, &["--config", "run.toml", "--out", "o", "train-teacher"]);
    ok(dir, &["--config", "run.toml", "--out", "o", "train-student", "--teacher", "o/teacher0.ckpt"]);
    ok(dir, &["--config", "run.toml", "--out", "o", "extract-features", "--checkpoint", "o/student.ckpt", "--set", "transfer-train"]);
    let f = FeatureFile::load(&dir.join("o/features.feat")).unwrap();
    assert_eq!((f.count(), f.dims), (21, 8));
}
