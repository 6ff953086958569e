//! Black-box CLI tests through the compiled binary: exit codes, run-directory
//! layout, idempotence, and the ablation grid shapes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_contigan")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("CONTIGAN_SEED")
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{ctx}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Shared tiny corpus + pretrained run, built once for the whole test binary.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    config: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("runs/demo");
        let config = dir.path().join("tiny.json");
        std::fs::write(
            &config,
            serde_json::json!({
                "schema_version": 1,
                "train": {
                    "steps_source": 12,
                    "steps_teacher": 6,
                    "steps_student": 6,
                    "batch_size": 4,
                    "cdc_batch": 4,
                    "seed": 3
                },
                "generator": {
                    "latent_dim": 16,
                    "out_resolution": 16,
                    "out_channels": 1,
                    "base_channels": 16,
                    "seed": 3
                },
                "discriminator": {
                    "in_resolution": 16,
                    "in_channels": 1,
                    "base_channels": 8,
                    "seed": 4
                }
            })
            .to_string(),
        )
        .unwrap();

        let out = run(&[
            "make-data",
            "--out",
            data.to_str().unwrap(),
            "--per-class",
            "200",
            "--res",
            "16",
        ]);
        assert_exit(&out, 0, "make-data");

        let out = run(&[
            "pretrain",
            "--data",
            data.join("source").to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ]);
        assert_exit(&out, 0, "pretrain");

        let out = run(&[
            "train-task",
            "--source",
            run.to_str().unwrap(),
            "--task-dir",
            data.join("ring").to_str().unwrap(),
            "--task-id",
            "ring",
        ]);
        assert_exit(&out, 0, "train-task ring");

        Fixture {
            _dir: dir,
            data,
            run,
            config,
        }
    })
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = run(&["pretrain", "--out", "/tmp/nope"]);
    assert_exit(&out, 2, "pretrain without --data");
}

#[test]
fn pretrain_populates_source_and_guards_overwrite() {
    let f = fixture();
    assert!(f.run.join("source/generator/manifest.json").exists());
    assert!(f.run.join("source/discriminator/manifest.json").exists());
    assert!(f.run.join("source/samples.png").exists());
    assert!(f.run.join("config.json").exists());

    // same dir again without --force -> conflict
    let out = run(&[
        "pretrain",
        "--data",
        f.data.join("source").to_str().unwrap(),
        "--out",
        f.run.to_str().unwrap(),
        "--config",
        f.config.to_str().unwrap(),
    ]);
    assert_exit(&out, 4, "pretrain overwrite without --force");
}

#[test]
fn pretrain_same_seed_reproduces_checkpoint_hash() {
    let f = fixture();
    let hash_of = |out: &Output| {
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["checkpoint_hash"].as_str().unwrap().to_string()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for d in [&d1, &d2] {
        let out = run(&[
            "--json",
            "pretrain",
            "--data",
            f.data.join("source").to_str().unwrap(),
            "--out",
            d.path().join("r").to_str().unwrap(),
            "--config",
            f.config.to_str().unwrap(),
        ]);
        assert_exit(&out, 0, "pretrain rerun");
        hashes.push(hash_of(&out));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn train_task_writes_artifacts_and_rejects_duplicates() {
    let f = fixture();
    let tdir = f.run.join("task_ring");
    assert!(tdir.join("teacher/generator/manifest.json").exists());
    assert!(tdir.join("student/generator/manifest.json").exists());
    assert!(tdir.join("losses.csv").exists());
    assert!(tdir.join("audit.json").exists());
    assert!(tdir.join("samples/teacher.png").exists());
    assert!(tdir.join("samples/student.png").exists());

    // the student checkpoint carries the bank
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tdir.join("student/generator/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["task_ids"][0], "ring");

    let out = run(&[
        "train-task",
        "--source",
        f.run.to_str().unwrap(),
        "--task-dir",
        f.data.join("ring").to_str().unwrap(),
        "--task-id",
        "ring",
    ]);
    assert_exit(&out, 4, "duplicate task id");
}

#[test]
fn train_task_rejects_out_of_range_freeze_k() {
    let f = fixture();
    let out = run(&[
        "train-task",
        "--source",
        f.run.to_str().unwrap(),
        "--task-dir",
        f.data.join("diamond").to_str().unwrap(),
        "--task-id",
        "diamond-badk",
        "--freeze-k",
        "99",
    ]);
    assert_exit(&out, 2, "freeze-k beyond depth");
}

#[test]
fn generate_is_byte_deterministic_and_validates() {
    let f = fixture();
    let o1 = tempfile::tempdir().unwrap();
    let o2 = tempfile::tempdir().unwrap();
    for o in [&o1, &o2] {
        let out = run(&[
            "generate",
            "--run",
            f.run.to_str().unwrap(),
            "--task-id",
            "ring",
            "--n",
            "4",
            "--seed",
            "11",
            "--out",
            o.path().join("g").to_str().unwrap(),
        ]);
        assert_exit(&out, 0, "generate");
    }
    for name in ["sample_00000.png", "sample_00003.png", "grid.png"] {
        let a = std::fs::read(o1.path().join("g").join(name)).unwrap();
        let b = std::fs::read(o2.path().join("g").join(name)).unwrap();
        assert_eq!(a, b, "png bytes differ for {name}");
    }

    let out = run(&[
        "generate",
        "--run",
        f.run.to_str().unwrap(),
        "--task-id",
        "ghost",
        "--n",
        "2",
        "--out",
        o1.path().join("x").to_str().unwrap(),
    ]);
    assert_exit(&out, 4, "unknown task id");

    let out = run(&[
        "generate",
        "--run",
        f.run.to_str().unwrap(),
        "--task-id",
        "ring",
        "--n",
        "0",
        "--out",
        o1.path().join("y").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "n = 0");
}

#[test]
fn eval_all_reports_tasks_plus_average_and_is_idempotent() {
    let f = fixture();
    // add a second task so --all aggregates more than one row
    let out = run(&[
        "train-task",
        "--source",
        f.run.to_str().unwrap(),
        "--task-dir",
        f.data.join("diamond").to_str().unwrap(),
        "--task-id",
        "diamond",
    ]);
    assert_exit(&out, 0, "train-task diamond");

    let eval = |n: &str| {
        let out = run(&[
            "--json",
            "eval",
            "--run",
            f.run.to_str().unwrap(),
            "--all",
            "--n-samples",
            n,
        ]);
        assert_exit(&out, 0, "eval --all");
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let v = eval("16");
    assert_eq!(v["tasks"].as_array().unwrap().len(), 2);
    assert!(v["average"]["fid"].as_f64().unwrap() >= 0.0);
    let m1 = std::fs::read(f.run.join("task_ring/metrics.json")).unwrap();
    let v2 = eval("16");
    let m2 = std::fs::read(f.run.join("task_ring/metrics.json")).unwrap();
    assert_eq!(m1, m2, "repeated eval must rewrite identical metrics.json");
    assert_eq!(v, v2);
    assert!(f.run.join("extractor/version.json").exists());

    let out = run(&["eval", "--run", f.run.to_str().unwrap(), "--task-id", "missing"]);
    assert_exit(&out, 4, "eval unknown task");
}

#[test]
fn eval_without_source_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("empty-run");
    std::fs::create_dir_all(&run_dir).unwrap();
    // minimal config so resolution does not fail first
    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_string(&serde_json::json!({"schema_version": 1})).unwrap(),
    )
    .unwrap();
    let out = run(&["eval", "--run", run_dir.to_str().unwrap(), "--all"]);
    assert_exit(&out, 5, "eval with missing checkpoints");
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn ablate_grids_have_table_shapes() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();

    let ablate = |grid: &str, csv: &Path| {
        let out = run(&[
            "ablate",
            "--run",
            f.run.to_str().unwrap(),
            "--grid",
            grid,
            "--task-dir",
            f.data.join("dots").to_str().unwrap(),
            "--task-id",
            "dots",
            "--out",
            csv.to_str().unwrap(),
            "--steps-teacher",
            "3",
            "--steps-student",
            "3",
            "--n-samples",
            "12",
        ]);
        assert_exit(&out, 0, &format!("ablate {grid}"));
    };

    let wt = out_dir.path().join("wt.csv");
    ablate("wt", &wt);
    let rows = csv_rows(&wt);
    assert_eq!(rows[0], "wt,fid,b_lpips");
    assert_eq!(rows.len(), 1 + 7);

    let ws = out_dir.path().join("ws_alpha.csv");
    ablate("ws-alpha", &ws);
    let rows = csv_rows(&ws);
    assert_eq!(rows[0], "alpha,ws,fid,b_lpips");
    assert_eq!(rows.len(), 1 + 16);

    let fr = out_dir.path().join("freeze.csv");
    ablate("freeze", &fr);
    let rows = csv_rows(&fr);
    assert_eq!(rows[0], "k,fid,b_lpips");
    assert_eq!(rows.len(), 1 + 6);
}

#[test]
fn env_seed_overrides_flags() {
    let f = fixture();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for (d, flag_seed) in [(&d1, "111"), (&d2, "222")] {
        let out = Command::new(bin())
            .args([
                "--json",
                "pretrain",
                "--data",
                f.data.join("source").to_str().unwrap(),
                "--out",
                d.path().join("r").to_str().unwrap(),
                "--config",
                f.config.to_str().unwrap(),
                "--seed",
                flag_seed,
            ])
            .env("CONTIGAN_SEED", "777")
            .output()
            .unwrap();
        assert_exit(&out, 0, "pretrain with env seed");
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        hashes.push(v["checkpoint_hash"].as_str().unwrap().to_string());
    }
    assert_eq!(hashes[0], hashes[1], "env seed must override diverging flags");
}
