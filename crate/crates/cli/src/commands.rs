//! Command implementations. Each returns a JSON-able summary for `--json`
//! mode; human-readable reporting happens through the logger and stdout.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use contigan::checkpoint::{dir_hash, load_discriminator, load_generator, load_generator_expecting};
use contigan::data::synth::{class_dataset, source_dataset, write_dataset_pngs, SOURCE_CLASSES, TASK_CLASSES};
use contigan::data::{few_shot_subset, load_task, tile_grid, write_image_png, TaskDataset};
use contigan::error::{Error, Result};
use contigan::metrics::{evaluate_task, FeatureExtractor, MetricReport};
use contigan::model::{build_discriminator, build_generator, GeneratorModel, NoiseBatch};
use contigan::trainer::{
    derive_seed, pretrain_source, task_dir_name, train_student, train_teacher, SequenceRunner,
};

use crate::config::RunConfig;

const TARGET: &str = "contigan";

// ---- run-directory state -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompletedTask {
    pub task_id: String,
    pub task_dir: PathBuf,
    pub n_shots: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunState {
    pub completed: Vec<CompletedTask>,
}

impl RunState {
    fn path(run: &Path) -> PathBuf {
        run.join("state.json")
    }

    pub fn load(run: &Path) -> Result<Self> {
        let p = Self::path(run);
        if !p.exists() {
            return Ok(RunState::default());
        }
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        fs::write(
            Self::path(run),
            serde_json::to_string_pretty(self).unwrap() + "\n",
        )?;
        Ok(())
    }
}

fn guard_overwrite(path: &Path, force: bool, what: &str) -> Result<()> {
    let occupied = path.is_file()
        || (path.is_dir() && path.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false));
    if occupied && !force {
        return Err(Error::Conflict(format!(
            "{what} already exists at {}; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_source_pair(
    run: &Path,
    cfg: &RunConfig,
) -> Result<(GeneratorModel<f32>, contigan::model::DiscriminatorModel<f32>)> {
    let gdir = run.join("source").join("generator");
    let ddir = run.join("source").join("discriminator");
    if !gdir.join("manifest.json").exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no source checkpoint under {}; run `pretrain` first", run.display()),
        )));
    }
    let g = load_generator_expecting(&gdir, &cfg.generator)?;
    let d = load_discriminator(&ddir)?;
    Ok((g, d))
}

/// Latest student generator of a run (fresh source clone when no task has
/// completed yet).
fn load_student(run: &Path, state: &RunState, source: &GeneratorModel<f32>) -> Result<GeneratorModel<f32>> {
    match state.completed.last() {
        Some(last) => load_generator(
            &run.join(task_dir_name(&last.task_id))
                .join("student")
                .join("generator"),
        ),
        None => {
            let mut s = build_generator::<f32>(source.config().clone())?;
            s.clone_weights_from(source)?;
            Ok(s)
        }
    }
}

fn load_shots(task_dir: &Path, task_id: &str, cfg: &RunConfig, shots: usize, seed: u64) -> Result<TaskDataset<f32>> {
    let full = load_task::<f32>(
        task_dir,
        task_id,
        cfg.generator.out_resolution,
        cfg.generator.out_channels,
    )?;
    if full.len() > shots {
        few_shot_subset(&full, shots, derive_seed(seed, &format!("shots/{task_id}")))
    } else {
        Ok(full)
    }
}

// ---- make-data -----------------------------------------------------------------

pub fn cmd_make_data(out: &Path, res: usize, per_class: usize, shots: usize, seed: u64, force: bool) -> Result<serde_json::Value> {
    guard_overwrite(out, force, "data directory")?;
    let source = source_dataset::<f32>(&SOURCE_CLASSES, per_class, res, seed);
    write_dataset_pngs(&source, &out.join("source"))?;
    info!(target: TARGET, "wrote {} source images to {}", source.len(), out.join("source").display());

    let mut tasks = Vec::new();
    for (i, class) in TASK_CLASSES.iter().enumerate() {
        let name = format!("{class:?}").to_lowercase();
        let ds = class_dataset::<f32>(*class, shots, res, derive_seed(seed, &name).wrapping_add(i as u64), 0.15);
        write_dataset_pngs(&ds, &out.join(&name))?;
        tasks.push(json!({"task_id": name, "path": out.join(&name), "n_shots": shots}));
    }
    let manifest = json!({"schema_version": 1, "tasks": tasks});
    fs::write(out.join("tasks.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    info!(target: TARGET, "wrote task manifest {}", out.join("tasks.json").display());
    Ok(json!({
        "command": "make-data",
        "out": out,
        "source_images": source.len(),
        "tasks": TASK_CLASSES.len(),
    }))
}

// ---- pretrain ------------------------------------------------------------------

pub fn cmd_pretrain(data: &Path, run: &Path, cfg: &RunConfig, force: bool) -> Result<serde_json::Value> {
    guard_overwrite(&run.join("source"), force, "source checkpoint")?;
    let dataset = load_task::<f32>(
        data,
        "source",
        cfg.generator.out_resolution,
        cfg.generator.out_channels,
    )?;
    info!(target: TARGET, "loaded {} source images from {}", dataset.len(), data.display());

    let gen = build_generator::<f32>(cfg.generator.clone())?;
    let disc = build_discriminator::<f32>(cfg.discriminator.clone())?;
    let art = pretrain_source(&dataset, gen, disc, &cfg.train, run)?;
    cfg.save(&run.join("config.json"))?;
    RunState::default().save(run)?;
    let hash = dir_hash(&art.dir)?;
    info!(target: TARGET, "source checkpoint at {} (hash {})", art.dir.display(), &hash[..12]);
    Ok(json!({
        "command": "pretrain",
        "run": run,
        "steps": cfg.train.steps_source,
        "checkpoint": art.dir,
        "checkpoint_hash": hash,
    }))
}

// ---- train-task ----------------------------------------------------------------

pub fn cmd_train_task(
    run: &Path,
    task_dir: &Path,
    task_id: &str,
    cfg: &RunConfig,
    shots: usize,
    force: bool,
) -> Result<serde_json::Value> {
    if !task_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Argument(format!(
            "task id '{task_id}' must be alphanumeric with - or _"
        )));
    }
    let (source_g, source_d) = load_source_pair(run, cfg)?;
    if cfg.train.disc_trainable_suffix_k > source_d.total_layers() {
        return Err(Error::Range(format!(
            "--freeze-k {} exceeds discriminator depth {}",
            cfg.train.disc_trainable_suffix_k,
            source_d.total_layers()
        )));
    }
    let mut state = RunState::load(run)?;
    if state.completed.iter().any(|t| t.task_id == task_id) {
        return Err(Error::Conflict(format!("task '{task_id}' was already trained in this run")));
    }
    guard_overwrite(&run.join(task_dir_name(task_id)), force, "task directory")?;

    let dataset = load_shots(task_dir, task_id, cfg, shots, cfg.train.seed)?;
    info!(target: TARGET, "task '{task_id}': {} shots at {}px", dataset.len(), dataset.resolution());

    let student = load_student(run, &state, &source_g)?;
    let mut runner = SequenceRunner::new(run, cfg.train.clone(), source_g, source_d)?
        .with_student(student)?;
    let outcome = runner.train_task(&dataset)?;
    info!(
        target: TARGET,
        "task '{task_id}' done: teacher total {:.4}, student total {:.4}, audit pass",
        outcome.teacher.final_losses.total,
        outcome.student.final_losses.total
    );

    state.completed.push(CompletedTask {
        task_id: task_id.to_string(),
        task_dir: task_dir.to_path_buf(),
        n_shots: dataset.len(),
    });
    state.save(run)?;
    Ok(json!({
        "command": "train-task",
        "run": run,
        "task_id": task_id,
        "teacher_total": outcome.teacher.final_losses.total,
        "student_total": outcome.student.final_losses.total,
        "audit_pass": outcome.audit.all_pass(),
    }))
}

// ---- generate ------------------------------------------------------------------

pub fn cmd_generate(
    run: &Path,
    task_id: &str,
    n: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<serde_json::Value> {
    if n == 0 {
        return Err(Error::Argument("--n must be at least 1".into()));
    }
    let cfg = RunConfig::load(&run.join("config.json"))?;
    let state = RunState::load(run)?;
    let (source_g, _) = load_source_pair(run, &cfg)?;

    let mut gen = if task_id == "source" {
        source_g
    } else {
        let mut student = load_student(run, &state, &source_g)?;
        student.set_active_task(Some(task_id))?;
        student
    };
    let _ = &mut gen;

    guard_overwrite(out, force, "output directory")?;
    fs::create_dir_all(out)?;
    let noise = NoiseBatch::sample(n, gen.latent_dim(), seed);
    let images = gen.generate(&noise)?;
    let per = images.numel() / n;
    for i in 0..n {
        let img = contigan::tensor::Tensor::from_vec(
            images.data()[i * per..(i + 1) * per].to_vec(),
            &images.shape()[1..],
        );
        write_image_png(&img, &out.join(format!("sample_{i:05}.png")))?;
    }
    write_image_png(&tile_grid(&images), &out.join("grid.png"))?;
    info!(target: TARGET, "wrote {n} samples and grid.png to {}", out.display());
    Ok(json!({"command": "generate", "task_id": task_id, "n": n, "seed": seed, "out": out}))
}

// ---- eval ----------------------------------------------------------------------

fn eval_one(
    run: &Path,
    cfg: &RunConfig,
    state: &RunState,
    source_g: &GeneratorModel<f32>,
    task: &CompletedTask,
    n_samples: usize,
    seed: u64,
    extractor: &FeatureExtractor<f32>,
) -> Result<MetricReport> {
    let dataset = load_shots(&task.task_dir, &task.task_id, cfg, task.n_shots, cfg.train.seed)?;
    let mut student = load_student(run, state, source_g)?;
    student.set_active_task(Some(&task.task_id))?;
    let report = evaluate_task(&student, &dataset, n_samples, seed, extractor)?;
    let out = run.join(task_dir_name(&task.task_id)).join("metrics.json");
    fs::write(&out, serde_json::to_string_pretty(&report).unwrap() + "\n")?;
    Ok(report)
}

pub fn cmd_eval(
    run: &Path,
    task_id: Option<&str>,
    all: bool,
    n_samples: usize,
    seed: u64,
) -> Result<serde_json::Value> {
    let cfg = RunConfig::load(&run.join("config.json"))?;
    let state = RunState::load(run)?;
    let (source_g, _) = load_source_pair(run, &cfg)?;
    let extractor =
        FeatureExtractor::<f32>::for_input(cfg.generator.out_resolution, cfg.generator.out_channels)?;
    extractor.save_blob(&run.join("extractor"))?;

    let targets: Vec<CompletedTask> = if all {
        state.completed.clone()
    } else {
        let id = task_id.ok_or_else(|| Error::Argument("pass --task-id or --all".into()))?;
        vec![state
            .completed
            .iter()
            .find(|t| t.task_id == id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("task '{id}' has not been trained in this run")))?]
    };
    if targets.is_empty() {
        return Err(Error::NotFound("no completed tasks to evaluate".into()));
    }

    let mut reports = Vec::new();
    for t in &targets {
        let r = eval_one(run, &cfg, &state, &source_g, t, n_samples, seed, &extractor)?;
        info!(
            target: TARGET,
            "task {:<12} fid {:>8.4}  b_lpips {:>7.4}  pairwise {:>7.4}",
            r.task_id, r.fid, r.b_lpips, r.mean_pairwise_lpips
        );
        reports.push(r);
    }
    let avg_fid = reports.iter().map(|r| r.fid).sum::<f64>() / reports.len() as f64;
    let avg_b = reports.iter().map(|r| r.b_lpips).sum::<f64>() / reports.len() as f64;
    let avg_p = reports.iter().map(|r| r.mean_pairwise_lpips).sum::<f64>() / reports.len() as f64;
    info!(
        target: TARGET,
        "task {:<12} fid {:>8.4}  b_lpips {:>7.4}  pairwise {:>7.4}",
        "average", avg_fid, avg_b, avg_p
    );
    Ok(json!({
        "command": "eval",
        "run": run,
        "tasks": reports,
        "average": {"fid": avg_fid, "b_lpips": avg_b, "mean_pairwise_lpips": avg_p},
    }))
}

// ---- ablate --------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Grid {
    Wt,
    WsAlpha,
    Freeze,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate(
    run: &Path,
    grid: Grid,
    task_dir: &Path,
    task_id: &str,
    out_csv: &Path,
    cfg: &RunConfig,
    shots: usize,
    n_samples: usize,
    force: bool,
) -> Result<serde_json::Value> {
    guard_overwrite(out_csv, force, "ablation csv")?;
    let (source_g, source_d) = load_source_pair(run, cfg)?;
    let dataset = load_shots(task_dir, task_id, cfg, shots, cfg.train.seed)?;
    let extractor =
        FeatureExtractor::<f32>::for_input(cfg.generator.out_resolution, cfg.generator.out_channels)?;
    let eval_seed = derive_seed(cfg.train.seed, "ablate-eval");
    let base = run.join(format!("ablate_{}", match grid {
        Grid::Wt => "wt",
        Grid::WsAlpha => "ws-alpha",
        Grid::Freeze => "freeze",
    }));

    let mut rows = Vec::new();
    match grid {
        Grid::Wt => {
            rows.push("wt,fid,b_lpips".to_string());
            for wt in [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0] {
                let mut c = cfg.train.clone();
                c.weights.w_t = wt;
                let cell = base.join(format!("wt{wt}"));
                let teacher = train_teacher(&source_g, &source_d, &dataset, &c, &cell)?;
                let m = evaluate_task(&teacher.generator, &dataset, n_samples, eval_seed, &extractor)?;
                info!(target: TARGET, "ablate wt={wt}: fid {:.4} b_lpips {:.4}", m.fid, m.b_lpips);
                rows.push(format!("{wt},{},{}", m.fid, m.b_lpips));
            }
        }
        Grid::WsAlpha => {
            rows.push("alpha,ws,fid,b_lpips".to_string());
            let teacher = train_teacher(&source_g, &source_d, &dataset, &cfg.train, &base.join("teacher"))?;
            for alpha in [0.0, 2.0, 5.0, 10.0] {
                for ws in [10.0, 20.0, 30.0, 40.0] {
                    let mut c = cfg.train.clone();
                    c.weights.alpha = alpha;
                    c.weights.w_s = ws;
                    let cell = base.join(format!("a{alpha}_w{ws}"));
                    let mut student = build_generator::<f32>(cfg.generator.clone())?;
                    student.clone_weights_from(&source_g)?;
                    train_student(&mut student, &source_g, &source_d, &teacher, &dataset, &c, &cell)?;
                    let m = evaluate_task(&student, &dataset, n_samples, eval_seed, &extractor)?;
                    info!(target: TARGET, "ablate alpha={alpha} ws={ws}: fid {:.4} b_lpips {:.4}", m.fid, m.b_lpips);
                    rows.push(format!("{alpha},{ws},{},{}", m.fid, m.b_lpips));
                }
            }
        }
        Grid::Freeze => {
            rows.push("k,fid,b_lpips".to_string());
            let l = source_d.total_layers();
            let teacher = train_teacher(&source_g, &source_d, &dataset, &cfg.train, &base.join("teacher"))?;
            for i in 1..=6usize {
                let k = l * i / 6;
                let mut c = cfg.train.clone();
                c.disc_trainable_suffix_k = k;
                let cell = base.join(format!("k{k}"));
                let mut student = build_generator::<f32>(cfg.generator.clone())?;
                student.clone_weights_from(&source_g)?;
                train_student(&mut student, &source_g, &source_d, &teacher, &dataset, &c, &cell)?;
                let m = evaluate_task(&student, &dataset, n_samples, eval_seed, &extractor)?;
                info!(target: TARGET, "ablate k={k}: fid {:.4} b_lpips {:.4}", m.fid, m.b_lpips);
                rows.push(format!("{k},{},{}", m.fid, m.b_lpips));
            }
        }
    }

    if let Some(parent) = out_csv.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out_csv, rows.join("\n") + "\n")?;
    info!(target: TARGET, "wrote {} data rows to {}", rows.len() - 1, out_csv.display());
    Ok(json!({
        "command": "ablate",
        "grid": format!("{grid:?}"),
        "rows": rows.len() - 1,
        "csv": out_csv,
    }))
}
