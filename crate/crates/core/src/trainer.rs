//! Two-stage per-task training over an ordered task sequence.
//!
//! For each task: first a teacher generator (a full clone of the frozen
//! source) is trained on the few-shot data with the adversarial loss plus
//! the similarity-structure loss against the source; then a student trains
//! only a fresh zero-initialized adapter bank on top of frozen source
//! globals, driven by the adversarial loss, distillation toward the teacher,
//! and the similarity-structure loss against the source. Discriminators are
//! cloned from the source per stage; the student's trains only its last `k`
//! layers. After every task a bit-exact forgetting audit replays archived
//! probe images for all completed tasks.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    read_tensor_blob, save_discriminator, save_generator, write_tensor_blob,
};
use crate::data::{tile_grid, write_image_png, TaskDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    adv_loss_d_nodes, adv_loss_g_nodes, cdc_loss_nodes, kd_loss_nodes, similarity_rows_nodes,
    student_total, teacher_total, LossReport, LossWeights,
};
use crate::model::{
    DiscriminatorModel, GeneratorModel, NoiseBatch, TrainScope,
};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Minimum source-corpus size for pretraining (stand-in for "large").
pub const MIN_SOURCE_IMAGES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps_source: usize,
    pub steps_teacher: usize,
    pub steps_student: usize,
    pub batch_size: usize,
    /// Noise vectors per similarity-structure batch. When equal to
    /// `batch_size` the adversarial fake batch is reused; otherwise a
    /// separate noise batch is drawn each generator step.
    pub cdc_batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weights: LossWeights,
    /// Trainable suffix of the student discriminator (teacher trains all).
    pub disc_trainable_suffix_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_source: 3000,
            steps_teacher: 400,
            steps_student: 400,
            batch_size: 8,
            cdc_batch: 8,
            lr_g: 2e-4,
            lr_d: 2e-4,
            weights: LossWeights::default(),
            disc_trainable_suffix_k: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("steps_source", self.steps_source),
            ("steps_teacher", self.steps_teacher),
            ("steps_student", self.steps_student),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.cdc_batch < 2 {
            return Err(Error::Config("cdc_batch must be >= 2".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Stable seed derivation: FNV-1a over a tag, mixed into the base seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    base.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(h)
}

fn draw_noise(rng: &mut ChaCha8Rng, n: usize, latent: usize, stream_seed: u64) -> NoiseBatch<f32> {
    let data = (0..n * latent)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    NoiseBatch::from_tensor(Tensor::from_vec(data, &[n, latent]), stream_seed)
}

fn sample_batch(rng: &mut ChaCha8Rng, dataset: &TaskDataset<f32>, n: usize) -> Tensor<f32> {
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..dataset.len())).collect();
    dataset.batch(&idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Source,
    Teacher,
    Student,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub task_id: String,
    pub final_losses: LossReport,
    pub wall_time_secs: f64,
    pub checkpoint_path: PathBuf,
    #[serde(skip)]
    pub history: Vec<LossReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditEntry {
    pub task_id: String,
    pub pass: bool,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked_after: String,
    pub probe_seed: u64,
    pub results: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub teacher: StageReport,
    pub student: StageReport,
    pub audit: AuditReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceReport {
    pub tasks: Vec<TaskOutcome>,
    pub student_checkpoint: PathBuf,
}

/// The teacher produced for one task, tagged so student training can verify
/// it is distilling from the right stage.
pub struct TeacherArtifacts {
    pub generator: GeneratorModel<f32>,
    pub task_id: String,
    pub report: StageReport,
}

// ---- one GAN step -------------------------------------------------------------

struct StepLoss {
    adv: f64,
    cdc: f64,
    kd: f64,
    r1: f64,
}

struct StageEngine<'a> {
    gen: &'a mut GeneratorModel<f32>,
    disc: &'a mut DiscriminatorModel<f32>,
    gen_scope: TrainScope,
    dataset: &'a TaskDataset<f32>,
    cdc_source: Option<&'a GeneratorModel<f32>>,
    kd_teacher: Option<&'a GeneratorModel<f32>>,
    cdc_weight: f64,
    kd_weight: f64,
    config: &'a TrainConfig,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    stream_seed: u64,
}

impl<'a> StageEngine<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        gen: &'a mut GeneratorModel<f32>,
        disc: &'a mut DiscriminatorModel<f32>,
        gen_scope: TrainScope,
        dataset: &'a TaskDataset<f32>,
        cdc_source: Option<&'a GeneratorModel<f32>>,
        kd_teacher: Option<&'a GeneratorModel<f32>>,
        cdc_weight: f64,
        kd_weight: f64,
        config: &'a TrainConfig,
        stream_seed: u64,
    ) -> Self {
        StageEngine {
            gen,
            disc,
            gen_scope,
            dataset,
            cdc_source,
            kd_teacher,
            cdc_weight,
            kd_weight,
            config,
            opt_g: Adam::new(config.lr_g),
            opt_d: Adam::new(config.lr_d),
            rng: ChaCha8Rng::seed_from_u64(stream_seed),
            stream_seed,
        }
    }

    fn step(&mut self) -> Result<StepLoss> {
        let latent = self.gen.latent_dim();
        let batch = self.config.batch_size;
        let gamma = self.config.weights.r1_gamma;

        // -- discriminator step ------------------------------------------------
        let real = sample_batch(&mut self.rng, self.dataset, batch);
        let z_d = draw_noise(&mut self.rng, batch, latent, self.stream_seed);
        let fake_d = self.gen.generate(&z_d)?;

        let r1_value;
        {
            let mut g: Graph<f32> = Graph::new();
            let leaves = self.disc.insert_leaves(&mut g, true);
            let x_real = g.leaf(real, gamma > 0.0);
            let real_logits = self.disc.forward(&mut g, &leaves, x_real);
            let xf = g.constant(fake_d);
            let fake_logits = self.disc.forward(&mut g, &leaves, xf);
            let (adv_d, r1) = adv_loss_d_nodes(&mut g, real_logits, fake_logits, x_real, gamma)?;
            r1_value = g.value(r1).item() as f64;
            let total_d = g.add(adv_d, r1);
            let ids: Vec<_> = leaves.trainable().iter().map(|(_, id)| *id).collect();
            let grads = g.grad_values(total_d, &ids);
            if !ids.is_empty() {
                self.opt_d.begin_step();
                for ((name, _), grad) in leaves.trainable().iter().zip(grads) {
                    let p = self
                        .disc
                        .param_mut(name)
                        .expect("trainable names map to parameters");
                    self.opt_d.update_param(name, p, &grad);
                }
            }
        }

        // -- generator step ----------------------------------------------------
        let z_g = draw_noise(&mut self.rng, batch, latent, self.stream_seed);
        let reuse_for_cdc = self.config.cdc_batch == batch;
        let z_cdc = if self.cdc_weight > 0.0 && !reuse_for_cdc {
            Some(draw_noise(&mut self.rng, self.config.cdc_batch, latent, self.stream_seed))
        } else {
            None
        };

        let mut g: Graph<f32> = Graph::new();
        let gen_leaves = self.gen.insert_leaves(&mut g, self.gen_scope);
        let z = g.constant(z_g.values().clone());
        let fake = self.gen.forward(&mut g, &gen_leaves, z);

        let disc_leaves = self.disc.insert_leaves(&mut g, false);
        let fake_logits = self.disc.forward(&mut g, &disc_leaves, fake);
        let adv = adv_loss_g_nodes(&mut g, fake_logits)?;

        let mut total = adv;
        let mut cdc_value = 0.0f64;
        if self.cdc_weight > 0.0 {
            let source = self
                .cdc_source
                .expect("cdc_weight > 0 requires a source generator");
            let (target_imgs, source_noise) = if reuse_for_cdc {
                (fake, &z_g)
            } else {
                let zc = z_cdc.as_ref().unwrap();
                let zc_node = g.constant(zc.values().clone());
                (self.gen.forward(&mut g, &gen_leaves, zc_node), zc)
            };
            let source_imgs = source.generate(source_noise)?;
            let src_node = g.constant(source_imgs);
            let target_rows = similarity_rows_nodes(&mut g, target_imgs)?;
            let source_rows = similarity_rows_nodes(&mut g, src_node)?;
            let cdc = cdc_loss_nodes(&mut g, target_rows, source_rows)?;
            cdc_value = g.value(cdc).item() as f64;
            let weighted = g.scale(cdc, self.cdc_weight as f32);
            total = g.add(total, weighted);
        }

        let mut kd_value = 0.0f64;
        if self.kd_weight > 0.0 {
            let teacher = self
                .kd_teacher
                .expect("kd_weight > 0 requires a teacher generator");
            let teacher_imgs = teacher.generate(&z_g)?;
            let t_node = g.constant(teacher_imgs);
            let kd = kd_loss_nodes(&mut g, t_node, fake)?;
            kd_value = g.value(kd).item() as f64;
            let weighted = g.scale(kd, self.kd_weight as f32);
            total = g.add(total, weighted);
        }

        let adv_value = g.value(adv).item() as f64;
        let ids: Vec<_> = gen_leaves.trainable().iter().map(|(_, id)| *id).collect();
        let grads = g.grad_values(total, &ids);
        if !ids.is_empty() {
            self.opt_g.begin_step();
            for ((name, _), grad) in gen_leaves.trainable().iter().zip(grads) {
                let p = self
                    .gen
                    .param_mut(name)
                    .expect("trainable names map to parameters");
                self.opt_g.update_param(name, p, &grad);
            }
        }

        Ok(StepLoss {
            adv: adv_value,
            cdc: cdc_value,
            kd: kd_value,
            r1: r1_value,
        })
    }
}

fn write_losses_csv(path: &Path, rows: &[LossReport], append: bool) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    if !append || !path.exists() {
        out.push_str(LossReport::CSV_HEADER);
        out.push('\n');
    }
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    if append && path.exists() {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).open(path)?;
        f.write_all(out.as_bytes())?;
    } else {
        fs::write(path, out)?;
    }
    Ok(())
}

fn write_sample_grid(gen: &GeneratorModel<f32>, seed: u64, path: &Path) -> Result<()> {
    let noise = NoiseBatch::sample(16, gen.latent_dim(), seed);
    let imgs = gen.generate(&noise)?;
    write_image_png(&tile_grid(&imgs), path)
}

// ---- pretraining ------------------------------------------------------------------

pub struct SourceArtifacts {
    pub generator: GeneratorModel<f32>,
    pub discriminator: DiscriminatorModel<f32>,
    pub dir: PathBuf,
}

/// Pretrain the source generator/discriminator pair on a large corpus and
/// checkpoint it under `out_dir/source/`. The source is immutable afterward.
pub fn pretrain_source(
    dataset: &TaskDataset<f32>,
    mut generator: GeneratorModel<f32>,
    mut discriminator: DiscriminatorModel<f32>,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<SourceArtifacts> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("source dataset is empty".into()));
    }
    if dataset.len() < MIN_SOURCE_IMAGES {
        return Err(Error::Data(format!(
            "source pretraining expects a large dataset (>= {MIN_SOURCE_IMAGES} images), got {}",
            dataset.len()
        )));
    }
    let l = discriminator.total_layers();
    discriminator.set_trainable_suffix(l)?;

    let stream_seed = derive_seed(config.seed, "source");
    let mut rows = Vec::with_capacity(config.steps_source);
    {
        let mut engine = StageEngine::new(
            &mut generator,
            &mut discriminator,
            TrainScope::Global,
            dataset,
            None,
            None,
            0.0,
            0.0,
            config,
            stream_seed,
        );
        for step in 1..=config.steps_source {
            let l = engine.step()?;
            rows.push(LossReport {
                step: step as u64,
                adv: l.adv,
                kd: 0.0,
                cdc: 0.0,
                r1: l.r1,
                total: l.adv,
            });
        }
    }

    let dir = out_dir.join("source");
    save_generator(&generator, &dir.join("generator"))?;
    save_discriminator(&discriminator, &dir.join("discriminator"))?;
    write_losses_csv(&dir.join("losses.csv"), &rows, false)?;
    write_sample_grid(&generator, derive_seed(config.seed, "source-samples"), &dir.join("samples.png"))?;
    Ok(SourceArtifacts {
        generator,
        discriminator,
        dir,
    })
}

// ---- teacher stage ------------------------------------------------------------------

/// Train a full clone of the source on the task data with the adversarial
/// loss plus `w_t` times the similarity-structure loss against the frozen
/// source. All teacher generator weights and all discriminator layers train.
pub fn train_teacher(
    source_g: &GeneratorModel<f32>,
    source_d: &DiscriminatorModel<f32>,
    task: &TaskDataset<f32>,
    config: &TrainConfig,
    task_dir: &Path,
) -> Result<TeacherArtifacts> {
    config.validate()?;
    let start = Instant::now();

    let mut teacher = crate::model::build_generator::<f32>(source_g.config().clone())?;
    teacher.clone_weights_from(source_g)?;
    let mut disc = crate::model::build_discriminator::<f32>(source_d.config().clone())?;
    disc.clone_weights_from(source_d)?;
    let l = disc.total_layers();
    disc.set_trainable_suffix(l)?; // the teacher stage trains every layer

    let stream_seed = derive_seed(config.seed, &format!("teacher/{}", task.task_id()));
    let mut rows = Vec::with_capacity(config.steps_teacher);
    {
        let mut engine = StageEngine::new(
            &mut teacher,
            &mut disc,
            TrainScope::Global,
            task,
            Some(source_g),
            None,
            config.weights.w_t,
            0.0,
            config,
            stream_seed,
        );
        for step in 1..=config.steps_teacher {
            let l = engine.step()?;
            rows.push(LossReport {
                step: step as u64,
                adv: l.adv,
                kd: 0.0,
                cdc: l.cdc,
                r1: l.r1,
                total: teacher_total(l.adv, l.cdc, &config.weights),
            });
        }
    }

    let ckpt = task_dir.join("teacher");
    save_generator(&teacher, &ckpt.join("generator"))?;
    save_discriminator(&disc, &ckpt.join("discriminator"))?;
    write_losses_csv(&task_dir.join("losses.csv"), &rows, false)?;
    write_sample_grid(
        &teacher,
        derive_seed(config.seed, "stage-samples"),
        &task_dir.join("samples").join("teacher.png"),
    )?;

    let final_losses = *rows.last().expect("steps_teacher >= 1");
    if !final_losses.all_finite() {
        return Err(Error::Numeric(format!(
            "teacher stage for '{}' ended with non-finite losses",
            task.task_id()
        )));
    }
    Ok(TeacherArtifacts {
        generator: teacher,
        task_id: task.task_id().to_string(),
        report: StageReport {
            stage: Stage::Teacher,
            task_id: task.task_id().to_string(),
            final_losses,
            wall_time_secs: start.elapsed().as_secs_f64(),
            checkpoint_path: ckpt,
            history: rows,
        },
    })
}

// ---- student stage ------------------------------------------------------------------

/// Train a fresh zero-initialized adapter bank for this task on `student`,
/// whose global weights stay frozen. The objective is adversarial plus
/// `alpha` times distillation toward the teacher plus `w_s` times the
/// similarity-structure loss against the source. The discriminator is a
/// fresh source clone training only its last `k` layers.
pub fn train_student(
    student: &mut GeneratorModel<f32>,
    source_g: &GeneratorModel<f32>,
    source_d: &DiscriminatorModel<f32>,
    teacher: &TeacherArtifacts,
    task: &TaskDataset<f32>,
    config: &TrainConfig,
    task_dir: &Path,
) -> Result<StageReport> {
    config.validate()?;
    if teacher.task_id != task.task_id() {
        return Err(Error::Consistency(format!(
            "teacher was trained for task '{}', not '{}'",
            teacher.task_id,
            task.task_id()
        )));
    }
    let start = Instant::now();

    student.add_task_adapters(task.task_id())?;
    student.set_active_task(Some(task.task_id()))?;

    let mut disc = crate::model::build_discriminator::<f32>(source_d.config().clone())?;
    disc.clone_weights_from(source_d)?;
    disc.set_trainable_suffix(config.disc_trainable_suffix_k)?;

    let stream_seed = derive_seed(config.seed, &format!("student/{}", task.task_id()));
    let mut rows = Vec::with_capacity(config.steps_student);
    {
        let mut engine = StageEngine::new(
            student,
            &mut disc,
            TrainScope::ActiveBank,
            task,
            Some(source_g),
            Some(&teacher.generator),
            config.weights.w_s,
            config.weights.alpha,
            config,
            stream_seed,
        );
        for step in 1..=config.steps_student {
            let l = engine.step()?;
            rows.push(LossReport {
                step: (config.steps_teacher + step) as u64,
                adv: l.adv,
                kd: l.kd,
                cdc: l.cdc,
                r1: l.r1,
                total: student_total(l.adv, l.kd, l.cdc, &config.weights),
            });
        }
    }

    let ckpt = task_dir.join("student");
    save_generator(student, &ckpt.join("generator"))?;
    save_discriminator(&disc, &ckpt.join("discriminator"))?;
    write_losses_csv(&task_dir.join("losses.csv"), &rows, true)?;
    write_sample_grid(
        student,
        derive_seed(config.seed, "stage-samples"),
        &task_dir.join("samples").join("student.png"),
    )?;

    let final_losses = *rows.last().expect("steps_student >= 1");
    if !final_losses.all_finite() {
        return Err(Error::Numeric(format!(
            "student stage for '{}' ended with non-finite losses",
            task.task_id()
        )));
    }
    Ok(StageReport {
        stage: Stage::Student,
        task_id: task.task_id().to_string(),
        final_losses,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint_path: ckpt,
        history: rows,
    })
}

// ---- forgetting audit -----------------------------------------------------------------

pub fn task_dir_name(task_id: &str) -> String {
    format!("task_{task_id}")
}

fn probe_archive_path(run_dir: &Path, task_id: &str) -> PathBuf {
    run_dir.join(task_dir_name(task_id)).join("probe_images.bin")
}

/// Regenerate probe images for every completed task and compare bit-exactly
/// against the images archived when that task finished.
pub fn forgetting_audit(
    student: &mut GeneratorModel<f32>,
    tasks_done: &[String],
    probe: &NoiseBatch<f32>,
    run_dir: &Path,
    checked_after: &str,
) -> Result<AuditReport> {
    let previous_active = student.active_task().map(str::to_string);
    let mut results = Vec::with_capacity(tasks_done.len());
    for task_id in tasks_done {
        let archive = probe_archive_path(run_dir, task_id);
        if !archive.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing probe archive {}", archive.display()),
            )));
        }
        let archived = read_tensor_blob(&archive)?;
        student.set_active_task(Some(task_id))?;
        let regenerated = student.generate(probe)?;
        let pass = regenerated.bits_eq(&archived);
        let max_abs_diff = if regenerated.shape() == archived.shape() {
            regenerated.max_abs_diff(&archived)
        } else {
            f64::INFINITY
        };
        results.push(AuditEntry {
            task_id: task_id.clone(),
            pass,
            max_abs_diff,
        });
    }
    student.set_active_task(previous_active.as_deref())?;
    Ok(AuditReport {
        checked_after: checked_after.to_string(),
        probe_seed: probe.seed(),
        results,
    })
}

// ---- sequence orchestration ----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub train: TrainConfig,
    pub generator: crate::model::GeneratorConfig,
    pub discriminator: crate::model::DiscriminatorConfig,
    pub probe_seed: u64,
    pub task_ids: Vec<String>,
}

/// Owns the cross-task student state for an ordered sequence of tasks.
pub struct SequenceRunner {
    run_dir: PathBuf,
    config: TrainConfig,
    source_g: GeneratorModel<f32>,
    source_d: DiscriminatorModel<f32>,
    student: GeneratorModel<f32>,
    probe: NoiseBatch<f32>,
    completed: Vec<String>,
}

impl SequenceRunner {
    pub fn new(
        run_dir: &Path,
        config: TrainConfig,
        source_g: GeneratorModel<f32>,
        source_d: DiscriminatorModel<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let mut student = crate::model::build_generator::<f32>(source_g.config().clone())?;
        student.clone_weights_from(&source_g)?;
        let probe_seed = derive_seed(config.seed, "probe");
        let probe = NoiseBatch::sample(8, source_g.config().latent_dim, probe_seed);
        fs::create_dir_all(run_dir)?;
        Ok(SequenceRunner {
            run_dir: run_dir.to_path_buf(),
            config,
            source_g,
            source_d,
            student,
            probe,
            completed: Vec::new(),
        })
    }

    /// Resume from an existing student checkpoint (for task-at-a-time CLI use).
    pub fn with_student(mut self, student: GeneratorModel<f32>) -> Result<Self> {
        if !student.config().arch_eq(self.source_g.config()) {
            return Err(Error::Consistency(
                "student architecture does not match the source".into(),
            ));
        }
        self.completed = student.task_ids();
        self.student = student;
        Ok(self)
    }

    pub fn student(&self) -> &GeneratorModel<f32> {
        &self.student
    }

    pub fn source_generator(&self) -> &GeneratorModel<f32> {
        &self.source_g
    }

    pub fn probe(&self) -> &NoiseBatch<f32> {
        &self.probe
    }

    pub fn completed(&self) -> &[String] {
        &self.completed
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    /// Teacher stage, student stage, probe archive, forgetting audit.
    pub fn train_task(&mut self, task: &TaskDataset<f32>) -> Result<TaskOutcome> {
        let source_g_before: Vec<Tensor<f32>> = self
            .source_g
            .all_params()
            .iter()
            .map(|(_, t)| (*t).clone())
            .collect();

        let task_dir = self.run_dir.join(task_dir_name(task.task_id()));
        fs::create_dir_all(&task_dir)?;

        let teacher = train_teacher(&self.source_g, &self.source_d, task, &self.config, &task_dir)?;
        let student_report = train_student(
            &mut self.student,
            &self.source_g,
            &self.source_d,
            &teacher,
            task,
            &self.config,
            &task_dir,
        )?;

        // frozen-source contract: training must never touch the source
        for (before, (name, after)) in source_g_before.iter().zip(self.source_g.all_params()) {
            if !before.bits_eq(after) {
                return Err(Error::Consistency(format!(
                    "source generator parameter '{name}' changed during task '{}'",
                    task.task_id()
                )));
            }
        }

        // archive probe outputs for the just-finished task
        self.student.set_active_task(Some(task.task_id()))?;
        let probe_images = self.student.generate(&self.probe)?;
        write_tensor_blob(&probe_archive_path(&self.run_dir, task.task_id()), &probe_images)?;

        self.completed.push(task.task_id().to_string());
        let audit = forgetting_audit(
            &mut self.student,
            &self.completed.clone(),
            &self.probe,
            &self.run_dir,
            task.task_id(),
        )?;
        fs::write(
            task_dir.join("audit.json"),
            serde_json::to_string_pretty(&audit).unwrap() + "\n",
        )?;
        if !audit.all_pass() {
            let failed: Vec<&str> = audit
                .results
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.task_id.as_str())
                .collect();
            return Err(Error::Audit(format!(
                "forgetting audit failed after task '{}' for earlier task(s): {}",
                task.task_id(),
                failed.join(", ")
            )));
        }

        Ok(TaskOutcome {
            task_id: task.task_id().to_string(),
            teacher: teacher.report,
            student: student_report,
            audit,
        })
    }
}

/// Run the full two-stage pipeline over an ordered task list. The final
/// artifact is one student generator carrying one adapter bank per task.
pub fn run_sequence(
    tasks: &[TaskDataset<f32>],
    config: &TrainConfig,
    source_g: GeneratorModel<f32>,
    source_d: DiscriminatorModel<f32>,
    run_dir: &Path,
) -> Result<SequenceReport> {
    if tasks.is_empty() {
        return Err(Error::Argument("task list is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        if !seen.insert(t.task_id().to_string()) {
            return Err(Error::Argument(format!("duplicate task id '{}'", t.task_id())));
        }
    }

    let manifest = RunManifest {
        schema_version: 1,
        train: config.clone(),
        generator: source_g.config().clone(),
        discriminator: source_d.config().clone(),
        probe_seed: derive_seed(config.seed, "probe"),
        task_ids: tasks.iter().map(|t| t.task_id().to_string()).collect(),
    };
    fs::create_dir_all(run_dir)?;
    fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(&manifest).unwrap() + "\n",
    )?;

    let mut runner = SequenceRunner::new(run_dir, config.clone(), source_g, source_d)?;
    let mut outcomes = Vec::with_capacity(tasks.len());
    for task in tasks {
        outcomes.push(runner.train_task(task)?);
    }
    let student_checkpoint = outcomes
        .last()
        .map(|o| o.student.checkpoint_path.join("generator"))
        .expect("non-empty");
    Ok(SequenceReport {
        tasks: outcomes,
        student_checkpoint,
    })
}
