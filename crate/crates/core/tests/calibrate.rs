//! Manual calibration probe for the trend-based acceptance checks.
//! Run explicitly:
//!
//! ```text
//! CAL_SRC=800 CAL_STEPS=200 CAL_SEEDS=2 cargo test -p contigan --test calibrate -- --ignored --nocapture
//! ```

use std::time::Instant;

use contigan::data::synth::{class_dataset, source_dataset, ShapeClass, SOURCE_CLASSES};
use contigan::data::TaskDataset;
use contigan::error::Result;
use contigan::losses::{kd_loss, LossWeights};
use contigan::metrics::{evaluate_task, mean_pairwise_lpips, FeatureExtractor, SampleSource};
use contigan::model::{
    build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig, ImageBatch,
    NoiseBatch,
};
use contigan::trainer::{pretrain_source, train_student, train_teacher, TrainConfig};

const RES: usize = 32;
const LATENT: usize = 64;

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

struct Memorizer {
    images: Vec<contigan::tensor::Tensor<f32>>,
}

impl SampleSource<f32> for Memorizer {
    fn latent_dim(&self) -> usize {
        LATENT
    }
    fn sample_images(&self, noise: &NoiseBatch<f32>) -> Result<ImageBatch<f32>> {
        let n = noise.batch_size();
        let per = self.images[0].numel();
        let mut data = Vec::with_capacity(n * per);
        for i in 0..n {
            data.extend_from_slice(self.images[i % self.images.len()].data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.images[0].shape());
        Ok(contigan::tensor::Tensor::from_vec(data, &shape))
    }
}

#[test]
#[ignore = "manual calibration probe"]
fn calibrate() {
    let src_steps = env_usize("CAL_SRC", 800);
    let stage_steps = env_usize("CAL_STEPS", 200);
    let n_seeds = env_usize("CAL_SEEDS", 2);
    let gbase = env_usize("CAL_GBASE", 48);
    let dbase = env_usize("CAL_DBASE", 12);

    let gen_cfg = GeneratorConfig {
        latent_dim: LATENT,
        out_resolution: RES,
        out_channels: 1,
        base_channels: gbase,
        seed: 7,
    };
    let disc_cfg = DiscriminatorConfig {
        in_resolution: RES,
        in_channels: 1,
        base_channels: dbase,
        seed: 8,
    };
    let config = TrainConfig {
        steps_source: src_steps,
        steps_teacher: stage_steps,
        steps_student: stage_steps,
        ..Default::default()
    };
    let extractor = FeatureExtractor::<f32>::for_input(RES, 1).unwrap();

    let corpus = source_dataset::<f32>(&SOURCE_CLASSES, 240, RES, 1);
    println!("source corpus: {} images", corpus.len());

    let dir = tempfile::tempdir().unwrap();
    let untrained = build_generator::<f32>(gen_cfg.clone()).unwrap();
    let source_eval: TaskDataset<f32> = source_dataset(&SOURCE_CLASSES, 20, RES, 999);
    let fid_untrained = evaluate_task(&untrained, &source_eval, 64, 1234, &extractor).unwrap();

    let t0 = Instant::now();
    let art = pretrain_source(
        &corpus,
        untrained,
        build_discriminator::<f32>(disc_cfg).unwrap(),
        &config,
        dir.path(),
    )
    .unwrap();
    println!(
        "pretrain {} steps: {:.1}s ({:.0} ms/step)",
        src_steps,
        t0.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64() / src_steps as f64 * 1e3
    );
    let fid_trained = evaluate_task(&art.generator, &source_eval, 64, 1234, &extractor).unwrap();
    println!(
        "source FID untrained {:.3} -> trained {:.3} | b_lpips {:.4} -> {:.4}",
        fid_untrained.fid, fid_trained.fid, fid_untrained.b_lpips, fid_trained.b_lpips
    );

    let task = class_dataset::<f32>(ShapeClass::Ring, 10, RES, 42, 0.15);
    let train_pairwise = mean_pairwise_lpips(&task.stacked(), &extractor).unwrap();
    println!("task train-set pairwise lpips: {:.4}", train_pairwise);

    let mem = Memorizer {
        images: task.images().to_vec(),
    };
    let mem_report = evaluate_task(&mem, &task, 60, 777, &extractor).unwrap();
    println!(
        "memorizer: b_lpips {:.4}, mean_pairwise {:.4}, fid {:.3}",
        mem_report.b_lpips, mem_report.mean_pairwise_lpips, mem_report.fid
    );

    let src_fid_on_task = evaluate_task(&art.generator, &task, 60, 777, &extractor).unwrap();
    println!(
        "source on task: fid {:.3}, b_lpips {:.4}",
        src_fid_on_task.fid, src_fid_on_task.b_lpips
    );

    for seed in 0..n_seeds as u64 {
        let t1 = Instant::now();
        for wt in [0.0, 40.0] {
            let cfg = TrainConfig {
                seed,
                weights: LossWeights {
                    w_t: wt,
                    ..Default::default()
                },
                ..config.clone()
            };
            let tdir = dir.path().join(format!("t_wt{wt}_s{seed}"));
            let teacher = train_teacher(&art.generator, &art.discriminator, &task, &cfg, &tdir).unwrap();
            let rep = evaluate_task(&teacher.generator, &task, 60, 777, &extractor).unwrap();
            println!(
                "seed {seed} teacher wt={wt:>4}: fid {:.3}, b_lpips {:.4}, adv {:.3}, cdc {:.4} ({:.0}s)",
                rep.fid,
                rep.b_lpips,
                teacher.report.final_losses.adv,
                teacher.report.final_losses.cdc,
                t1.elapsed().as_secs_f64()
            );
        }
    }

    // student arms: (alpha, w_s) in {(2,20), (2,0), (0,20)}
    let eval_noise = NoiseBatch::sample(64, LATENT, 31337);
    for seed in 0..n_seeds as u64 {
        let cfg_teach = TrainConfig {
            seed,
            ..config.clone()
        };
        let tdir = dir.path().join(format!("s_teacher_s{seed}"));
        let teacher = train_teacher(&art.generator, &art.discriminator, &task, &cfg_teach, &tdir).unwrap();
        for (alpha, ws) in [(2.0, 20.0), (2.0, 0.0), (0.0, 20.0)] {
            let cfg = TrainConfig {
                seed,
                weights: LossWeights {
                    alpha,
                    w_s: ws,
                    ..Default::default()
                },
                ..config.clone()
            };
            let sdir = dir.path().join(format!("s_a{alpha}_w{ws}_s{seed}"));
            let mut student = build_generator::<f32>(gen_cfg.clone()).unwrap();
            student.clone_weights_from(&art.generator).unwrap();
            let t2 = Instant::now();
            let rep = train_student(
                &mut student,
                &art.generator,
                &art.discriminator,
                &teacher,
                &task,
                &cfg,
                &sdir,
            )
            .unwrap();
            let m = evaluate_task(&student, &task, 60, 777, &extractor).unwrap();
            let t_out = teacher.generator.generate(&eval_noise).unwrap();
            student.set_active_task(Some(task.task_id())).unwrap();
            let s_out = student.generate(&eval_noise).unwrap();
            let dist = kd_loss(&t_out, &s_out).unwrap();
            println!(
                "seed {seed} student alpha={alpha} ws={ws:>4}: fid {:.3}, b_lpips {:.4}, kd_dist {:.4}, kd_first {:.4} kd_last {:.4} ({:.0}s)",
                m.fid,
                m.b_lpips,
                dist,
                rep.history.first().unwrap().kd,
                rep.history.last().unwrap().kd,
                t2.elapsed().as_secs_f64()
            );
        }
    }
}
