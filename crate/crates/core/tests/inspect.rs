//! Visual inspection probe: dumps sample grids during source pretraining.
//! Run explicitly:
//!
//! ```text
//! INSPECT_STEPS=1200 cargo test -p contigan --test inspect -- --ignored --nocapture
//! ```

use contigan::data::synth::{source_dataset, SOURCE_CLASSES};
use contigan::data::{tile_grid, write_image_png};
use contigan::metrics::{evaluate_task, FeatureExtractor};
use contigan::model::{
    build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig, NoiseBatch,
};
use contigan::trainer::{pretrain_source, TrainConfig};

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore = "manual visual probe"]
fn inspect_pretrain() {
    let res = 32;
    let latent = 64;
    let gbase = env_usize("INSPECT_GBASE", 32);
    let dbase = env_usize("INSPECT_DBASE", 8);
    let total = env_usize("INSPECT_STEPS", 1200);
    let chunk = env_usize("INSPECT_CHUNK", 200);
    let batch = env_usize("INSPECT_BATCH", 8);
    let lr_d = std::env::var("INSPECT_LRD").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-4);

    let out = std::path::PathBuf::from("target/inspect");
    std::fs::create_dir_all(&out).unwrap();

    let gen_cfg = GeneratorConfig {
        latent_dim: latent,
        out_resolution: res,
        out_channels: 1,
        base_channels: gbase,
        seed: 7,
    };
    let corpus = source_dataset::<f32>(&SOURCE_CLASSES, 240, res, 1);
    // real-data grid for reference
    let idx: Vec<usize> = (0..16).map(|i| i * 67 % corpus.len()).collect();
    write_image_png(&tile_grid(&corpus.batch(&idx)), &out.join("real.png")).unwrap();

    let extractor = FeatureExtractor::<f32>::for_input(res, 1).unwrap();
    let eval_set = source_dataset::<f32>(&SOURCE_CLASSES, 20, res, 999);
    let probe = NoiseBatch::sample(16, latent, 5555);

    let mut gen = build_generator::<f32>(gen_cfg.clone()).unwrap();
    let mut disc = build_discriminator::<f32>(DiscriminatorConfig {
        in_resolution: res,
        in_channels: 1,
        base_channels: dbase,
        seed: 8,
    })
    .unwrap();
    write_image_png(&tile_grid(&gen.generate(&probe).unwrap()), &out.join("step_00000.png")).unwrap();
    let m = evaluate_task(&gen, &eval_set, 64, 1234, &extractor).unwrap();
    println!("step 0: fid {:.3} b_lpips {:.3}", m.fid, m.b_lpips);

    let mut done = 0;
    while done < total {
        let steps = chunk.min(total - done);
        let config = TrainConfig {
            steps_source: steps,
            batch_size: batch,
            cdc_batch: batch,
            lr_d,
            seed: 1000 + done as u64, // fresh stream per chunk; fine for inspection
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let art = pretrain_source(&corpus, gen, disc, &config, dir.path()).unwrap();
        gen = art.generator;
        disc = art.discriminator;
        done += steps;
        write_image_png(
            &tile_grid(&gen.generate(&probe).unwrap()),
            &out.join(format!("step_{done:05}.png")),
        )
        .unwrap();
        let m = evaluate_task(&gen, &eval_set, 64, 1234, &extractor).unwrap();
        // read the tail of the loss csv for adv/r1
        let csv = std::fs::read_to_string(dir.path().join("source/losses.csv")).unwrap();
        let last = csv.lines().last().unwrap().to_string();
        println!("step {done}: fid {:.3} b_lpips {:.3} | last row: {last}", m.fid, m.b_lpips);
    }
}
