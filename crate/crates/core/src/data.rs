//! Dataset ingestion, task registry, deterministic few-shot subsetting,
//! noise sampling, and a procedurally generated toy-shape corpus.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, ImageBuffer, Luma, Rgb};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NoiseBatch;
use crate::tensor::{Scalar, Tensor};

/// Images of one task, normalized to [-1, 1], all sharing one shape.
#[derive(Clone, Debug)]
pub struct TaskDataset<T: Scalar> {
    task_id: String,
    images: Vec<Tensor<T>>, // each [c, h, w]
    resolution: usize,
    channels: usize,
}

impl<T: Scalar> TaskDataset<T> {
    pub fn new(task_id: &str, images: Vec<Tensor<T>>, resolution: usize, channels: usize) -> Result<Self> {
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [channels, resolution, resolution] {
                return Err(Error::Data(format!(
                    "image {i} of task '{task_id}' has shape {:?}, expected [{channels}, {resolution}, {resolution}]",
                    img.shape()
                )));
            }
            if img.iter().any(|v| {
                let x = v.to_f64_lossy();
                !(-1.0..=1.0).contains(&x)
            }) {
                return Err(Error::Data(format!("image {i} of task '{task_id}' has pixels outside [-1, 1]")));
            }
        }
        Ok(TaskDataset {
            task_id: task_id.to_string(),
            images,
            resolution,
            channels,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image(&self, i: usize) -> &Tensor<T> {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    /// Stack selected images into a `[b, c, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.channels * self.resolution * self.resolution;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::from_vec(data, &[indices.len(), self.channels, self.resolution, self.resolution])
    }

    /// All images as one `[n, c, h, w]` batch.
    pub fn stacked(&self) -> Tensor<T> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Identity, file set, shot count, and position of one task in a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub image_paths: Vec<PathBuf>,
    pub n_shots: usize,
    pub position: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_shots < 1 {
            return Err(Error::Argument(format!("task '{}' has n_shots = 0", self.task_id)));
        }
        Ok(())
    }
}

/// Ordered, unique-id map of task specs.
#[derive(Clone, Debug, Default)]
pub struct TaskRegistry {
    tasks: IndexMap<String, TaskSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTask {
    task_id: String,
    path: PathBuf,
    #[serde(default = "default_shots")]
    n_shots: usize,
}

fn default_shots() -> usize {
    10
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskManifest {
    schema_version: u32,
    tasks: Vec<ManifestTask>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, spec: TaskSpec) -> Result<()> {
        spec.validate()?;
        if self.tasks.contains_key(&spec.task_id) {
            return Err(Error::Conflict(format!("duplicate task id '{}'", spec.task_id)));
        }
        self.tasks.insert(spec.task_id.clone(), spec);
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.get(task_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Load a task manifest: ordered task list with ids, image directories,
    /// and shot counts. Directory contents are resolved to sorted file paths.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read task manifest {}: {e}", path.display())))?;
        let manifest: TaskManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad task manifest {}: {e}", path.display())))?;
        if manifest.schema_version != 1 {
            return Err(Error::Format(format!(
                "unsupported task manifest schema_version {}",
                manifest.schema_version
            )));
        }
        let mut reg = TaskRegistry::new();
        for (position, t) in manifest.tasks.into_iter().enumerate() {
            let image_paths = list_image_files(&t.path)?;
            reg.insert(TaskSpec {
                task_id: t.task_id,
                image_paths,
                n_shots: t.n_shots,
                position,
            })?;
        }
        Ok(reg)
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

/// Image files in a directory, sorted by file name for a deterministic
/// order regardless of filesystem enumeration.
pub fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn decode_image<T: Scalar>(path: &Path, resolution: usize, channels: usize) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode image {}: {e}", path.display())))?;
    Ok(normalize_image(&img, resolution, channels))
}

/// Center-crop square, resize, normalize to [-1, 1].
fn normalize_image<T: Scalar>(img: &DynamicImage, resolution: usize, channels: usize) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = if side == resolution as u32 {
        cropped
    } else {
        cropped.resize_exact(resolution as u32, resolution as u32, FilterType::Triangle)
    };
    let res = resolution;
    let norm = |v: u8| T::of(f64::from(v) / 127.5 - 1.0);
    let mut data = vec![T::zero(); channels * res * res];
    if channels == 1 {
        let gray = resized.to_luma8();
        for (i, p) in gray.pixels().enumerate() {
            data[i] = norm(p.0[0]);
        }
    } else {
        let rgb = resized.to_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * res * res + i] = norm(p.0[c]);
            }
        }
    }
    Tensor::from_vec(data, &[channels, res, res])
}

/// Write one normalized image tensor `[c, h, w]` as a PNG.
pub fn write_image_png<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let s = img.shape();
    assert_eq!(s.len(), 3, "write_image_png expects [c, h, w]");
    let (c, h, w) = (s[0], s[1], s[2]);
    let denorm = |v: T| ((v.to_f64_lossy() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    if c == 1 {
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([denorm(img.data()[y as usize * w + x as usize])])
        });
        buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    } else {
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([
                denorm(img.data()[i]),
                denorm(img.data()[h * w + i]),
                denorm(img.data()[2 * h * w + i]),
            ])
        });
        buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}

/// Tile a `[n, c, h, w]` batch into one grid image `[c, rows*h, cols*w]`.
pub fn tile_grid<T: Scalar>(batch: &Tensor<T>) -> Tensor<T> {
    let s = batch.shape();
    assert_eq!(s.len(), 4);
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut out = Tensor::filled(&[c, rows * h, cols * w], T::of(-1.0));
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = batch.data()[((i * c + ci) * h + y) * w + x];
                    let oy = r * h + y;
                    let ox = col * w + x;
                    out.data_mut()[(ci * rows * h + oy) * cols * w + ox] = src;
                }
            }
        }
    }
    out
}

/// Load a task's images from a directory: decoded, center-cropped square,
/// resized, normalized to [-1, 1], in lexicographic file order.
pub fn load_task<T: Scalar>(
    dir: &Path,
    task_id: &str,
    resolution: usize,
    channels: usize,
) -> Result<TaskDataset<T>> {
    let files = list_image_files(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        images.push(decode_image(f, resolution, channels)?);
    }
    TaskDataset::new(task_id, images, resolution, channels)
}

/// Deterministic seeded sample of `n` images without replacement, returned
/// in ascending original order.
pub fn few_shot_subset<T: Scalar>(dataset: &TaskDataset<T>, n: usize, seed: u64) -> Result<TaskDataset<T>> {
    if n > dataset.len() {
        return Err(Error::Argument(format!(
            "cannot take {n} shots from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    // partial Fisher-Yates: the first n slots become the sample
    for i in 0..n {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen = indices[..n].to_vec();
    chosen.sort_unstable();
    let images = chosen.iter().map(|&i| dataset.image(i).clone()).collect();
    TaskDataset::new(dataset.task_id(), images, dataset.resolution(), dataset.channels())
}

/// i.i.d. standard normal noise batch, reproducible by seed.
pub fn sample_noise<T: Scalar>(n: usize, latent_dim: usize, seed: u64) -> NoiseBatch<T> {
    NoiseBatch::sample(n, latent_dim, seed)
}

pub mod synth {
    //! Procedural grayscale shape corpus: a diverse multi-class source set
    //! and tight single-class few-shot task sets, rendered from smooth
    //! signed-distance functions. Fully deterministic given a seed.

    use super::*;

    #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum ShapeClass {
        Disk,
        Square,
        Cross,
        Stripes,
        Checker,
        Ring,
        Diamond,
        Dots,
    }

    impl ShapeClass {
        pub fn parse(s: &str) -> Result<Self> {
            match s {
                "disk" => Ok(ShapeClass::Disk),
                "square" => Ok(ShapeClass::Square),
                "cross" => Ok(ShapeClass::Cross),
                "stripes" => Ok(ShapeClass::Stripes),
                "checker" => Ok(ShapeClass::Checker),
                "ring" => Ok(ShapeClass::Ring),
                "diamond" => Ok(ShapeClass::Diamond),
                "dots" => Ok(ShapeClass::Dots),
                other => Err(Error::Argument(format!("unknown shape class '{other}'"))),
            }
        }
    }

    /// Classes used for the large diverse source corpus.
    pub const SOURCE_CLASSES: [ShapeClass; 5] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Cross,
        ShapeClass::Stripes,
        ShapeClass::Checker,
    ];

    /// Held-out classes for few-shot tasks.
    pub const TASK_CLASSES: [ShapeClass; 3] = [ShapeClass::Ring, ShapeClass::Diamond, ShapeClass::Dots];

    pub struct Params {
        cx: f64,
        cy: f64,
        size: f64,
        aux: f64,
        angle: f64,
        fg: f64,
        bg: f64,
    }

    fn draw_params(rng: &mut ChaCha8Rng, jitter: f64) -> Params {
        // diverse sets (jitter >= 0.5) flip polarity half the time, which
        // spreads pairwise pixel cosines over [-1, 1] instead of letting a
        // shared background dominate every inner product
        let invert = jitter >= 0.5 && rng.gen_bool(0.5);
        let mut u = |spread: f64| rng.gen_range(-1.0..1.0) * spread * jitter;
        let fg = (0.8 + u(0.15)).clamp(-1.0, 1.0);
        let bg = (-0.8 - u(0.15)).clamp(-1.0, 1.0);
        Params {
            cx: u(0.35),
            cy: u(0.35),
            size: 0.5 + u(0.2),
            aux: 0.16 + u(0.07),
            angle: u(std::f64::consts::PI),
            fg: if invert { -fg } else { fg },
            bg: if invert { -bg } else { bg },
        }
    }

    fn coverage(sdf: f64, aa: f64) -> f64 {
        (0.5 - sdf / (2.0 * aa)).clamp(0.0, 1.0)
    }

    /// Render one shape into a `[1, res, res]` tensor in [-1, 1].
    pub fn render_shape<T: Scalar>(class: ShapeClass, res: usize, p: &Params) -> Tensor<T> {
        let aa = 3.0 / res as f64;
        let mut data = vec![T::zero(); res * res];
        for y in 0..res {
            for x in 0..res {
                // normalized coordinates in [-1, 1]
                let u = (x as f64 + 0.5) / res as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / res as f64 * 2.0 - 1.0;
                let (dx, dy) = (u - p.cx, v - p.cy);
                let cov = match class {
                    ShapeClass::Disk => coverage((dx * dx + dy * dy).sqrt() - p.size * 0.8, aa),
                    ShapeClass::Square => coverage(dx.abs().max(dy.abs()) - p.size * 0.7, aa),
                    ShapeClass::Diamond => coverage(dx.abs() + dy.abs() - p.size * 0.9, aa),
                    ShapeClass::Cross => {
                        let arm = p.aux;
                        let len = p.size;
                        let h = (dx.abs() - len).max(dy.abs() - arm);
                        let ver = (dy.abs() - len).max(dx.abs() - arm);
                        coverage(h.min(ver), aa)
                    }
                    ShapeClass::Ring => {
                        let r = (dx * dx + dy * dy).sqrt();
                        coverage((r - p.size * 0.7).abs() - p.aux, aa)
                    }
                    ShapeClass::Stripes => {
                        let t = u * p.angle.cos() + v * p.angle.sin();
                        let s = (t * (4.0 + 4.0 * p.size) * std::f64::consts::PI + p.cx * 6.0).sin();
                        coverage(-s * 0.25, aa)
                    }
                    ShapeClass::Checker => {
                        let freq = 2.0 + 2.0 * p.size;
                        let a = ((u + p.cx) * freq * std::f64::consts::PI).sin();
                        let b = ((v + p.cy) * freq * std::f64::consts::PI).sin();
                        coverage(-(a * b) * 0.3, aa)
                    }
                    ShapeClass::Dots => {
                        let r = p.aux + 0.05;
                        let d1 = ((dx - 0.3).powi(2) + (dy - 0.3).powi(2)).sqrt() - r;
                        let d2 = ((dx + 0.3).powi(2) + (dy + 0.3).powi(2)).sqrt() - r;
                        let d3 = ((dx + 0.3).powi(2) + (dy - 0.3).powi(2)).sqrt() - r;
                        coverage(d1.min(d2).min(d3), aa)
                    }
                };
                data[y * res + x] = T::of(p.bg + (p.fg - p.bg) * cov);
            }
        }
        Tensor::from_vec(data, &[1, res, res])
    }

    /// `n` renders of one class. `jitter` in [0, 1] scales parameter spread:
    /// 1.0 gives a diverse set, ~0.15 a tight few-shot-style cluster.
    pub fn class_dataset<T: Scalar>(
        class: ShapeClass,
        n: usize,
        res: usize,
        seed: u64,
        jitter: f64,
    ) -> TaskDataset<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| {
                let p = draw_params(&mut rng, jitter);
                render_shape(class, res, &p)
            })
            .collect();
        TaskDataset::new(&format!("{class:?}").to_lowercase(), images, res, 1)
            .expect("synthetic images are in range by construction")
    }

    /// Large diverse source corpus: `n_per_class` renders of each class,
    /// interleaved.
    pub fn source_dataset<T: Scalar>(
        classes: &[ShapeClass],
        n_per_class: usize,
        res: usize,
        seed: u64,
    ) -> TaskDataset<T> {
        let per: Vec<TaskDataset<T>> = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| class_dataset(c, n_per_class, res, seed.wrapping_add(i as u64 * 7919), 1.0))
            .collect();
        let mut images = Vec::with_capacity(classes.len() * n_per_class);
        for i in 0..n_per_class {
            for d in &per {
                images.push(d.image(i).clone());
            }
        }
        TaskDataset::new("source", images, res, 1).expect("in range by construction")
    }

    /// Write a dataset into a directory as zero-padded PNGs.
    pub fn write_dataset_pngs<T: Scalar>(dataset: &TaskDataset<T>, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for i in 0..dataset.len() {
            write_image_png(dataset.image(i), &dir.join(format!("{i:05}.png")))?;
        }
        Ok(())
    }
}
