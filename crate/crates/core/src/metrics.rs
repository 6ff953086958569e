//! Quantitative evaluation: Fréchet distance between Gaussian feature fits
//! for fidelity, and pairwise perceptual distances for diversity.
//!
//! Features come from a small fixed-weight convolutional stack whose weights
//! are generated from a constant seed and written alongside results as a
//! versioned blob. Scores are deterministic and internally comparable across
//! runs of this crate, but NOT numerically comparable to published values
//! computed with large pretrained classifiers.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_tensor_blob;
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{GeneratorModel, ImageBatch, NoiseBatch};
use crate::tensor::{Scalar, Tensor};

/// Version tag of the feature extractor; recorded in every metric report.
pub const EXTRACTOR_VERSION: &str = "rfx-1";
const EXTRACTOR_SEED: u64 = 0x0F_EA_7E_5E;
const LPIPS_EPS: f64 = 1e-10;

/// Anything that can turn a noise batch into images (generators, and test
/// doubles such as a training-set memorizer).
pub trait SampleSource<T: Scalar> {
    fn latent_dim(&self) -> usize;
    fn sample_images(&self, noise: &NoiseBatch<T>) -> Result<ImageBatch<T>>;
}

impl<T: Scalar> SampleSource<T> for GeneratorModel<T> {
    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn sample_images(&self, noise: &NoiseBatch<T>) -> Result<ImageBatch<T>> {
        self.generate(noise)
    }
}

/// Fixed-weight convolutional feature stack. Never trained; identical
/// outputs for identical inputs across runs.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Scalar> {
    in_channels: usize,
    resolution: usize,
    layers: Vec<(Tensor<T>, Tensor<T>)>, // conv w [co,ci,3,3], bias [co]
    feature_dim: usize,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Deterministic construction from the crate-constant seed.
    pub fn for_input(resolution: usize, in_channels: usize) -> Result<Self> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "extractor resolution must be a power of two >= 8, got {resolution}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED ^ (resolution as u64) << 8 ^ in_channels as u64);
        let depth = (resolution / 4).trailing_zeros() as usize;
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for i in 0..depth {
            let cout = (16usize << i).min(64);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let n = cout * cin * 9;
            let w = Tensor::from_vec(
                (0..n)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        T::of(v * std)
                    })
                    .collect(),
                &[cout, cin, 3, 3],
            );
            let b = Tensor::from_vec(
                (0..cout)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        T::of(v * 0.1)
                    })
                    .collect(),
                &[cout],
            );
            layers.push((w, b));
            cin = cout;
        }
        Ok(FeatureExtractor {
            in_channels,
            resolution,
            layers,
            feature_dim: cin,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn version(&self) -> &'static str {
        EXTRACTOR_VERSION
    }

    /// Per-layer post-activation feature maps for a batch, each
    /// `[n, c_l, h_l, w_l]` (before pooling), plus nothing else.
    pub fn feature_maps(&self, images: &ImageBatch<T>) -> Result<Vec<Tensor<T>>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::Shape(format!(
                "extractor expects [n, {}, {}, {}], got {s:?}",
                self.in_channels, self.resolution, self.resolution
            )));
        }
        let mut g: Graph<T> = Graph::new();
        let mut h = g.constant(images.clone());
        let mut maps = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let wid = g.constant(w.clone());
            let bid = g.constant(b.clone());
            h = g.conv2d(h, wid);
            h = g.add_channel(h, bid);
            h = g.leaky_relu(h, T::of(0.2));
            maps.push(g.value(h).clone());
            let pooled = g.sum_pool2(h);
            h = g.scale(pooled, T::of(0.25));
        }
        Ok(maps)
    }

    /// Pooled feature vectors `[n, feature_dim]`: global mean over the last
    /// feature map's spatial grid.
    pub fn features(&self, images: &ImageBatch<T>) -> Result<Tensor<T>> {
        let maps = self.feature_maps(images)?;
        let last = maps.last().expect("at least one layer");
        let s = last.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::of(1.0 / hw as f64);
        let mut out = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mut acc = T::zero();
                for i in 0..hw {
                    acc = acc + last.data()[base + i];
                }
                out.data_mut()[ni * c + ci] = acc * inv;
            }
        }
        Ok(out)
    }

    /// Materialize the extractor weights as versioned blobs under `dir`.
    pub fn save_blob(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            write_tensor_blob(&dir.join(format!("layer{i}_w.bin")), &w.map(|v| v.to_f64_lossy() as f32))?;
            write_tensor_blob(&dir.join(format!("layer{i}_b.bin")), &b.map(|v| v.to_f64_lossy() as f32))?;
        }
        std::fs::write(
            dir.join("version.json"),
            serde_json::json!({ "extractor_version": EXTRACTOR_VERSION }).to_string() + "\n",
        )?;
        Ok(())
    }
}

// ---- Gaussian statistics and Fréchet distance ----------------------------------

/// Sample mean and unbiased covariance of feature rows.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

pub fn gaussian_stats<T: Scalar>(features: &Tensor<T>) -> Result<GaussianStats> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Argument(format!("features must be [n, d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 feature rows, got {n}")));
    }
    let data = features.data();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += data[i * d + j].to_f64_lossy();
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        for a in 0..d {
            let da = data[i * d + a].to_f64_lossy() - mean[a];
            for b in a..d {
                let db = data[i * d + b].to_f64_lossy() - mean[b];
                cov[a * d + b] += da * db;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(GaussianStats { mean, cov, dim: d })
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clipped at 0.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussian fits:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at 0.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Argument(format!("stat dims differ: {} vs {}", a.dim, b.dim)));
    }
    let d = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    // tr((Sa Sb)^(1/2)) computed through the symmetrized product
    // Sa^(1/2) Sb Sa^(1/2), which is PSD up to roundoff
    let ra = sqrtm_psd(&sa);
    let inner = &ra * &sb * &ra;
    let root = sqrtm_psd(&inner);
    let tr_root = root.trace();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_root;
    Ok(value.max(0.0))
}

// ---- perceptual distances ---------------------------------------------------------

/// Channel-unit-normalized copies of per-layer feature maps for one image.
type NormalizedMaps = Vec<Tensor<f64>>;

fn normalize_maps<T: Scalar>(maps: &[Tensor<T>], index: usize) -> NormalizedMaps {
    maps.iter()
        .map(|m| {
            let s = m.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let src = &m.data()[index * c * hw..(index + 1) * c * hw];
            let mut out = Tensor::zeros(&[c, s[2], s[3]]);
            for i in 0..hw {
                let mut norm = 0.0f64;
                for ci in 0..c {
                    let v = src[ci * hw + i].to_f64_lossy();
                    norm += v * v;
                }
                let inv = 1.0 / (norm.sqrt() + LPIPS_EPS);
                for ci in 0..c {
                    out.data_mut()[ci * hw + i] = src[ci * hw + i].to_f64_lossy() * inv;
                }
            }
            out
        })
        .collect()
}

fn maps_distance(a: &NormalizedMaps, b: &NormalizedMaps) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(ma, mb)| {
            let s = ma.shape();
            let hw = s[1] * s[2];
            let mut acc = 0.0;
            for (x, y) in ma.data().iter().zip(mb.data().iter()) {
                let d = x - y;
                acc += d * d;
            }
            acc / hw as f64 // spatial average; channel and layer sums remain
        })
        .sum()
}

/// Perceptual distance between two single images `[c, h, w]`:
/// channel-normalized feature differences, squared, spatially averaged,
/// layer-summed. Zero iff the inputs are identical.
pub fn perceptual_distance<T: Scalar>(
    img_a: &Tensor<T>,
    img_b: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<f64> {
    if img_a.shape() != img_b.shape() {
        return Err(Error::Argument(format!(
            "image shapes differ: {:?} vs {:?}",
            img_a.shape(),
            img_b.shape()
        )));
    }
    let batch = |img: &Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(img.shape());
        img.reshaped(&shape)
    };
    let ma = extractor.feature_maps(&batch(img_a))?;
    let mb = extractor.feature_maps(&batch(img_b))?;
    Ok(maps_distance(&normalize_maps(&ma, 0), &normalize_maps(&mb, 0)))
}

fn batch_normalized_maps<T: Scalar>(
    images: &ImageBatch<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<Vec<NormalizedMaps>> {
    let n = images.shape()[0];
    // bounded chunks keep tape memory flat for large sample sets
    let chunk = 32usize;
    let per = images.numel() / n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let sub = Tensor::from_vec(
            images.data()[start * per..end * per].to_vec(),
            &[end - start, images.shape()[1], images.shape()[2], images.shape()[3]],
        );
        let maps = extractor.feature_maps(&sub)?;
        for i in 0..end - start {
            out.push(normalize_maps(&maps, i));
        }
        start = end;
    }
    Ok(out)
}

/// Mean perceptual distance over all unordered pairs of the batch.
pub fn mean_pairwise_lpips<T: Scalar>(
    images: &ImageBatch<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<f64> {
    let n = images.shape()[0];
    if n < 2 {
        return Err(Error::Argument(format!("need >= 2 images, got {n}")));
    }
    let maps = batch_normalized_maps(images, extractor)?;
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            acc += maps_distance(&maps[i], &maps[j]);
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// Balanced cluster diversity score: generated images are assigned to their
/// nearest training image in pooled feature space; clusters with at least
/// two members contribute their mean pairwise perceptual distance, and the
/// score is the average over contributing clusters (0 if none contribute).
pub fn b_lpips<T: Scalar>(
    images: &ImageBatch<T>,
    train: &TaskDataset<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<f64> {
    let n = images.shape()[0];
    if n < 2 {
        return Err(Error::Argument(format!("need >= 2 generated images, got {n}")));
    }
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let gen_feat = extractor.features(images)?;
    let train_feat = extractor.features(&train.stacked())?;
    let d = extractor.feature_dim();
    let k = train.len();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        let gi = &gen_feat.data()[i * d..(i + 1) * d];
        let mut best = (0usize, f64::INFINITY);
        for t in 0..k {
            let ti = &train_feat.data()[t * d..(t + 1) * d];
            let dist: f64 = gi
                .iter()
                .zip(ti.iter())
                .map(|(a, b)| {
                    let v = a.to_f64_lossy() - b.to_f64_lossy();
                    v * v
                })
                .sum();
            if dist < best.1 {
                best = (t, dist);
            }
        }
        members[best.0].push(i);
    }

    let maps = batch_normalized_maps(images, extractor)?;
    let mut cluster_scores = Vec::new();
    for cluster in &members {
        if cluster.len() < 2 {
            continue;
        }
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for (ai, &a) in cluster.iter().enumerate() {
            for &b in &cluster[ai + 1..] {
                acc += maps_distance(&maps[a], &maps[b]);
                pairs += 1;
            }
        }
        cluster_scores.push(acc / pairs as f64);
    }
    if cluster_scores.is_empty() {
        return Ok(0.0);
    }
    Ok(cluster_scores.iter().sum::<f64>() / cluster_scores.len() as f64)
}

// ---- task evaluation ------------------------------------------------------------

/// One metric evaluation of a generator against a task dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_id: String,
    pub fid: f64,
    pub b_lpips: f64,
    pub mean_pairwise_lpips: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub extractor_version: String,
}

fn hflip<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ci * h + y) * w + x] = img.data()[(ci * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Generate in bounded chunks to keep tape memory flat.
pub fn generate_chunked<T: Scalar>(
    source: &dyn SampleSource<T>,
    n_samples: usize,
    seed: u64,
) -> Result<ImageBatch<T>> {
    let latent = source.latent_dim();
    let noise = NoiseBatch::sample(n_samples, latent, seed);
    let chunk = 32usize;
    let mut data: Vec<T> = Vec::new();
    let mut shape_tail: Option<Vec<usize>> = None;
    let mut start = 0;
    while start < n_samples {
        let end = (start + chunk).min(n_samples);
        let sub = Tensor::from_vec(
            noise.values().data()[start * latent..end * latent].to_vec(),
            &[end - start, latent],
        );
        let imgs = source.sample_images(&NoiseBatch::from_tensor(sub, seed))?;
        if shape_tail.is_none() {
            shape_tail = Some(imgs.shape()[1..].to_vec());
        }
        data.extend_from_slice(imgs.data());
        start = end;
    }
    let tail = shape_tail.expect("n_samples >= 1");
    let mut shape = vec![n_samples];
    shape.extend(tail);
    Ok(Tensor::from_vec(data, &shape))
}

/// Generate `n_samples` with seeded noise and score fidelity and diversity
/// against the task's real images. Real feature statistics are augmented by
/// horizontal flips when fewer than 50 real images are available.
/// Deterministic given the seed.
pub fn evaluate_task<T: Scalar>(
    source: &dyn SampleSource<T>,
    task: &TaskDataset<T>,
    n_samples: usize,
    seed: u64,
    extractor: &FeatureExtractor<T>,
) -> Result<MetricReport> {
    if n_samples < 2 {
        return Err(Error::Argument("need n_samples >= 2".into()));
    }
    let generated = generate_chunked(source, n_samples, seed)?;

    let mut real_images: Vec<Tensor<T>> = task.images().to_vec();
    if real_images.len() < 50 {
        let flips: Vec<Tensor<T>> = real_images.iter().map(hflip).collect();
        real_images.extend(flips);
    }
    let real_batch = {
        let per = real_images[0].numel();
        let mut data = Vec::with_capacity(real_images.len() * per);
        for img in &real_images {
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![real_images.len()];
        shape.extend_from_slice(real_images[0].shape());
        Tensor::from_vec(data, &shape)
    };

    let gen_stats = gaussian_stats(&extractor.features(&generated)?)?;
    let real_stats = gaussian_stats(&extractor.features(&real_batch)?)?;
    let fid_value = fid(&gen_stats, &real_stats)?;
    let b = b_lpips(&generated, task, extractor)?;
    let mp = mean_pairwise_lpips(&generated, extractor)?;
    Ok(MetricReport {
        task_id: task.task_id().to_string(),
        fid: fid_value,
        b_lpips: b,
        mean_pairwise_lpips: mp,
        n_samples,
        seed,
        extractor_version: EXTRACTOR_VERSION.to_string(),
    })
}
