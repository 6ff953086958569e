//! Generator and discriminator models as explicit layer stacks with named
//! parameter groups, per-task adapter banks, and trainable/frozen masks.
//!
//! The generator is a dense stem at 4x4 followed by nearest-upsample conv
//! blocks up to the output resolution, with a tanh 1x1 projection to pixels
//! in [-1, 1]. Each main block output carries an optional per-task adapter:
//! channelwise scale and shift plus a zero-initialized residual 1x1
//! convolution, so a fresh bank is an exact identity.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// A batch of images, shape `[n, channels, res, res]`, values in [-1, 1].
pub type ImageBatch<T> = Tensor<T>;

/// Batch of latent vectors with the seed that produced it.
#[derive(Clone, Debug)]
pub struct NoiseBatch<T: Scalar> {
    values: Tensor<T>,
    seed: u64,
}

impl<T: Scalar> NoiseBatch<T> {
    /// i.i.d. standard normal batch `[n, latent_dim]`, reproducible by seed.
    pub fn sample(n: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * latent_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                T::of(v)
            })
            .collect();
        NoiseBatch {
            values: Tensor::from_vec(data, &[n, latent_dim]),
            seed,
        }
    }

    pub fn from_tensor(values: Tensor<T>, seed: u64) -> Self {
        assert_eq!(values.shape().len(), 2);
        NoiseBatch { values, seed }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.values.shape()[1]
    }
}

// ---- configs ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Output resolution in pixels (square); power of two, at least 8.
    pub out_resolution: usize,
    /// 1 (grayscale) or 3 (rgb).
    pub out_channels: usize,
    /// Width knob; stem channel count at 4x4.
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 64,
            out_resolution: 32,
            out_channels: 1,
            base_channels: 64,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.out_resolution < 8 || !self.out_resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "out_resolution must be a power of two >= 8, got {}",
                self.out_resolution
            )));
        }
        if self.out_channels != 1 && self.out_channels != 3 {
            return Err(Error::Config(format!(
                "out_channels must be 1 or 3, got {}",
                self.out_channels
            )));
        }
        if self.base_channels < 8 {
            return Err(Error::Config("base_channels must be >= 8".into()));
        }
        Ok(())
    }

    /// Number of upsampling blocks from the 4x4 stem to the output.
    pub fn num_up_blocks(&self) -> usize {
        (self.out_resolution / 4).trailing_zeros() as usize
    }

    /// Output channel count of main block `i` (0 = stem).
    pub fn block_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.base_channels
        } else {
            (self.base_channels >> (i - 1)).max(8)
        }
    }

    /// Architecture identity: every field except the init seed.
    pub fn arch_eq(&self, other: &Self) -> bool {
        self.latent_dim == other.latent_dim
            && self.out_resolution == other.out_resolution
            && self.out_channels == other.out_channels
            && self.base_channels == other.base_channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_resolution: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_resolution: 32,
            in_channels: 1,
            base_channels: 16,
            seed: 0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_resolution < 8 || !self.in_resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "in_resolution must be a power of two >= 8, got {}",
                self.in_resolution
            )));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be >= 4".into()));
        }
        Ok(())
    }

    pub fn arch_eq(&self, other: &Self) -> bool {
        self.in_resolution == other.in_resolution
            && self.in_channels == other.in_channels
            && self.base_channels == other.base_channels
    }
}

// ---- parameter init ----------------------------------------------------------

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v * std)
        })
        .collect();
    Tensor::from_vec(data, shape)
}

// ---- generator -----------------------------------------------------------------

#[derive(Clone, Debug)]
struct ConvParam<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

/// Per-block adapter: channelwise affine plus a zero-initialized residual
/// 1x1 convolution. Fresh banks are exact identities.
#[derive(Clone, Debug)]
pub struct BlockAdapter<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub resid: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AdapterBank<T: Scalar> {
    task_id: String,
    per_block: Vec<BlockAdapter<T>>,
    param_count: usize,
}

impl<T: Scalar> AdapterBank<T> {
    fn identity(task_id: &str, channels: &[usize]) -> Self {
        let per_block: Vec<BlockAdapter<T>> = channels
            .iter()
            .map(|&c| BlockAdapter {
                scale: Tensor::filled(&[c], T::one()),
                shift: Tensor::zeros(&[c]),
                resid: Tensor::zeros(&[c, c, 1, 1]),
            })
            .collect();
        let param_count = per_block
            .iter()
            .map(|a| a.scale.numel() + a.shift.numel() + a.resid.numel())
            .sum();
        AdapterBank {
            task_id: task_id.to_string(),
            per_block,
            param_count,
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn per_block(&self) -> &[BlockAdapter<T>] {
        &self.per_block
    }
}

/// Which parameter set the next training graph should treat as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Inference only; no gradients anywhere.
    Frozen,
    /// Global weights trainable (teacher-style); banks untouched.
    Global,
    /// Only the active adapter bank trainable (student-style).
    ActiveBank,
}

/// Layered image generator: frozen-able global weights plus per-task adapter
/// banks keyed by task id. Switching the active task never mutates values.
#[derive(Clone, Debug)]
pub struct GeneratorModel<T: Scalar> {
    config: GeneratorConfig,
    stem: ConvParam<T>, // w: [latent, c0*16], b: [c0*16]
    blocks: Vec<ConvParam<T>>,
    rgb: ConvParam<T>,
    adapter_banks: IndexMap<String, AdapterBank<T>>,
    active_task: Option<String>,
}

/// Tape handles for one forward pass of a generator.
pub struct GenLeaves {
    stem: (NodeId, NodeId),
    blocks: Vec<(NodeId, NodeId)>,
    rgb: (NodeId, NodeId),
    bank: Option<Vec<(NodeId, NodeId, NodeId)>>,
    trainable: Vec<(String, NodeId)>,
}

impl GenLeaves {
    /// `(name, node)` pairs for every trainable parameter, in declaration order.
    pub fn trainable(&self) -> &[(String, NodeId)] {
        &self.trainable
    }
}

/// Build a generator from a validated config with deterministic seeded
/// initialization and no adapter banks.
pub fn build_generator<T: Scalar>(config: GeneratorConfig) -> Result<GeneratorModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c0 = config.block_channels(0);
    let stem = ConvParam {
        w: he_normal(&mut rng, &[config.latent_dim, c0 * 16], config.latent_dim),
        b: Tensor::zeros(&[c0 * 16]),
    };
    let mut blocks = Vec::new();
    for i in 1..=config.num_up_blocks() {
        let cin = config.block_channels(i - 1);
        let cout = config.block_channels(i);
        blocks.push(ConvParam {
            w: he_normal(&mut rng, &[cout, cin, 3, 3], cin * 9),
            b: Tensor::zeros(&[cout]),
        });
    }
    let clast = config.block_channels(config.num_up_blocks());
    let rgb = ConvParam {
        w: he_normal(&mut rng, &[config.out_channels, clast, 1, 1], clast),
        b: Tensor::zeros(&[config.out_channels]),
    };
    Ok(GeneratorModel {
        config,
        stem,
        blocks,
        rgb,
        adapter_banks: IndexMap::new(),
        active_task: None,
    })
}

impl<T: Scalar> GeneratorModel<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn active_task(&self) -> Option<&str> {
        self.active_task.as_deref()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.adapter_banks.keys().cloned().collect()
    }

    pub fn bank(&self, task_id: &str) -> Option<&AdapterBank<T>> {
        self.adapter_banks.get(task_id)
    }

    /// Channel counts of main block outputs (stem, then each up block).
    fn adapter_channels(&self) -> Vec<usize> {
        (0..=self.config.num_up_blocks())
            .map(|i| self.config.block_channels(i))
            .collect()
    }

    /// Create a fresh zero-initialized (identity) adapter bank for `task_id`.
    pub fn add_task_adapters(&mut self, task_id: &str) -> Result<&AdapterBank<T>> {
        if self.adapter_banks.contains_key(task_id) {
            return Err(Error::Conflict(format!("task '{task_id}' already has an adapter bank")));
        }
        let bank = AdapterBank::identity(task_id, &self.adapter_channels());
        self.adapter_banks.insert(task_id.to_string(), bank);
        Ok(&self.adapter_banks[task_id])
    }

    /// Route subsequent generation through `task_id`'s bank (or none for the
    /// adapter-free source path). Parameter values are never touched.
    pub fn set_active_task(&mut self, task_id: Option<&str>) -> Result<()> {
        if let Some(id) = task_id {
            if !self.adapter_banks.contains_key(id) {
                return Err(Error::NotFound(format!("no adapter bank for task '{id}'")));
            }
        }
        self.active_task = task_id.map(str::to_string);
        Ok(())
    }

    pub fn global_param_count(&self) -> usize {
        self.global_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn global_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("global.stem.w".to_string(), &self.stem.w),
            ("global.stem.b".to_string(), &self.stem.b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("global.block{}.w", i + 1), &b.w));
            out.push((format!("global.block{}.b", i + 1), &b.b));
        }
        out.push(("global.rgb.w".to_string(), &self.rgb.w));
        out.push(("global.rgb.b".to_string(), &self.rgb.b));
        out
    }

    pub fn bank_params(&self, task_id: &str) -> Result<Vec<(String, &Tensor<T>)>> {
        let bank = self
            .adapter_banks
            .get(task_id)
            .ok_or_else(|| Error::NotFound(format!("no adapter bank for task '{task_id}'")))?;
        let mut out = Vec::new();
        for (i, a) in bank.per_block.iter().enumerate() {
            out.push((format!("adapter.{task_id}.block{i}.scale"), &a.scale));
            out.push((format!("adapter.{task_id}.block{i}.shift"), &a.shift));
            out.push((format!("adapter.{task_id}.block{i}.resid"), &a.resid));
        }
        Ok(out)
    }

    /// Every parameter tensor, globals first then banks in insertion order.
    pub fn all_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.global_params();
        for task_id in self.adapter_banks.keys() {
            out.extend(self.bank_params(task_id).expect("bank exists"));
        }
        out
    }

    /// Mutable access to a parameter by its enumeration name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["global", "stem", "w"] => Some(&mut self.stem.w),
            ["global", "stem", "b"] => Some(&mut self.stem.b),
            ["global", "rgb", "w"] => Some(&mut self.rgb.w),
            ["global", "rgb", "b"] => Some(&mut self.rgb.b),
            ["global", block, wb] => {
                let idx: usize = block.strip_prefix("block")?.parse().ok()?;
                let p = self.blocks.get_mut(idx.checked_sub(1)?)?;
                match *wb {
                    "w" => Some(&mut p.w),
                    "b" => Some(&mut p.b),
                    _ => None,
                }
            }
            ["adapter", task, block, field] => {
                let idx: usize = block.strip_prefix("block")?.parse().ok()?;
                let bank = self.adapter_banks.get_mut(*task)?;
                let a = bank.per_block.get_mut(idx)?;
                match *field {
                    "scale" => Some(&mut a.scale),
                    "shift" => Some(&mut a.shift),
                    "resid" => Some(&mut a.resid),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Copy global parameters from `src` (banks are not copied).
    pub fn clone_weights_from(&mut self, src: &GeneratorModel<T>) -> Result<()> {
        if !self.config.arch_eq(&src.config) {
            return Err(Error::Shape(format!(
                "generator architecture mismatch: {:?} vs {:?}",
                self.config, src.config
            )));
        }
        self.stem = src.stem.clone();
        self.blocks = src.blocks.clone();
        self.rgb = src.rgb.clone();
        Ok(())
    }

    /// Insert this generator's parameters (and the active bank, if any) as
    /// tape leaves. `scope` decides which of them require gradients.
    pub fn insert_leaves(&self, g: &mut Graph<T>, scope: TrainScope) -> GenLeaves {
        let global_grad = scope == TrainScope::Global;
        let bank_grad = scope == TrainScope::ActiveBank;
        let mut trainable = Vec::new();

        let push = |g: &mut Graph<T>,
                        trainable: &mut Vec<(String, NodeId)>,
                        name: String,
                        t: &Tensor<T>,
                        req: bool| {
            let id = g.leaf(t.clone(), req);
            if req {
                trainable.push((name, id));
            }
            id
        };

        let stem = (
            push(g, &mut trainable, "global.stem.w".into(), &self.stem.w, global_grad),
            push(g, &mut trainable, "global.stem.b".into(), &self.stem.b, global_grad),
        );
        let mut blocks = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            blocks.push((
                push(g, &mut trainable, format!("global.block{}.w", i + 1), &b.w, global_grad),
                push(g, &mut trainable, format!("global.block{}.b", i + 1), &b.b, global_grad),
            ));
        }
        let rgb = (
            push(g, &mut trainable, "global.rgb.w".into(), &self.rgb.w, global_grad),
            push(g, &mut trainable, "global.rgb.b".into(), &self.rgb.b, global_grad),
        );
        let bank = self.active_task.as_ref().map(|task| {
            let bank = &self.adapter_banks[task];
            bank.per_block
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    (
                        push(g, &mut trainable, format!("adapter.{task}.block{i}.scale"), &a.scale, bank_grad),
                        push(g, &mut trainable, format!("adapter.{task}.block{i}.shift"), &a.shift, bank_grad),
                        push(g, &mut trainable, format!("adapter.{task}.block{i}.resid"), &a.resid, bank_grad),
                    )
                })
                .collect()
        });
        GenLeaves {
            stem,
            blocks,
            rgb,
            bank,
            trainable,
        }
    }

    /// Forward pass on the tape: `z [n, latent]` to images
    /// `[n, channels, res, res]` in [-1, 1].
    pub fn forward(&self, g: &mut Graph<T>, leaves: &GenLeaves, z: NodeId) -> NodeId {
        let slope = T::of(LEAKY_SLOPE);
        let n = g.shape(z)[0];
        let c0 = self.config.block_channels(0);

        let apply_adapter = |g: &mut Graph<T>, h: NodeId, idx: usize, leaves: &GenLeaves| {
            let Some(bank) = &leaves.bank else { return h };
            let (scale, shift, resid) = bank[idx];
            let m = g.mul_channel(h, scale);
            let a = g.add_channel(m, shift);
            let r = g.conv2d(h, resid);
            g.add(a, r)
        };

        let mut h = g.matmul(z, leaves.stem.0);
        h = g.add_row_broadcast(h, leaves.stem.1);
        h = g.leaky_relu(h, slope);
        h = g.reshape(h, &[n, c0, 4, 4]);
        h = apply_adapter(g, h, 0, leaves);

        for (i, &(w, b)) in leaves.blocks.iter().enumerate() {
            h = g.upsample2(h);
            h = g.conv2d(h, w);
            h = g.add_channel(h, b);
            h = g.leaky_relu(h, slope);
            h = apply_adapter(g, h, i + 1, leaves);
        }

        let mut y = g.conv2d(h, leaves.rgb.0);
        y = g.add_channel(y, leaves.rgb.1);
        g.tanh(y)
    }

    /// Pure generation: output is a function of (parameters, noise,
    /// active_task) only.
    pub fn generate(&self, noise: &NoiseBatch<T>) -> Result<ImageBatch<T>> {
        if noise.latent_dim() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "noise latent_dim {} != generator latent_dim {}",
                noise.latent_dim(),
                self.config.latent_dim
            )));
        }
        let mut g = Graph::new();
        let leaves = self.insert_leaves(&mut g, TrainScope::Frozen);
        let z = g.constant(noise.values().clone());
        let out = self.forward(&mut g, &leaves, z);
        Ok(g.value(out).clone())
    }
}

// ---- discriminator --------------------------------------------------------------

#[derive(Clone, Debug)]
enum DiscLayer<T: Scalar> {
    Conv { w: Tensor<T>, b: Tensor<T>, pool_after: bool },
    Dense { w: Tensor<T>, b: Tensor<T> },
}

/// Convolutional discriminator with an explicit parameterized-layer list and
/// a trainable suffix: with `trainable_suffix_k = k`, exactly the last `k`
/// layers report trainable parameters.
#[derive(Clone, Debug)]
pub struct DiscriminatorModel<T: Scalar> {
    config: DiscriminatorConfig,
    layers: Vec<DiscLayer<T>>,
    trainable_suffix_k: usize,
}

pub struct DiscLeaves {
    layers: Vec<(NodeId, NodeId)>,
    trainable: Vec<(String, NodeId)>,
}

impl DiscLeaves {
    pub fn trainable(&self) -> &[(String, NodeId)] {
        &self.trainable
    }
}

pub fn build_discriminator<T: Scalar>(config: DiscriminatorConfig) -> Result<DiscriminatorModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = config.base_channels;
    let cap = 4 * base;
    let levels = (config.in_resolution / 4).trailing_zeros() as usize;

    let mut layers = Vec::new();
    let mut cin = config.in_channels;
    let mut ca = base;
    for level in 0..levels {
        let cb = (2 * ca).min(cap);
        layers.push(DiscLayer::Conv {
            w: he_normal(&mut rng, &[ca, cin, 3, 3], cin * 9),
            b: Tensor::zeros(&[ca]),
            pool_after: false,
        });
        layers.push(DiscLayer::Conv {
            w: he_normal(&mut rng, &[cb, ca, 3, 3], ca * 9),
            b: Tensor::zeros(&[cb]),
            pool_after: true,
        });
        cin = cb;
        ca = cb.min(cap);
        let _ = level;
    }
    // two convs at the 4x4 tail
    for _ in 0..2 {
        let c = cin.min(cap);
        layers.push(DiscLayer::Conv {
            w: he_normal(&mut rng, &[c, cin, 3, 3], cin * 9),
            b: Tensor::zeros(&[c]),
            pool_after: false,
        });
        cin = c;
    }
    // dense head
    let mut din = cin * 16;
    for dout in [8 * base, 4 * base, 2 * base, 1] {
        layers.push(DiscLayer::Dense {
            w: he_normal(&mut rng, &[din, dout], din),
            b: Tensor::zeros(&[dout]),
        });
        din = dout;
    }

    let total = layers.len();
    Ok(DiscriminatorModel {
        config,
        layers,
        trainable_suffix_k: total,
    })
}

impl<T: Scalar> DiscriminatorModel<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Number of parameterized layers, the `L` that suffix freezing ranges over.
    pub fn total_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn trainable_suffix_k(&self) -> usize {
        self.trainable_suffix_k
    }

    /// Restrict the trainable set to the last `k` parameterized layers.
    pub fn set_trainable_suffix(&mut self, k: usize) -> Result<()> {
        if k > self.layers.len() {
            return Err(Error::Range(format!(
                "trainable suffix {k} out of range 0..={}",
                self.layers.len()
            )));
        }
        self.trainable_suffix_k = k;
        Ok(())
    }

    pub fn layer_is_trainable(&self, i: usize) -> bool {
        i >= self.layers.len() - self.trainable_suffix_k
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let (w, b) = match l {
                    DiscLayer::Conv { w, b, .. } => (w, b),
                    DiscLayer::Dense { w, b } => (w, b),
                };
                [(format!("layer{i}.w"), w), (format!("layer{i}.b"), b)]
            })
            .collect()
    }

    pub fn trainable_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, _)| self.layer_is_trainable(*i))
            .flat_map(|(i, l)| {
                let (w, b) = match l {
                    DiscLayer::Conv { w, b, .. } => (w, b),
                    DiscLayer::Dense { w, b } => (w, b),
                };
                [(format!("layer{i}.w"), w), (format!("layer{i}.b"), b)]
            })
            .collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (layer, field) = name.split_once('.')?;
        let idx: usize = layer.strip_prefix("layer")?.parse().ok()?;
        let l = self.layers.get_mut(idx)?;
        let (w, b) = match l {
            DiscLayer::Conv { w, b, .. } => (w, b),
            DiscLayer::Dense { w, b } => (w, b),
        };
        match field {
            "w" => Some(w),
            "b" => Some(b),
            _ => None,
        }
    }

    pub fn clone_weights_from(&mut self, src: &DiscriminatorModel<T>) -> Result<()> {
        if !self.config.arch_eq(&src.config) {
            return Err(Error::Shape(format!(
                "discriminator architecture mismatch: {:?} vs {:?}",
                self.config, src.config
            )));
        }
        self.layers = src.layers.clone();
        Ok(())
    }

    /// Insert parameters as tape leaves; only the trainable suffix requires
    /// gradients when `trainable` is set.
    pub fn insert_leaves(&self, g: &mut Graph<T>, trainable: bool) -> DiscLeaves {
        let mut layers = Vec::new();
        let mut train = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let req = trainable && self.layer_is_trainable(i);
            let (w, b) = match l {
                DiscLayer::Conv { w, b, .. } => (w, b),
                DiscLayer::Dense { w, b } => (w, b),
            };
            let wid = g.leaf(w.clone(), req);
            let bid = g.leaf(b.clone(), req);
            if req {
                train.push((format!("layer{i}.w"), wid));
                train.push((format!("layer{i}.b"), bid));
            }
            layers.push((wid, bid));
        }
        DiscLeaves {
            layers,
            trainable: train,
        }
    }

    /// Forward pass: images `[n, c, res, res]` to logits `[n]`.
    pub fn forward(&self, g: &mut Graph<T>, leaves: &DiscLeaves, x: NodeId) -> NodeId {
        let slope = T::of(LEAKY_SLOPE);
        let n = g.shape(x)[0];
        let quarter = T::of(0.25);
        let mut h = x;
        let mut flattened = false;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = leaves.layers[i];
            match l {
                DiscLayer::Conv { pool_after, .. } => {
                    h = g.conv2d(h, w);
                    h = g.add_channel(h, b);
                    h = g.leaky_relu(h, slope);
                    if *pool_after {
                        let s = g.sum_pool2(h);
                        h = g.scale(s, quarter);
                    }
                }
                DiscLayer::Dense { .. } => {
                    if !flattened {
                        let numel: usize = g.shape(h).iter().product();
                        h = g.reshape(h, &[n, numel / n]);
                        flattened = true;
                    }
                    h = g.matmul(h, w);
                    h = g.add_row_broadcast(h, b);
                    if i != last {
                        h = g.leaky_relu(h, slope);
                    }
                }
            }
        }
        g.reshape(h, &[n])
    }

    /// Pure scoring: one real-valued logit per image.
    pub fn discriminate(&self, images: &ImageBatch<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != self.config.in_resolution {
            return Err(Error::Shape(format!(
                "expected [n, {}, {}, {}], got {:?}",
                self.config.in_channels, self.config.in_resolution, self.config.in_resolution, s
            )));
        }
        let mut g = Graph::new();
        let leaves = self.insert_leaves(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &leaves, x);
        Ok(g.value(out).clone())
    }
}

/// Spec-level alias for [`DiscriminatorModel::set_trainable_suffix`].
pub fn set_discriminator_trainable_suffix<T: Scalar>(
    disc: &mut DiscriminatorModel<T>,
    k: usize,
) -> Result<()> {
    disc.set_trainable_suffix(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen_config() -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: 64,
            out_resolution: 32,
            out_channels: 1,
            base_channels: 64,
            seed: 7,
        }
    }

    #[test]
    fn build_is_deterministic_and_generation_reproducible() {
        let g1 = build_generator::<f32>(small_gen_config()).unwrap();
        let g2 = build_generator::<f32>(small_gen_config()).unwrap();
        let z = NoiseBatch::sample(4, 64, 11);
        let a = g1.generate(&z).unwrap();
        let b = g2.generate(&z).unwrap();
        assert!(a.bits_eq(&b));
        // purity: same noise twice on the same model
        let c = g1.generate(&z).unwrap();
        assert!(a.bits_eq(&c));
    }

    #[test]
    fn non_power_of_two_resolution_rejected() {
        let cfg = GeneratorConfig {
            out_resolution: 33,
            ..small_gen_config()
        };
        assert!(matches!(build_generator::<f32>(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn global_param_count_matches_hand_sum() {
        // latent 64 -> 64x(4x4) stem; up blocks 64->64, 64->32, 32->16; 1x1 to rgb
        let cfg = GeneratorConfig {
            out_channels: 3,
            ..small_gen_config()
        };
        let g = build_generator::<f32>(cfg).unwrap();
        let hand = (64 * 64 * 16 + 64 * 16)           // stem w + b
            + (64 * 64 * 9 + 64)                      // block1
            + (32 * 64 * 9 + 32)                      // block2
            + (16 * 32 * 9 + 16)                      // block3
            + (3 * 16 + 3); // rgb 1x1
        assert_eq!(g.global_param_count(), hand);
    }

    #[test]
    fn generate_shape_and_range() {
        let g = build_generator::<f32>(small_gen_config()).unwrap();
        let z = NoiseBatch::sample(4, 64, 3);
        let imgs = g.generate(&z).unwrap();
        assert_eq!(imgs.shape(), &[4, 1, 32, 32]);
        assert!(imgs.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn generate_rejects_latent_mismatch() {
        let g = build_generator::<f32>(small_gen_config()).unwrap();
        let z = NoiseBatch::sample(4, 32, 3);
        assert!(matches!(g.generate(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_adapter_bank_is_exact_identity() {
        let mut g = build_generator::<f32>(small_gen_config()).unwrap();
        let z = NoiseBatch::sample(3, 64, 5);
        let plain = g.generate(&z).unwrap();
        g.add_task_adapters("task1").unwrap();
        g.set_active_task(Some("task1")).unwrap();
        let with_bank = g.generate(&z).unwrap();
        assert!(plain.bits_eq(&with_bank), "zero-init bank must be an exact identity");
        g.set_active_task(None).unwrap();
        let back = g.generate(&z).unwrap();
        assert!(plain.bits_eq(&back));
    }

    #[test]
    fn duplicate_task_id_conflicts() {
        let mut g = build_generator::<f32>(small_gen_config()).unwrap();
        g.add_task_adapters("t").unwrap();
        assert!(matches!(g.add_task_adapters("t"), Err(Error::Conflict(_))));
    }

    #[test]
    fn unknown_active_task_not_found() {
        let mut g = build_generator::<f32>(small_gen_config()).unwrap();
        assert!(matches!(g.set_active_task(Some("ghost")), Err(Error::NotFound(_))));
    }

    #[test]
    fn adapter_bank_param_ratio_below_threshold() {
        let mut g = build_generator::<f32>(small_gen_config()).unwrap();
        for i in 0..5 {
            g.add_task_adapters(&format!("task{i}")).unwrap();
        }
        let global = g.global_param_count();
        for i in 0..5 {
            let bank = g.bank(&format!("task{i}")).unwrap();
            // count from adapter shapes: per block c + c + c*c
            let hand: usize = [64usize, 64, 32, 16].iter().map(|&c| 2 * c + c * c).sum();
            assert_eq!(bank.param_count(), hand);
            let ratio = bank.param_count() as f64 / global as f64;
            assert!(ratio < 0.15, "ratio {ratio}");
        }
    }

    #[test]
    fn switching_active_task_never_mutates_params() {
        let mut g = build_generator::<f32>(small_gen_config()).unwrap();
        g.add_task_adapters("a").unwrap();
        g.add_task_adapters("b").unwrap();
        let before: Vec<(String, Tensor<f32>)> = g
            .all_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        g.set_active_task(Some("a")).unwrap();
        g.set_active_task(Some("b")).unwrap();
        g.set_active_task(None).unwrap();
        for ((name, old), (name2, new)) in before.iter().zip(g.all_params()) {
            assert_eq!(name, &name2);
            assert!(old.bits_eq(new), "param {name} changed");
        }
    }

    #[test]
    fn discriminator_logits_shape_and_determinism() {
        let cfg = DiscriminatorConfig {
            seed: 9,
            ..Default::default()
        };
        let d1 = build_discriminator::<f32>(cfg.clone()).unwrap();
        let d2 = build_discriminator::<f32>(cfg).unwrap();
        for ((n1, p1), (n2, p2)) in d1.params().iter().zip(d2.params().iter()) {
            assert_eq!(n1, n2);
            assert!(p1.bits_eq(p2));
        }
        let x = Tensor::filled(&[5, 1, 32, 32], 0.1f32);
        let logits = d1.discriminate(&x).unwrap();
        assert_eq!(logits.shape(), &[5]);
    }

    #[test]
    fn discriminator_layer_count_matches_hand_count() {
        // at 32x32: three levels of two convs, two tail convs, four dense = 12
        let d = build_discriminator::<f32>(Default::default()).unwrap();
        assert_eq!(d.total_layers(), 2 * 3 + 2 + 4);
    }

    #[test]
    fn trainable_suffix_bounds_and_masks() {
        let mut d = build_discriminator::<f32>(Default::default()).unwrap();
        let l = d.total_layers();
        assert_eq!(d.trainable_suffix_k(), l); // all trainable by default
        assert_eq!(d.trainable_params().len(), 2 * l);
        d.set_trainable_suffix(0).unwrap();
        assert!(d.trainable_params().is_empty());
        d.set_trainable_suffix(8).unwrap();
        for i in 0..l {
            assert_eq!(d.layer_is_trainable(i), i >= l - 8);
        }
        assert!(matches!(d.set_trainable_suffix(l + 1), Err(Error::Range(_))));
    }

    #[test]
    fn clone_weights_copies_globals_not_banks() {
        let src = build_generator::<f32>(small_gen_config()).unwrap();
        let mut dst = build_generator::<f32>(GeneratorConfig {
            seed: 99,
            ..small_gen_config()
        })
        .unwrap();
        dst.add_task_adapters("keep").unwrap();
        dst.clone_weights_from(&src).unwrap();
        let z = NoiseBatch::sample(2, 64, 1);
        assert!(src.generate(&z).unwrap().bits_eq(&dst.generate(&z).unwrap()));
        assert!(dst.bank("keep").is_some(), "banks survive weight cloning");
    }

    #[test]
    fn clone_weights_rejects_arch_mismatch() {
        let src = build_generator::<f32>(small_gen_config()).unwrap();
        let mut dst = build_generator::<f32>(GeneratorConfig {
            latent_dim: 32,
            ..small_gen_config()
        })
        .unwrap();
        assert!(matches!(dst.clone_weights_from(&src), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_batch_seed_reproducibility() {
        let a: NoiseBatch<f32> = NoiseBatch::sample(8, 16, 42);
        let b: NoiseBatch<f32> = NoiseBatch::sample(8, 16, 42);
        assert!(a.values().bits_eq(b.values()));
        let c: NoiseBatch<f32> = NoiseBatch::sample(8, 16, 43);
        assert!(!a.values().bits_eq(c.values()));
    }
}
