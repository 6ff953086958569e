//! Checkpoint directories: a `manifest.json` describing architecture, task
//! list, seeds, and format version, plus one binary blob per parameter
//! tensor.
//!
//! Blob layout: 8-byte magic, rank and dimensions as 64-bit little-endian
//! integers, then the data as little-endian 32-bit floats. Round trips are
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    build_discriminator, build_generator, DiscriminatorConfig, DiscriminatorModel, GeneratorConfig,
    GeneratorModel,
};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: &[u8; 8] = b"CGTNSR01";
pub const FORMAT_VERSION: u32 = 1;

// ---- tensor blobs -----------------------------------------------------------

pub fn write_tensor_blob(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::with_capacity(16 + 8 * t.shape().len() + 4 * t.numel());
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_blob(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(fail("blob shorter than header"));
    }
    if &bytes[0..8] != BLOB_MAGIC {
        return Err(fail("bad magic"));
    }
    let rank = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(fail("implausible rank"));
    }
    let header = 16 + 8 * rank;
    if bytes.len() < header {
        return Err(fail("truncated dimension header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 16 + 8 * i;
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(fail(&format!(
            "expected {} data bytes, found {}",
            4 * numel,
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(data, &shape))
}

// ---- manifests ---------------------------------------------------------------

fn blob_file_name(param_name: &str) -> String {
    format!("{}.bin", param_name.replace('.', "_"))
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorManifest {
    format_version: u32,
    kind: String,
    arch: GeneratorConfig,
    arch_hash: String,
    init_seed: u64,
    task_ids: Vec<String>,
    active_task: Option<String>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DiscriminatorManifest {
    format_version: u32,
    kind: String,
    arch: DiscriminatorConfig,
    arch_hash: String,
    init_seed: u64,
    trainable_suffix_k: usize,
    params: Vec<ParamEntry>,
}

/// Hash of the architecture identity (seed excluded): two configs with equal
/// hashes are clone-compatible.
pub fn generator_arch_hash(cfg: &GeneratorConfig) -> String {
    let canon = format!(
        "generator:latent={}:res={}:ch={}:base={}",
        cfg.latent_dim, cfg.out_resolution, cfg.out_channels, cfg.base_channels
    );
    hex::encode(Sha256::digest(canon.as_bytes()))
}

pub fn discriminator_arch_hash(cfg: &DiscriminatorConfig) -> String {
    let canon = format!(
        "discriminator:res={}:ch={}:base={}",
        cfg.in_resolution, cfg.in_channels, cfg.base_channels
    );
    hex::encode(Sha256::digest(canon.as_bytes()))
}

fn read_manifest<M: for<'de> Deserialize<'de>>(dir: &Path) -> Result<M> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

// ---- generator ----------------------------------------------------------------

pub fn save_generator(gen: &GeneratorModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (name, t) in gen.all_params() {
        let file = blob_file_name(&name);
        write_tensor_blob(&dir.join(&file), t)?;
        params.push(ParamEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = GeneratorManifest {
        format_version: FORMAT_VERSION,
        kind: "generator".into(),
        arch: gen.config().clone(),
        arch_hash: generator_arch_hash(gen.config()),
        init_seed: gen.config().seed,
        task_ids: gen.task_ids(),
        active_task: gen.active_task().map(str::to_string),
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    Ok(())
}

pub fn load_generator(dir: &Path) -> Result<GeneratorModel<f32>> {
    let manifest: GeneratorManifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format_version {}",
            manifest.format_version
        )));
    }
    if manifest.kind != "generator" {
        return Err(Error::Consistency(format!("expected a generator checkpoint, found '{}'", manifest.kind)));
    }
    if manifest.arch_hash != generator_arch_hash(&manifest.arch) {
        return Err(Error::Consistency(format!(
            "architecture hash mismatch in {}: manifest says {}, config hashes to {}",
            dir.display(),
            manifest.arch_hash,
            generator_arch_hash(&manifest.arch)
        )));
    }
    let mut gen = build_generator::<f32>(manifest.arch.clone())?;
    for task in &manifest.task_ids {
        gen.add_task_adapters(task)?;
    }
    for entry in &manifest.params {
        let blob = read_tensor_blob(&dir.join(&entry.file))?;
        if blob.shape() != entry.shape.as_slice() {
            return Err(Error::Consistency(format!(
                "blob {} has shape {:?}, manifest says {:?}",
                entry.file,
                blob.shape(),
                entry.shape
            )));
        }
        let param = gen
            .param_mut(&entry.name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter '{}' in manifest", entry.name)))?;
        if param.shape() != blob.shape() {
            return Err(Error::Consistency(format!(
                "parameter '{}' expects shape {:?}, blob has {:?}",
                entry.name,
                param.shape(),
                blob.shape()
            )));
        }
        *param = blob;
    }
    gen.set_active_task(manifest.active_task.as_deref())?;
    Ok(gen)
}

/// Load and verify the architecture matches `expected` (seed excluded).
pub fn load_generator_expecting(dir: &Path, expected: &GeneratorConfig) -> Result<GeneratorModel<f32>> {
    let gen = load_generator(dir)?;
    if !gen.config().arch_eq(expected) {
        return Err(Error::Consistency(format!(
            "checkpoint at {} has architecture {:?}, expected {:?}",
            dir.display(),
            gen.config(),
            expected
        )));
    }
    Ok(gen)
}

// ---- discriminator ---------------------------------------------------------------

pub fn save_discriminator(disc: &DiscriminatorModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (name, t) in disc.params() {
        let file = blob_file_name(&name);
        write_tensor_blob(&dir.join(&file), t)?;
        params.push(ParamEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = DiscriminatorManifest {
        format_version: FORMAT_VERSION,
        kind: "discriminator".into(),
        arch: disc.config().clone(),
        arch_hash: discriminator_arch_hash(disc.config()),
        init_seed: disc.config().seed,
        trainable_suffix_k: disc.trainable_suffix_k(),
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    Ok(())
}

pub fn load_discriminator(dir: &Path) -> Result<DiscriminatorModel<f32>> {
    let manifest: DiscriminatorManifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format_version {}",
            manifest.format_version
        )));
    }
    if manifest.kind != "discriminator" {
        return Err(Error::Consistency(format!(
            "expected a discriminator checkpoint, found '{}'",
            manifest.kind
        )));
    }
    if manifest.arch_hash != discriminator_arch_hash(&manifest.arch) {
        return Err(Error::Consistency(format!("architecture hash mismatch in {}", dir.display())));
    }
    let mut disc = build_discriminator::<f32>(manifest.arch.clone())?;
    for entry in &manifest.params {
        let blob = read_tensor_blob(&dir.join(&entry.file))?;
        let param = disc
            .param_mut(&entry.name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter '{}' in manifest", entry.name)))?;
        if param.shape() != blob.shape() {
            return Err(Error::Consistency(format!(
                "parameter '{}' expects shape {:?}, blob has {:?}",
                entry.name,
                param.shape(),
                blob.shape()
            )));
        }
        *param = blob;
    }
    disc.set_trainable_suffix(manifest.trainable_suffix_k)?;
    Ok(disc)
}

// ---- hashing -----------------------------------------------------------------------

/// SHA-256 over a directory's files (sorted relative paths and contents).
/// Two runs that produce bit-identical checkpoints hash identically.
pub fn dir_hash(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, base, files)?;
            } else {
                files.push(path.strip_prefix(base).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(dir.join(rel))?);
        hasher.update([1u8]);
    }
    Ok(hex::encode(hasher.finalize()))
}
