//! Directory checkpoints shared by dense and MoE models.
//!
//! A checkpoint is a directory holding `config.json` (model kind and
//! hyperparameters), `manifest.json` (ordered tensor name, shape, file),
//! and one raw little-endian f32 binary per named tensor. The on-disk
//! precision is always f32; states in other working precisions are cast on
//! save, so `load(save(x))` is bit-exact for f32 states and `save(load(dir))`
//! reproduces `dir` byte-for-byte at any precision.
//!
//! The frozen domain matrix of a projection-routed MoE is stored once under
//! the name `domain_embeddings`; every block holds the same values, which is
//! verified at save time and re-installed per block at load time.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Attention, DenseBlock, DenseModelState, FeedForward, ModelConfig};
use crate::moe::{
    DomainProjectionState, LinearRouterState, MoEBlock, MoELayer, MoEModelState, Router,
    RouterKind,
};
use crate::tensor::{Scalar, Tensor};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Manifest name of the frozen domain matrix (projection router only).
pub const DOMAIN_EMBEDDINGS: &str = "domain_embeddings";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dense,
    Moe,
}

/// MoE-specific fields of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEMeta {
    pub router: RouterKind,
    pub n_experts: usize,
    pub k: usize,
    pub lb_factor: f64,
    pub expert_domains: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoEMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

fn ck<S: Into<String>>(msg: S) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_config(dir: &Path) -> Result<CheckpointConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ck(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ck(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn tensor_file_name(name: &str) -> String {
    format!("{name}.bin")
}

fn write_tensor<T: Scalar>(dir: &Path, entry: &ManifestEntry, t: &Tensor<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_f32().to_le_bytes());
    }
    std::fs::write(dir.join(&entry.file), bytes)?;
    Ok(())
}

fn read_tensor<T: Scalar>(dir: &Path, entry: &ManifestEntry) -> Result<Tensor<T>> {
    let path = dir.join(&entry.file);
    let bytes =
        std::fs::read(&path).map_err(|e| ck(format!("missing tensor file {}: {e}", path.display())))?;
    let numel: usize = entry.shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(ck(format!(
            "tensor '{}': file holds {} bytes, shape {:?} needs {}",
            entry.name,
            bytes.len(),
            entry.shape,
            numel * 4
        )));
    }
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::from_vec(entry.shape.clone(), data)
}

fn save_named<T: Scalar>(
    dir: &Path,
    config: &CheckpointConfig,
    named: &[(String, &Tensor<T>)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest: Vec<ManifestEntry> = named
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file: tensor_file_name(name),
        })
        .collect();
    for (entry, (_, t)) in manifest.iter().zip(named) {
        write_tensor(dir, entry, t)?;
    }
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

/// Reads every manifest tensor, enforcing that the manifest names exactly
/// match the expected set.
fn load_named<T: Scalar>(
    dir: &Path,
    expected: &[String],
) -> Result<HashMap<String, Tensor<T>>> {
    let manifest = read_manifest(dir)?;
    let mut map = HashMap::with_capacity(manifest.len());
    for entry in &manifest {
        if map.contains_key(&entry.name) {
            return Err(ck(format!("duplicate manifest entry '{}'", entry.name)));
        }
        map.insert(entry.name.clone(), read_tensor(dir, entry)?);
    }
    for name in expected {
        if !map.contains_key(name) {
            return Err(ck(format!("manifest is missing tensor '{name}'")));
        }
    }
    if map.len() != expected.len() {
        let extra: Vec<&String> = map
            .keys()
            .filter(|k| !expected.contains(k))
            .collect();
        return Err(ck(format!("manifest has unexpected tensors {extra:?}")));
    }
    Ok(map)
}

fn take_shaped<T: Scalar>(
    map: &mut HashMap<String, Tensor<T>>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let t = map
        .remove(name)
        .ok_or_else(|| ck(format!("manifest is missing tensor '{name}'")))?;
    if t.shape() != shape {
        return Err(ck(format!(
            "tensor '{name}': stored shape {:?} does not match expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t)
}

pub fn save_dense<T: Scalar>(dir: &Path, model: &DenseModelState<T>) -> Result<()> {
    model.config.validate()?;
    let config = CheckpointConfig {
        kind: ModelKind::Dense,
        model: model.config.clone(),
        moe: None,
    };
    save_named(dir, &config, &model.named_params())
}

pub fn load_dense<T: Scalar>(dir: &Path) -> Result<DenseModelState<T>> {
    let config = read_config(dir)?;
    if config.kind != ModelKind::Dense {
        return Err(ck(format!(
            "expected a dense checkpoint, found kind {:?}",
            config.kind
        )));
    }
    let c = config.model;
    c.validate()?;
    let mut skeleton = dense_skeleton::<T>(&c);
    let expected: Vec<String> = skeleton.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut map = load_named::<T>(dir, &expected)?;
    for (name, t) in skeleton.named_params_mut() {
        *t = take_shaped(&mut map, &name, t.shape())?;
    }
    Ok(skeleton)
}

pub fn save_moe<T: Scalar>(dir: &Path, model: &MoEModelState<T>) -> Result<()> {
    model.validate()?;
    let meta = MoEMeta {
        router: model.router_kind(),
        n_experts: model.n_experts(),
        k: model.k(),
        lb_factor: model.lb_factor,
        expert_domains: model.expert_domains.clone(),
    };
    let mut named = model.named_params();
    let domain_matrix = match model.router_kind() {
        RouterKind::DomainProjection => {
            let first = model.domain_embeddings().expect("projection router");
            for (i, b) in model.blocks.iter().enumerate() {
                let Router::DomainProjection(r) = &b.moe.router else {
                    return Err(ck("mixed router kinds across blocks"));
                };
                if r.domain_embeddings.data() != first.data() {
                    return Err(ck(format!(
                        "block {i} holds a diverged domain matrix; refusing to save"
                    )));
                }
            }
            Some(first)
        }
        RouterKind::Linear => None,
    };
    if let Some(d) = domain_matrix {
        named.push((DOMAIN_EMBEDDINGS.to_string(), d));
    }
    let config = CheckpointConfig {
        kind: ModelKind::Moe,
        model: model.config.clone(),
        moe: Some(meta),
    };
    save_named(dir, &config, &named)
}

pub fn load_moe<T: Scalar>(dir: &Path) -> Result<MoEModelState<T>> {
    let config = read_config(dir)?;
    if config.kind != ModelKind::Moe {
        return Err(ck(format!(
            "expected an MoE checkpoint, found kind {:?}",
            config.kind
        )));
    }
    let meta = config.moe.ok_or_else(|| ck("MoE checkpoint lacks the moe section"))?;
    let c = config.model;
    c.validate()?;
    if meta.expert_domains.len() != meta.n_experts {
        return Err(ck(format!(
            "{} expert domains listed for {} experts",
            meta.expert_domains.len(),
            meta.n_experts
        )));
    }

    // the domain matrix width is only recorded in the manifest
    let m = match meta.router {
        RouterKind::DomainProjection => {
            let manifest = read_manifest(dir)?;
            let entry = manifest
                .iter()
                .find(|e| e.name == DOMAIN_EMBEDDINGS)
                .ok_or_else(|| ck("projection checkpoint lacks the domain matrix"))?;
            if entry.shape.len() != 2 || entry.shape[0] != meta.n_experts {
                return Err(ck(format!(
                    "domain matrix shape {:?} does not match {} experts",
                    entry.shape, meta.n_experts
                )));
            }
            entry.shape[1]
        }
        RouterKind::Linear => 0,
    };

    let mut skeleton = moe_skeleton::<T>(&c, &meta, m);
    let mut expected: Vec<String> = skeleton.named_params().iter().map(|(n, _)| n.clone()).collect();
    if meta.router == RouterKind::DomainProjection {
        expected.push(DOMAIN_EMBEDDINGS.to_string());
    }
    let mut map = load_named::<T>(dir, &expected)?;
    for (name, t) in skeleton.named_params_mut() {
        *t = take_shaped(&mut map, &name, t.shape())?;
    }
    if meta.router == RouterKind::DomainProjection {
        let d = take_shaped(&mut map, DOMAIN_EMBEDDINGS, &[meta.n_experts, m])?;
        for b in &mut skeleton.blocks {
            let Router::DomainProjection(r) = &mut b.moe.router else {
                unreachable!("skeleton built with projection routers");
            };
            r.domain_embeddings = d.clone();
        }
    }
    skeleton.validate()?;
    Ok(skeleton)
}

/// SHA-256 over config, manifest, and every tensor file in manifest order.
/// Two checkpoints with the same hash hold identical bytes.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(dir.join(CONFIG_FILE))?);
    hasher.update(std::fs::read(dir.join(MANIFEST_FILE))?);
    for entry in read_manifest(dir)? {
        hasher.update(std::fs::read(dir.join(&entry.file))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn dense_skeleton<T: Scalar>(c: &ModelConfig) -> DenseModelState<T> {
    let d = c.d_model;
    let blocks = (0..c.n_layers)
        .map(|_| DenseBlock {
            norm: Tensor::zeros(vec![d]),
            attn: zero_attention(d),
            ffn: zero_ffn(d, c.d_ffn),
        })
        .collect();
    DenseModelState {
        config: c.clone(),
        embedding: Tensor::zeros(vec![c.vocab_size, d]),
        blocks,
        final_norm: Tensor::zeros(vec![d]),
    }
}

fn zero_attention<T: Scalar>(d: usize) -> Attention<T> {
    Attention {
        wq: Tensor::zeros(vec![d, d]),
        wk: Tensor::zeros(vec![d, d]),
        wv: Tensor::zeros(vec![d, d]),
        wo: Tensor::zeros(vec![d, d]),
    }
}

fn zero_ffn<T: Scalar>(d: usize, f: usize) -> FeedForward<T> {
    FeedForward {
        up: Tensor::zeros(vec![d, 2 * f]),
        down: Tensor::zeros(vec![f, d]),
    }
}

fn moe_skeleton<T: Scalar>(c: &ModelConfig, meta: &MoEMeta, m: usize) -> MoEModelState<T> {
    let d = c.d_model;
    let blocks = (0..c.n_layers)
        .map(|_| MoEBlock {
            norm: Tensor::zeros(vec![d]),
            attn: zero_attention(d),
            moe: MoELayer {
                shared: zero_ffn(d, c.d_ffn),
                experts: (0..meta.n_experts).map(|_| zero_ffn(d, c.d_ffn)).collect(),
                router: match meta.router {
                    RouterKind::Linear => Router::Linear(LinearRouterState {
                        weight: Tensor::zeros(vec![d, meta.n_experts]),
                    }),
                    RouterKind::DomainProjection => {
                        Router::DomainProjection(DomainProjectionState {
                            domain_embeddings: Tensor::zeros(vec![meta.n_experts, m]),
                            proj_in: Tensor::zeros(vec![m, 2 * d]),
                            proj_out: Tensor::zeros(vec![d, d]),
                            cached_expert_embeddings: None,
                        })
                    }
                },
                k: meta.k,
            },
        })
        .collect();
    MoEModelState {
        config: c.clone(),
        embedding: Tensor::zeros(vec![c.vocab_size, d]),
        blocks,
        final_norm: Tensor::zeros(vec![d]),
        expert_domains: meta.expert_domains.clone(),
        lb_factor: meta.lb_factor,
    }
}
