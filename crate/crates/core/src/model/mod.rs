//! A small GPT-style decoder with a named parameter registry.
//!
//! Pre-LayerNorm blocks (LN -> attention -> residual, LN -> MLP -> residual),
//! learned absolute position embeddings, an LM head weight-tied to the token
//! embedding, and a separate two-way classification head. Every parameter
//! tensor is registered under a stable name and tagged with a layer type;
//! the tag set exactly partitions the registry.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward_cls, forward_lm, nll_of_target, BoundParams};
pub use train::{train_base, ClsItem, StepMetrics, TrainConfig, TrainMetrics};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extract::CircuitMask;
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    Embedding,
    Attention,
    Mlp,
    Layernorm,
    Head,
}

impl LayerType {
    /// Attention, MLP and LayerNorm parameters take mask gates; embeddings
    /// and heads are always on.
    pub fn maskable(self) -> bool {
        matches!(self, LayerType::Attention | LayerType::Mlp | LayerType::Layernorm)
    }

    pub fn label(self) -> &'static str {
        match self {
            LayerType::Embedding => "embedding",
            LayerType::Attention => "attention",
            LayerType::Mlp => "mlp",
            LayerType::Layernorm => "layernorm",
            LayerType::Head => "head",
        }
    }
}

pub const LAYER_TYPES: [LayerType; 5] = [
    LayerType::Embedding,
    LayerType::Attention,
    LayerType::Mlp,
    LayerType::Layernorm,
    LayerType::Head,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk-scale model; vocabulary size comes from the data.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            context_len: 32,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Canonical registry layout for a config: (name, layer type, shape), in the
/// fixed iteration order shared by initialization, binding, checkpoints and
/// mask files.
pub fn registry_layout(cfg: &ModelConfig) -> Vec<(String, LayerType, Vec<usize>)> {
    let (v, c, d, ff) = (cfg.vocab_size, cfg.context_len, cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), LayerType::Embedding, vec![v, d]),
        ("pos_emb".to_string(), LayerType::Embedding, vec![c, d]),
    ];
    for i in 0..cfg.n_layers {
        let ln = LayerType::Layernorm;
        let at = LayerType::Attention;
        let ml = LayerType::Mlp;
        out.push((format!("block{i}.ln1.gain"), ln, vec![d]));
        out.push((format!("block{i}.ln1.bias"), ln, vec![d]));
        for proj in ["q", "k", "v", "out"] {
            out.push((format!("block{i}.attn.{proj}.w"), at, vec![d, d]));
            out.push((format!("block{i}.attn.{proj}.b"), at, vec![d]));
        }
        out.push((format!("block{i}.ln2.gain"), ln, vec![d]));
        out.push((format!("block{i}.ln2.bias"), ln, vec![d]));
        out.push((format!("block{i}.mlp.up.w"), ml, vec![d, ff]));
        out.push((format!("block{i}.mlp.up.b"), ml, vec![ff]));
        out.push((format!("block{i}.mlp.down.w"), ml, vec![ff, d]));
        out.push((format!("block{i}.mlp.down.b"), ml, vec![d]));
    }
    out.push(("final_ln.gain".to_string(), LayerType::Layernorm, vec![d]));
    out.push(("final_ln.bias".to_string(), LayerType::Layernorm, vec![d]));
    out.push(("cls.w".to_string(), LayerType::Head, vec![d, 2]));
    out.push(("cls.b".to_string(), LayerType::Head, vec![2]));
    out
}

/// Ordered map of named, layer-tagged parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    config: ModelConfig,
    entries: Vec<(String, LayerType, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn from_entries(config: ModelConfig, entries: Vec<(String, LayerType, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ParamStore {
            config,
            entries,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, LayerType, &Tensor)> {
        self.entries.iter().map(|(n, t, p)| (n.as_str(), *t, p))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].2)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].2)
    }

    pub fn layer_type(&self, name: &str) -> Option<LayerType> {
        self.index.get(name).map(|&i| self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn params_of_type(&self, ty: LayerType) -> usize {
        self.entries
            .iter()
            .filter(|(_, t, _)| *t == ty)
            .map(|(_, _, p)| p.numel())
            .sum()
    }

    pub fn maskable_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, t, _)| t.maskable())
            .map(|(_, _, p)| p.numel())
            .sum()
    }

    /// Content hash binding a mask or edit run to the exact checkpoint it
    /// came from: config, names, tags, shapes, and parameter bytes.
    pub fn registry_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, ty, t) in self.iter() {
            h.update(name.as_bytes());
            h.update(ty.label().as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Initialize a parameter registry: weights from seeded normal(0, 0.02),
/// biases zero, layer-norm gains one.
pub fn build_model(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "model");
    let mut entries = Vec::new();
    for (name, ty, shape) in registry_layout(cfg) {
        let t = if shape.len() >= 2 {
            Tensor::randn(shape, 0.02, &mut rng)
        } else if name.ends_with(".gain") {
            Tensor::from_vec(shape.clone(), vec![1.0; shape[0]])?
        } else {
            Tensor::zeros(shape)
        };
        entries.push((name, ty, t));
    }
    ParamStore::from_entries(cfg.clone(), entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantMode {
    Full,
    Circuit,
    Complement,
}

impl VariantMode {
    pub fn label(self) -> &'static str {
        match self {
            VariantMode::Full => "full",
            VariantMode::Circuit => "circuit",
            VariantMode::Complement => "complement",
        }
    }
}

/// A model with a mask applied: `Circuit` zeroes every maskable parameter
/// whose bit is 0, `Complement` zeroes every maskable parameter whose bit
/// is 1, `Full` ignores the mask. The zeroing is materialized, so masked
/// parameters read as exactly 0.0.
#[derive(Debug, Clone)]
pub struct ModelVariant {
    pub params: ParamStore,
    pub mode: VariantMode,
    pub circuit: Option<CircuitMask>,
}

impl ModelVariant {
    pub fn full(params: ParamStore) -> Self {
        ModelVariant {
            params,
            mode: VariantMode::Full,
            circuit: None,
        }
    }

    pub fn circuit(base: &ParamStore, mask: &CircuitMask) -> Result<Self> {
        Ok(ModelVariant {
            params: mask.materialize(base, false)?,
            mode: VariantMode::Circuit,
            circuit: Some(mask.clone()),
        })
    }

    pub fn complement(base: &ParamStore, mask: &CircuitMask) -> Result<Self> {
        Ok(ModelVariant {
            params: mask.materialize(base, true)?,
            mode: VariantMode::Complement,
            circuit: Some(mask.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_len: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            seed: 42,
        }
    }

    #[test]
    fn desk_registry_has_nine_layernorm_pairs() {
        let cfg = ModelConfig::desk(200, 1);
        let store = build_model(&cfg).unwrap();
        let ln_tensors = store
            .iter()
            .filter(|(_, t, _)| *t == LayerType::Layernorm)
            .count();
        // 4 blocks x 2 layer norms + final = 9 gain/bias pairs
        assert_eq!(ln_tensors, 18);
    }

    #[test]
    fn same_seed_bit_identical_params() {
        let cfg = tiny_cfg();
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        for ((_, _, ta), (_, _, tb)) in a.iter().zip(b.iter()) {
            let ba: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut cfg = ModelConfig::desk(200, 1);
        cfg.n_heads = 3;
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn layer_type_counts_partition_registry() {
        let store = build_model(&tiny_cfg()).unwrap();
        let by_type: usize = LAYER_TYPES.iter().map(|&t| store.params_of_type(t)).sum();
        assert_eq!(by_type, store.total_params());
    }

    #[test]
    fn registry_hash_tracks_values() {
        let store = build_model(&tiny_cfg()).unwrap();
        let h1 = store.registry_hash();
        let mut other = store.clone();
        other.get_mut("cls.b").unwrap().data_mut()[0] += 1.0;
        assert_ne!(h1, other.registry_hash());
        assert_eq!(h1, store.registry_hash());
    }

    #[test]
    fn gains_one_biases_zero() {
        let store = build_model(&tiny_cfg()).unwrap();
        assert!(store
            .get("block0.ln1.gain")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(store
            .get("block0.attn.q.b")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
