//! Binary per-parameter circuit masks.
//!
//! A mask covers exactly the maskable registry tensors (attention, MLP,
//! layer norm), in registry order. Density is derived from the stored bits,
//! never cached separately, so it cannot drift.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamStore, VariantMode};
use crate::rng::substream;
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: String,
    pub target_density: f64,
    pub seed: u64,
    pub extraction: String,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
}

/// Binary mask over every maskable parameter, with provenance and the
/// registry hash of the model it was extracted from.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitMask {
    entries: Vec<MaskEntry>,
    registry_hash: String,
    provenance: Provenance,
}

impl CircuitMask {
    pub(crate) fn new(
        entries: Vec<MaskEntry>,
        registry_hash: String,
        provenance: Provenance,
    ) -> Result<Self> {
        for e in &entries {
            let numel: usize = e.shape.iter().product();
            if numel != e.bits.len() {
                return Err(Error::Shape {
                    op: "circuit_mask",
                    lhs: e.shape.clone(),
                    rhs: vec![e.bits.len()],
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::Argument("mask with no maskable entries".into()));
        }
        Ok(CircuitMask {
            entries,
            registry_hash,
            provenance,
        })
    }

    /// Mask with every maskable parameter kept.
    pub fn all_ones(store: &ParamStore, task: &str) -> Result<Self> {
        let entries = store
            .iter()
            .filter(|(_, ty, _)| ty.maskable())
            .map(|(name, _, t)| MaskEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                bits: vec![true; t.numel()],
            })
            .collect();
        CircuitMask::new(
            entries,
            store.registry_hash(),
            Provenance {
                task: task.to_string(),
                target_density: 1.0,
                seed: 0,
                extraction: "all-ones".to_string(),
            },
        )
    }

    /// Seeded random mask with exactly `round(density * maskable)` bits set,
    /// sampled uniformly without replacement.
    pub fn random(store: &ParamStore, density: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::Argument(format!("density {density} outside [0, 1]")));
        }
        let total = store.maskable_params();
        let k = (density * total as f64).round() as usize;
        let mut rng = substream(seed, "random-mask");
        // partial Fisher-Yates over flat indices
        let mut idx: Vec<usize> = (0..total).collect();
        for i in 0..k {
            let j = rng.gen_range(i..total);
            idx.swap(i, j);
        }
        let mut flat = vec![false; total];
        for &i in &idx[..k] {
            flat[i] = true;
        }
        Self::from_flat_bits(store, &flat, Provenance {
            task: "random".to_string(),
            target_density: density,
            seed,
            extraction: "random".to_string(),
        })
    }

    /// Build from one flat bit vector laid out over the maskable registry
    /// tensors in order.
    pub fn from_flat_bits(store: &ParamStore, flat: &[bool], provenance: Provenance) -> Result<Self> {
        if flat.len() != store.maskable_params() {
            return Err(Error::Shape {
                op: "circuit_mask",
                lhs: vec![flat.len()],
                rhs: vec![store.maskable_params()],
            });
        }
        let mut entries = Vec::new();
        let mut off = 0;
        for (name, ty, t) in store.iter() {
            if !ty.maskable() {
                continue;
            }
            entries.push(MaskEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                bits: flat[off..off + t.numel()].to_vec(),
            });
            off += t.numel();
        }
        CircuitMask::new(entries, store.registry_hash(), provenance)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn registry_hash(&self) -> &str {
        &self.registry_hash
    }

    pub fn ones(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.bits.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.bits.len()).sum()
    }

    /// Fraction of maskable parameters kept; recomputed from the bits.
    pub fn density(&self) -> f64 {
        self.ones() as f64 / self.total() as f64
    }

    pub fn flat_bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.entries.iter().flat_map(|e| e.bits.iter().copied())
    }

    pub fn entry_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn bits_of(&self, name: &str) -> Option<&[bool]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.bits.as_slice())
    }

    pub fn same_layout(&self, other: &CircuitMask) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Bitwise negation. Kept count becomes `total - ones`, i.e. density
    /// becomes exactly `1 - density` as a rational.
    pub fn complement(&self) -> CircuitMask {
        let entries = self
            .entries
            .iter()
            .map(|e| MaskEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                bits: e.bits.iter().map(|&b| !b).collect(),
            })
            .collect();
        CircuitMask {
            entries,
            registry_hash: self.registry_hash.clone(),
            provenance: Provenance {
                task: self.provenance.task.clone(),
                target_density: 1.0 - self.provenance.target_density,
                seed: self.provenance.seed,
                extraction: format!("complement({})", self.provenance.extraction),
            },
        }
    }

    /// Copy of `base` with masked-out parameters set to exactly 0.0.
    /// `invert = false` zeroes bit-0 parameters (circuit view); `invert =
    /// true` zeroes bit-1 parameters (complement view).
    pub fn materialize(&self, base: &ParamStore, invert: bool) -> Result<ParamStore> {
        let mut out = base.clone();
        let mut iter = self.entries.iter();
        for (name, ty, _) in base.iter() {
            if !ty.maskable() {
                continue;
            }
            let entry = iter.next().ok_or_else(|| Error::Format(
                "mask has fewer entries than the registry".into(),
            ))?;
            if entry.name != name {
                return Err(Error::Format(format!(
                    "mask entry {} does not match registry tensor {name}",
                    entry.name
                )));
            }
        }
        for entry in &self.entries {
            let t = out
                .get_mut(&entry.name)
                .ok_or_else(|| Error::Format(format!("mask entry {} not in registry", entry.name)))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Shape {
                    op: "materialize",
                    lhs: t.shape().to_vec(),
                    rhs: entry.shape.clone(),
                });
            }
            for (v, &bit) in t.data_mut().iter_mut().zip(&entry.bits) {
                if bit == invert {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Per-entry {0, 1} gate tensors in registry order, for graph use.
    pub fn gate_tensor(&self, name: &str) -> Option<Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| {
            let data = e.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            Tensor::from_vec(e.shape.clone(), data).expect("bits are finite")
        })
    }

    /// Which variant modes may train a given maskable parameter.
    pub fn trainable_in(&self, mode: VariantMode, name: &str, flat_index: usize) -> bool {
        match mode {
            VariantMode::Full => true,
            VariantMode::Circuit => self.bits_of(name).is_some_and(|b| b[flat_index]),
            VariantMode::Complement => self.bits_of(name).is_some_and(|b| !b[flat_index]),
        }
    }
}

// ── file format ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    format_version: u32,
    registry_hash: String,
    density: f64,
    provenance: Provenance,
    entries: Vec<MaskEntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct MaskEntryMeta {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

/// Write a mask: one-line JSON header, newline, then a packed little-endian
/// bitset per tensor (row-major order, LSB first, byte-aligned per tensor).
pub fn save_mask(mask: &CircuitMask, path: &Path) -> Result<()> {
    let mut metas = Vec::with_capacity(mask.entries.len());
    let mut offset = 0u64;
    for e in &mask.entries {
        metas.push(MaskEntryMeta {
            name: e.name.clone(),
            shape: e.shape.clone(),
            byte_offset: offset,
        });
        offset += e.bits.len().div_ceil(8) as u64;
    }
    let header = MaskHeader {
        format_version: FORMAT_VERSION,
        registry_hash: mask.registry_hash.clone(),
        density: mask.density(),
        provenance: mask.provenance.clone(),
        entries: metas,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for e in &mask.entries {
        let mut packed = vec![0u8; e.bits.len().div_ceil(8)];
        for (i, &b) in e.bits.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&packed);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<CircuitMask> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("mask file missing header line".into()))?;
    let header: MaskHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported mask format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[nl + 1..];
    let mut entries = Vec::with_capacity(header.entries.len());
    for meta in &header.entries {
        let numel: usize = meta.shape.iter().product();
        let nbytes = numel.div_ceil(8);
        let start = meta.byte_offset as usize;
        let end = start + nbytes;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "mask payload truncated at entry {}",
                meta.name
            )));
        }
        let packed = &payload[start..end];
        let bits = (0..numel)
            .map(|i| packed[i / 8] & (1 << (i % 8)) != 0)
            .collect();
        entries.push(MaskEntry {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            bits,
        });
    }
    let mask = CircuitMask::new(entries, header.registry_hash, header.provenance)?;
    if mask.density() != header.density {
        return Err(Error::Format(format!(
            "mask header density {} disagrees with bit density {}",
            header.density,
            mask.density()
        )));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny_store() -> ParamStore {
        build_model(&ModelConfig {
            vocab_size: 11,
            context_len: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn complement_is_involution_with_zero_overlap() {
        let store = tiny_store();
        let m = CircuitMask::random(&store, 0.3, 5).unwrap();
        let c = m.complement();
        assert_eq!(c.ones(), m.total() - m.ones());
        let back = c.complement();
        assert!(m.flat_bits().eq(back.flat_bits()));
        let both = m
            .flat_bits()
            .zip(c.flat_bits())
            .filter(|&(a, b)| a && b)
            .count();
        assert_eq!(both, 0);
    }

    #[test]
    fn random_mask_has_exact_cardinality() {
        let store = tiny_store();
        let total = store.maskable_params();
        for density in [0.0, 0.05, 0.5, 1.0] {
            let m = CircuitMask::random(&store, density, 11).unwrap();
            assert_eq!(m.ones(), (density * total as f64).round() as usize);
        }
    }

    #[test]
    fn random_masks_reproducible_per_seed() {
        let store = tiny_store();
        let a = CircuitMask::random(&store, 0.25, 3).unwrap();
        let b = CircuitMask::random(&store, 0.25, 3).unwrap();
        let c = CircuitMask::random(&store, 0.25, 4).unwrap();
        assert!(a.flat_bits().eq(b.flat_bits()));
        assert!(!a.flat_bits().eq(c.flat_bits()));
    }

    #[test]
    fn materialize_zeroes_exactly_the_masked_out_set() {
        let store = tiny_store();
        let m = CircuitMask::random(&store, 0.5, 7).unwrap();
        let circuit = m.materialize(&store, false).unwrap();
        let complement = m.materialize(&store, true).unwrap();
        for entry_name in m.entry_names().map(str::to_string).collect::<Vec<_>>() {
            let bits = m.bits_of(&entry_name).unwrap();
            let base = store.get(&entry_name).unwrap().data();
            let circ = circuit.get(&entry_name).unwrap().data();
            let comp = complement.get(&entry_name).unwrap().data();
            for i in 0..bits.len() {
                if bits[i] {
                    assert_eq!(circ[i].to_bits(), base[i].to_bits());
                    assert_eq!(comp[i].to_bits(), 0.0f64.to_bits());
                } else {
                    assert_eq!(circ[i].to_bits(), 0.0f64.to_bits());
                    assert_eq!(comp[i].to_bits(), base[i].to_bits());
                }
            }
        }
        // non-maskable tensors untouched in both views
        for (name, ty, t) in store.iter() {
            if !ty.maskable() {
                assert_eq!(t.data(), circuit.get(name).unwrap().data());
                assert_eq!(t.data(), complement.get(name).unwrap().data());
            }
        }
    }

    #[test]
    fn mask_file_round_trip_bit_exact() {
        let store = tiny_store();
        let m = CircuitMask::random(&store, 0.37, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask");
        save_mask(&m, &path).unwrap();
        let loaded = load_mask(&path).unwrap();
        assert_eq!(m, loaded);
        let path2 = dir.path().join("m2.mask");
        save_mask(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
