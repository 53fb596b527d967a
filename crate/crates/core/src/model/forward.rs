//! Forward passes: causal LM logits, 2-way classification logits, and
//! teacher-forced target NLL.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::{registry_layout, ModelConfig, ModelVariant, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-5;
// Finite stand-in for -inf so masked attention scores underflow to exactly
// zero probability without tripping the finiteness checks.
const NEG_LARGE: f64 = -1e30;

struct BoundBlock {
    ln1: (NodeId, NodeId),
    q: (NodeId, NodeId),
    k: (NodeId, NodeId),
    v: (NodeId, NodeId),
    out: (NodeId, NodeId),
    ln2: (NodeId, NodeId),
    up: (NodeId, NodeId),
    down: (NodeId, NodeId),
}

/// Parameter tensors resolved to tape nodes. The resolver decides whether a
/// given tensor enters the graph as a trainable input, a constant, or a
/// gated product; this struct only fixes which names feed which op.
pub struct BoundParams {
    cfg: ModelConfig,
    tok_emb: NodeId,
    pos_emb: NodeId,
    blocks: Vec<BoundBlock>,
    final_ln: (NodeId, NodeId),
    cls: (NodeId, NodeId),
}

impl BoundParams {
    pub fn from_nodes(
        cfg: &ModelConfig,
        mut resolve: impl FnMut(&str) -> NodeId,
    ) -> Self {
        let mut pair = |base: &str| (resolve(&format!("{base}.gain")), resolve(&format!("{base}.bias")));
        let tok_emb = resolve("tok_emb");
        let pos_emb = resolve("pos_emb");
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let ln1 = pair(&format!("block{i}.ln1"));
            let ln2 = pair(&format!("block{i}.ln2"));
            let mut wb = |base: String| (resolve(&format!("{base}.w")), resolve(&format!("{base}.b")));
            blocks.push(BoundBlock {
                ln1,
                q: wb(format!("block{i}.attn.q")),
                k: wb(format!("block{i}.attn.k")),
                v: wb(format!("block{i}.attn.v")),
                out: wb(format!("block{i}.attn.out")),
                ln2,
                up: wb(format!("block{i}.mlp.up")),
                down: wb(format!("block{i}.mlp.down")),
            });
        }
        let final_ln = pair("final_ln");
        let cls = (resolve("cls.w"), resolve("cls.b"));
        BoundParams {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
            cls,
        }
    }

    /// Bind a store's tensors directly; `trainable` decides per name whether
    /// the tensor is a differentiable input or a constant.
    pub fn bind(
        tape: &mut Tape,
        store: &ParamStore,
        mut trainable: impl FnMut(&str) -> bool,
    ) -> Self {
        let mut nodes = std::collections::HashMap::new();
        for (name, _, t) in store.iter() {
            let id = if trainable(name) {
                tape.input(t.clone())
            } else {
                tape.constant(t.clone())
            };
            nodes.insert(name.to_string(), id);
        }
        BoundParams::from_nodes(store.config(), |name| nodes[name])
    }

    /// Every registry name, in canonical order, with its bound node.
    pub fn named_nodes(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        let layout = registry_layout(&self.cfg);
        for (name, _, _) in layout {
            out.push((name.clone(), self.node_for(&name)));
        }
        out
    }

    fn node_for(&self, name: &str) -> NodeId {
        match name {
            "tok_emb" => self.tok_emb,
            "pos_emb" => self.pos_emb,
            "final_ln.gain" => self.final_ln.0,
            "final_ln.bias" => self.final_ln.1,
            "cls.w" => self.cls.0,
            "cls.b" => self.cls.1,
            _ => {
                let rest = name.strip_prefix("block").expect("registry name");
                let dot = rest.find('.').expect("registry name");
                let i: usize = rest[..dot].parse().expect("block index");
                let b = &self.blocks[i];
                match &rest[dot + 1..] {
                    "ln1.gain" => b.ln1.0,
                    "ln1.bias" => b.ln1.1,
                    "attn.q.w" => b.q.0,
                    "attn.q.b" => b.q.1,
                    "attn.k.w" => b.k.0,
                    "attn.k.b" => b.k.1,
                    "attn.v.w" => b.v.0,
                    "attn.v.b" => b.v.1,
                    "attn.out.w" => b.out.0,
                    "attn.out.b" => b.out.1,
                    "ln2.gain" => b.ln2.0,
                    "ln2.bias" => b.ln2.1,
                    "mlp.up.w" => b.up.0,
                    "mlp.up.b" => b.up.1,
                    "mlp.down.w" => b.down.0,
                    "mlp.down.b" => b.down.1,
                    other => panic!("unknown registry entry {other}"),
                }
            }
        }
    }

    /// Backbone up to and including the final layer norm: `[T x d_model]`.
    pub fn backbone(&self, tape: &mut Tape, tokens: &[usize]) -> Result<NodeId> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if t_len > self.cfg.context_len {
            return Err(Error::Argument(format!(
                "sequence length {t_len} exceeds context_len {}",
                self.cfg.context_len
            )));
        }
        let tok = tape.gather_rows(self.tok_emb, tokens)?;
        let pos = tape.slice_rows(self.pos_emb, 0, t_len)?;
        let mut x = tape.add(tok, pos)?;

        let causal = tape.constant(causal_mask(t_len));
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        for block in &self.blocks {
            // LN -> attention -> residual
            let xn = tape.layer_norm(x, block.ln1.0, block.ln1.1, LN_EPS)?;
            let q = linear(tape, xn, block.q)?;
            let k = linear(tape, xn, block.k)?;
            let v = linear(tape, xn, block.v)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            let hd = self.cfg.head_dim();
            for h in 0..self.cfg.n_heads {
                let (lo, hi) = (h * hd, (h + 1) * hd);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add(scores, causal)?;
                let attn = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = linear(tape, merged, block.out)?;
            x = tape.add(x, attn_out)?;

            // LN -> MLP -> residual
            let xn = tape.layer_norm(x, block.ln2.0, block.ln2.1, LN_EPS)?;
            let up = linear(tape, xn, block.up)?;
            let act = tape.gelu(up)?;
            let down = linear(tape, act, block.down)?;
            x = tape.add(x, down)?;
        }
        tape.layer_norm(x, self.final_ln.0, self.final_ln.1, LN_EPS)
    }

    /// Next-token logits `[T x vocab]` through the weight-tied LM head.
    pub fn lm_logits(&self, tape: &mut Tape, tokens: &[usize]) -> Result<NodeId> {
        let h = self.backbone(tape, tokens)?;
        let head = tape.transpose(self.tok_emb)?;
        tape.matmul(h, head)
    }

    /// Two-way classification logits `[1 x 2]` from the final position.
    pub fn cls_logits(&self, tape: &mut Tape, tokens: &[usize]) -> Result<NodeId> {
        let h = self.backbone(tape, tokens)?;
        let t_len = tokens.len();
        let last = tape.slice_rows(h, t_len - 1, t_len)?;
        let logits = tape.matmul(last, self.cls.0)?;
        tape.add_bias(logits, self.cls.1)
    }
}

fn linear(tape: &mut Tape, x: NodeId, wb: (NodeId, NodeId)) -> Result<NodeId> {
    let y = tape.matmul(x, wb.0)?;
    tape.add_bias(y, wb.1)
}

fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = NEG_LARGE;
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("mask is finite")
}

/// Next-token logits for a variant, `[T x vocab]`.
pub fn forward_lm(variant: &ModelVariant, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &variant.params, |_| false);
    let out = bound.lm_logits(&mut tape, tokens)?;
    Ok(tape.value(out).clone())
}

/// Class logits for a variant, `[2]`.
pub fn forward_cls(variant: &ModelVariant, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &variant.params, |_| false);
    let out = bound.cls_logits(&mut tape, tokens)?;
    let row = tape.value(out).data().to_vec();
    Tensor::from_vec(vec![2], row)
}

/// Predicted class for one example.
pub fn predict_cls(variant: &ModelVariant, tokens: &[usize]) -> Result<usize> {
    let logits = forward_cls(variant, tokens)?;
    Ok(if logits.data()[1] > logits.data()[0] { 1 } else { 0 })
}

/// Teacher-forced negative log probability of `target` given `prompt`,
/// summed over target tokens (the log of the sequence probability).
pub fn nll_of_target(variant: &ModelVariant, prompt: &[usize], target: &[usize]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Argument("empty target".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Argument("empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(target);
    let logits = forward_lm(variant, &tokens)?;
    let v = logits.cols();
    let mut nll = 0.0;
    for (i, &tok) in target.iter().enumerate() {
        let pos = prompt.len() + i - 1;
        let row = &logits.data()[pos * v..(pos + 1) * v];
        nll -= log_softmax_at(row, tok);
    }
    Ok(nll)
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny_variant() -> ModelVariant {
        let cfg = ModelConfig {
            vocab_size: 13,
            context_len: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            seed: 7,
        };
        ModelVariant::full(build_model(&cfg).unwrap())
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn causality_prefix_logits_bit_identical() {
        let variant = tiny_variant();
        let short = forward_lm(&variant, &[1, 2, 3, 4]).unwrap();
        let long = forward_lm(&variant, &[1, 2, 3, 4, 5]).unwrap();
        let v = short.cols();
        assert_eq!(
            bits(&short),
            long.data()[..4 * v]
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn token_out_of_vocab_is_index_error() {
        let variant = tiny_variant();
        assert!(matches!(
            forward_lm(&variant, &[1, 13]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn sequence_longer_than_context_rejected() {
        let variant = tiny_variant();
        let toks: Vec<usize> = (0..11).map(|i| i % 13).collect();
        assert!(forward_lm(&variant, &toks).is_err());
    }

    #[test]
    fn zeroed_cls_head_gives_even_logits() {
        let mut variant = tiny_variant();
        for name in ["cls.w", "cls.b"] {
            for v in variant.params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let logits = forward_cls(&variant, &[1, 2, 3]).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
    }

    #[test]
    fn swapping_cls_rows_flips_prediction() {
        let variant = tiny_variant();
        let logits = forward_cls(&variant, &[5, 6, 7]).unwrap();

        let mut swapped = variant.clone();
        let w = swapped.params.get_mut("cls.w").unwrap();
        let d = w.rows();
        for r in 0..d {
            w.data_mut().swap(r * 2, r * 2 + 1);
        }
        let b = swapped.params.get_mut("cls.b").unwrap();
        b.data_mut().swap(0, 1);
        let logits_swapped = forward_cls(&swapped, &[5, 6, 7]).unwrap();
        assert_eq!(logits.data()[0], logits_swapped.data()[1]);
        assert_eq!(logits.data()[1], logits_swapped.data()[0]);
    }

    #[test]
    fn uniform_model_nll_is_ln_vocab() {
        // zero all parameters except embeddings-as-zero too: every logit 0
        let mut variant = tiny_variant();
        let names: Vec<String> = variant.params.iter().map(|(n, _, _)| n.to_string()).collect();
        for n in names {
            for v in variant.params.get_mut(&n).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let nll = nll_of_target(&variant, &[1, 2], &[3]).unwrap();
        assert!((nll - (13f64).ln()).abs() < 1e-12);
        let nll2 = nll_of_target(&variant, &[1, 2], &[3, 4]).unwrap();
        assert!((nll2 - 2.0 * (13f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_per_step_softmax_chain() {
        let variant = tiny_variant();
        let prompt = [1usize, 2, 3];
        let target = [4usize, 5, 6];
        let nll = nll_of_target(&variant, &prompt, &target).unwrap();

        // independent chain-rule oracle: product of per-step probabilities
        let mut log_p = 0.0;
        let mut ctx = prompt.to_vec();
        for &t in &target {
            let logits = forward_lm(&variant, &ctx).unwrap();
            let v = logits.cols();
            let row = &logits.data()[(ctx.len() - 1) * v..ctx.len() * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let p = ((row[t] - max).exp()) / z;
            log_p += p.ln();
            ctx.push(t);
        }
        assert!((nll + log_p).abs() < 1e-10, "nll {nll} vs chain {}", -log_p);
    }

    #[test]
    fn empty_target_rejected() {
        let variant = tiny_variant();
        assert!(nll_of_target(&variant, &[1], &[]).is_err());
    }
}
