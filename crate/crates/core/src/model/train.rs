//! Base-model training: joint LM objective on the fact corpus plus the
//! shared two-way classification objective, so the synthetic facts are
//! actually known before any circuit is extracted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tape::Tape;

use super::{BoundParams, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 32,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// One labeled classification example, already tokenized.
#[derive(Debug, Clone)]
pub struct ClsItem {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lm_loss: f64,
    pub cls_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainMetrics {
    pub history: Vec<StepMetrics>,
    pub final_lm_loss: f64,
    pub final_cls_loss: f64,
}

/// SGD with momentum and cosine-decayed learning rate over the joint
/// objective. Deterministic given (params, data, config): batches come from
/// one seeded substream and gradients accumulate in registry order.
pub fn train_base(
    store: &mut ParamStore,
    corpus: &[Vec<usize>],
    cls_data: &[ClsItem],
    cfg: &TrainConfig,
) -> Result<TrainMetrics> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty training corpus".into()));
    }
    if cls_data.is_empty() {
        return Err(Error::Argument("empty classification data".into()));
    }
    let mut rng = substream(cfg.seed, "train");
    let names: Vec<String> = store.iter().map(|(n, _, _)| n.to_string()).collect();
    let mut velocity: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();

    let mut history = Vec::with_capacity(cfg.steps);
    let (mut last_lm, mut last_cls) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let wrap = |e: Error| Error::Training {
            step,
            msg: e.to_string(),
        };

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, store, |_| true);

        let mut lm_losses = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let seq = &corpus[rng.gen_range(0..corpus.len())];
            let logits = bound.lm_logits(&mut tape, seq).map_err(wrap)?;
            let pred = tape.slice_rows(logits, 0, seq.len() - 1).map_err(wrap)?;
            lm_losses.push(tape.cross_entropy(pred, &seq[1..]).map_err(wrap)?);
        }
        let mut cls_losses = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let item = &cls_data[rng.gen_range(0..cls_data.len())];
            let logits = bound.cls_logits(&mut tape, &item.tokens).map_err(wrap)?;
            cls_losses.push(tape.cross_entropy(logits, &[item.label]).map_err(wrap)?);
        }

        let mut mean_of = |ids: &[crate::tape::NodeId]| -> Result<crate::tape::NodeId> {
            let mut acc = ids[0];
            for &id in &ids[1..] {
                acc = tape.add(acc, id)?;
            }
            tape.scale(acc, 1.0 / ids.len() as f64)
        };
        let lm_loss = mean_of(&lm_losses).map_err(wrap)?;
        let cls_loss = mean_of(&cls_losses).map_err(wrap)?;
        let total = tape.add(lm_loss, cls_loss).map_err(wrap)?;

        last_lm = tape.value(lm_loss).item();
        last_cls = tape.value(cls_loss).item();
        if !last_lm.is_finite() || !last_cls.is_finite() {
            return Err(Error::Training {
                step,
                msg: "loss is not finite".into(),
            });
        }

        tape.backward(total).map_err(wrap)?;

        let lr_t = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let named = bound.named_nodes();
        debug_assert!(named.iter().map(|(n, _)| n).eq(names.iter()));
        for ((name, node), vel) in named.iter().zip(velocity.iter_mut()) {
            let grad = tape.grad(*node);
            let param = store.get_mut(name).expect("registry name");
            for ((p, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v + g;
                *p -= lr_t * *v;
            }
        }

        history.push(StepMetrics {
            step,
            lm_loss: last_lm,
            cls_loss: last_cls,
            lr: lr_t,
        });
    }

    Ok(TrainMetrics {
        history,
        final_lm_loss: last_lm,
        final_cls_loss: last_cls,
    })
}
