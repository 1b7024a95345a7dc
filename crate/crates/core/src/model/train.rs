use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, Mode, ModelState, TrainSchedule};
use crate::corpus::CorpusRecord;
use crate::corruption::{corrupt, sample_mask_plan, DEFAULT_MASK_RATE, DEFAULT_MEAN_SPAN, DEFAULT_MIN_SPAN};
use crate::error::{Error, Result};
use crate::property::{PropertyBucket, PropertySpec};
use crate::vocab::{TokenId, Vocabulary, MAX_CONTENT_TOKENS};

/// Redraws allowed when the sampler returns an empty plan.
const PLAN_REDRAWS: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainLog {
    /// Mean token loss of each step's batch.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the first `n` and last `n` steps.
    pub fn head_tail_means(&self, n: usize) -> (f64, f64) {
        let n = n.min(self.losses.len()).max(1);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        (mean(&self.losses[..n]), mean(&self.losses[self.losses.len().saturating_sub(n)..]))
    }
}

/// Runs `schedule.steps` optimizer updates of the conditional infilling
/// objective. Each example masks a fresh plan and is labelled with the
/// bucket of the record's own property value.
pub fn train(
    state: &mut ModelState,
    vocab: &Vocabulary,
    records: &[CorpusRecord],
    spec: &PropertySpec,
    schedule: &TrainSchedule,
    optimizer: AdamWConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainLog> {
    if state.step == 0 {
        state.property = *spec;
    }
    state.check_compatible(vocab, spec)?;
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let usable: Vec<(&[TokenId], PropertyBucket)> = records
        .iter()
        .filter(|r| !r.has_unk && !r.ids().is_empty())
        .filter_map(|r| {
            let ids = &r.ids()[..r.ids().len().min(MAX_CONTENT_TOKENS)];
            spec.bucketize(r.property_value).ok().map(|b| (ids, b))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let decay: Vec<bool> = (0..state.params.len()).map(|i| state.layout.decays(i)).collect();
    let mut opt = AdamW::new(optimizer, &state.params);
    let mut log = TrainLog::default();
    let mut batch = Vec::with_capacity(schedule.batch_size);
    for _ in 0..schedule.steps {
        batch.clear();
        for _ in 0..schedule.batch_size {
            let (ids, bucket) = usable[rng.random_range(0..usable.len())];
            let mut plan = sample_mask_plan(rng, ids.len(), DEFAULT_MASK_RATE, DEFAULT_MEAN_SPAN, DEFAULT_MIN_SPAN);
            for _ in 0..PLAN_REDRAWS {
                if !plan.is_empty() {
                    break;
                }
                plan = sample_mask_plan(rng, ids.len(), DEFAULT_MASK_RATE, DEFAULT_MEAN_SPAN, DEFAULT_MIN_SPAN);
            }
            batch.push(corrupt(vocab, ids, &plan, bucket)?);
        }
        let mut mode = Mode {
            dropout: state.config.dropout,
            rng: Some(&mut *rng),
        };
        let (loss, mut grads) = state.loss_and_grad_inner(vocab, &batch, &mut mode)?;
        let lr = schedule.learning_rate(state.step + 1);
        let norm = opt.step(&mut state.params, &mut grads, &decay, lr);
        state.step += 1;
        log.losses.push(loss);
        log.grad_norms.push(norm);
    }
    Ok(log)
}
