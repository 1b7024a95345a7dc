//! Interactive editing: mask spans of one name, retarget the property token and
//! collect ranked candidates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{apply_infill, corrupt, InfillResult, MaskPlan, Validity};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, sample_decode, ModelState};
use crate::property::{PropertyBucket, PropertySpec};
use crate::vocab::{TokenId, Vocabulary};

/// Upper bound on sampled candidates per request.
pub const MAX_CANDIDATES: usize = 64;
/// Decode cap for interactive requests.
pub const EDIT_DECODE_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "camelCase")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub result: InfillResult,
    /// Set only for `Valid` candidates the scorer could evaluate.
    pub property_after: Option<f64>,
    pub bucket_after: Option<PropertyBucket>,
}

/// Orders candidates: valid and scored first, best in the target direction;
/// `Med` prefers values nearest the middle of the medium range.
fn rank_key(c: &Candidate, target: PropertyBucket, spec: &PropertySpec) -> (u8, f64) {
    match c.property_after {
        Some(v) => {
            let score = match target {
                PropertyBucket::High => -v,
                PropertyBucket::Low => v,
                PropertyBucket::Med => (v - 0.5 * (spec.low_cut + spec.high_cut)).abs(),
            };
            (0, score)
        }
        None if c.result.validity == Validity::Identity => (1, 0.0),
        None => (2, 0.0),
    }
}

/// Masks `plan` in `source`, asks for `target` and returns candidates
/// deduplicated by reconstructed name and ranked toward the target.
/// `score` maps a candidate name and its tokens to a property value.
pub fn propose_edits(
    state: &ModelState,
    vocab: &Vocabulary,
    source: &[TokenId],
    plan: &MaskPlan,
    target: PropertyBucket,
    decode: DecodeMode,
    score: &dyn Fn(&str, &[TokenId]) -> Option<f64>,
) -> Result<Vec<Candidate>> {
    if plan.is_empty() {
        return Err(Error::InvalidPlan("at least one span is required".into()));
    }
    let ex = corrupt(vocab, source, plan, target)?;
    let generations: Vec<Vec<TokenId>> = match decode {
        DecodeMode::Greedy => vec![greedy_decode(state, vocab, &ex.encoder_input, EDIT_DECODE_LEN)?.tokens],
        DecodeMode::Sample { temperature, k, seed } => {
            if k == 0 || k > MAX_CANDIDATES {
                return Err(Error::Config(format!("k must be in 1..={MAX_CANDIDATES}, got {k}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..k)
                .map(|_| sample_decode(state, vocab, &ex.encoder_input, temperature, &mut rng, EDIT_DECODE_LEN).map(|d| d.tokens))
                .collect::<Result<_>>()?
        }
    };

    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for generated in generations {
        let result = apply_infill(vocab, &ex.encoder_input, &generated, Some(source));
        let key = result.candidate_name.clone().unwrap_or_else(|| format!("{generated:?}"));
        if !seen.insert(key) {
            continue;
        }
        let property_after = match (&result.reconstructed, &result.candidate_name) {
            (Some(rec), Some(name)) if result.validity == Validity::Valid => score(name, rec),
            _ => None,
        };
        let bucket_after = property_after.and_then(|v| state.property.bucketize(v).ok());
        out.push(Candidate {
            result,
            property_after,
            bucket_after,
        });
    }
    out.sort_by(|a, b| {
        let (ka, kb) = (rank_key(a, target, &state.property), rank_key(b, target, &state.property));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    Ok(out)
}
