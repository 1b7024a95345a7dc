//! Trains the reference-width model once and checks the curve and the decoder.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iupac_infill::corpus::{generate_synthetic_corpus, split, CorpusRecord};
use iupac_infill::corruption::{apply_infill, corrupt, MaskPlan, Validity};
use iupac_infill::model::{greedy_decode, sample_decode, train, AdamWConfig, ModelConfig, ModelState, TrainLog, TrainSchedule};
use iupac_infill::{PropertyBucket, PropertyKind, PropertySpec, Vocabulary};

struct Trained {
    vocab: Vocabulary,
    model: ModelState,
    log: TrainLog,
    held_out: Vec<CorpusRecord>,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let vocab = Vocabulary::reference();
        let spec = PropertySpec::shipped(PropertyKind::Proxy);
        let records = generate_synthetic_corpus(&vocab, 3, 10_000).unwrap();
        let (train_set, held_out) = split(&records, 0.1, 0);
        let cfg = ModelConfig {
            model_dim: 128,
            ff_dim: 512,
            heads: 4,
            layers: 2,
            seed: 5,
            ..ModelConfig::small(vocab.len())
        };
        // A small batch keeps the 2000 steps at this width affordable.
        let schedule = TrainSchedule {
            batch_size: 8,
            steps: 2000,
            ..TrainSchedule::default()
        };
        let mut model = ModelState::new(cfg, &vocab, spec).unwrap();
        let log = train(&mut model, &vocab, &train_set, &spec, &schedule, AdamWConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        Trained { vocab, model, log, held_out }
    })
}

#[test]
fn loss_falls_by_at_least_thirty_percent() {
    let t = trained();
    assert_eq!(t.log.losses.len(), 2000);
    let (head, tail) = t.log.head_tail_means(100);
    eprintln!("first 100 steps {head:.4}, last 100 steps {tail:.4}");
    assert!(tail <= 0.7 * head, "head {head} tail {tail}");
}

/// Masks the middle token of each held-out name.
fn held_out_encoders(t: &Trained, bucket: PropertyBucket) -> Vec<Vec<iupac_infill::TokenId>> {
    t.held_out
        .iter()
        .filter(|r| !r.has_unk && r.ids().len() >= 3)
        .take(200)
        .map(|r| corrupt(&t.vocab, r.ids(), &MaskPlan::single(r.ids().len() / 2, 1), bucket).unwrap().encoder_input)
        .collect()
}

#[test]
fn greedy_output_has_the_sentinel_shape() {
    let t = trained();
    let encoders = held_out_encoders(t, PropertyBucket::High);
    let parsed = encoders
        .iter()
        .filter(|enc| {
            let out = greedy_decode(&t.model, &t.vocab, enc, 48).unwrap().tokens;
            apply_infill(&t.vocab, enc, &out, None).validity != Validity::SentinelMismatch
        })
        .count();
    let rate = parsed as f64 / encoders.len() as f64;
    eprintln!("{parsed}/{} held-out encoders parse as <s1> fragment <s2>", encoders.len());
    assert!(rate >= 0.9, "parse rate {rate}");
}

#[test]
fn sampling_at_unit_temperature_is_diverse() {
    let t = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let diverse = held_out_encoders(t, PropertyBucket::Low).iter().take(10).any(|enc| {
        let outs: HashSet<Vec<_>> = (0..100)
            .map(|_| sample_decode(&t.model, &t.vocab, enc, 1.0, &mut rng, 48).unwrap().tokens)
            .collect();
        outs.len() >= 2
    });
    assert!(diverse);
}
