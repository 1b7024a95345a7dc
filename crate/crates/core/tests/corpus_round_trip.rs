use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iupac_infill::corpus::{bucket_histogram, generate_synthetic_corpus, CorpusIndex};
use iupac_infill::corruption::{apply_infill, corrupt, sample_mask_plan, Validity, DEFAULT_MASK_RATE, DEFAULT_MEAN_SPAN, DEFAULT_MIN_SPAN};
use iupac_infill::{proxy_property, PropertyBucket, PropertyKind, PropertySpec, TokenId, Vocabulary};

#[test]
fn thousand_corpus_names_round_trip() {
    let vocab = Vocabulary::reference();
    let records = generate_synthetic_corpus(&vocab, 12, 1000).unwrap();
    for r in &records {
        assert!(!r.has_unk, "{}", r.name);
        assert_eq!(vocab.detokenize(&r.tokens).unwrap(), r.name);
        // The synthetic property is exactly the proxy.
        assert_eq!(proxy_property(&vocab, r.ids()).unwrap(), r.property_value);
    }
}

#[test]
fn ten_thousand_records_fill_every_bucket() {
    let vocab = Vocabulary::reference();
    let records = generate_synthetic_corpus(&vocab, 1, 10_000).unwrap();
    let hist = bucket_histogram(&records, &PropertySpec::shipped(PropertyKind::Proxy));
    assert!(hist.iter().all(|&c| c >= 1000), "{hist:?}");
}

#[test]
fn token_frequencies_match_a_brute_force_count() {
    let vocab = Vocabulary::reference();
    let records = generate_synthetic_corpus(&vocab, 6, 2000).unwrap();
    let index = CorpusIndex::build(&vocab, &records);
    let stream: Vec<TokenId> = records.iter().flat_map(|r| r.ids().iter().copied()).collect();
    let mut counts: HashMap<TokenId, u64> = HashMap::new();
    for &t in &stream {
        *counts.entry(t).or_default() += 1;
    }
    assert_eq!(index.total_tokens(), stream.len() as u64);
    for id in (0..vocab.len()).map(TokenId::from) {
        let c = counts.get(&id).copied().unwrap_or(0);
        assert_eq!(index.token_count(id), c);
        assert_eq!(index.token_freq(id), c as f64 / stream.len() as f64);
    }
}

#[test]
fn corrupt_then_apply_is_identity_on_corpus_names() {
    let vocab = Vocabulary::reference();
    let records = generate_synthetic_corpus(&vocab, 8, 2000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut masked = 0;
    for i in 0..10_000 {
        let ids = records[i % records.len()].ids();
        let plan = sample_mask_plan(&mut rng, ids.len(), DEFAULT_MASK_RATE, DEFAULT_MEAN_SPAN, DEFAULT_MIN_SPAN);
        let bucket = PropertyBucket::ALL[rng.random_range(0..3)];
        let ex = corrupt(&vocab, ids, &plan, bucket).unwrap();
        let back = apply_infill(&vocab, &ex.encoder_input, &ex.decoder_target, Some(ids));
        assert_eq!(back.reconstructed.as_deref(), Some(ids));
        assert_eq!(back.validity, Validity::Identity);
        masked += plan.spans.len();
    }
    // Short names often draw zero spans; the empty plan must round-trip too.
    assert!(masked > 3000, "{masked}");
}
