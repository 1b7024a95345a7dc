use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iupac_infill::corpus::{generate_synthetic_corpus, CorpusIndex, CorpusRecord};
use iupac_infill::corruption::{InfillResult, MaskPlan, Validity};
use iupac_infill::eval::{
    baseline_eligible, enumerate_span_pairs, enumerate_spans, novelty, run_edit_job, token_preference, EditJob, EditOutcome, EvalRow,
    Infiller, InfillerInfo, DEFAULT_SPAN_LENGTHS,
};
use iupac_infill::{PropertyBucket, PropertyKind, PropertySpec, TokenId, Vocabulary};

/// Tries every span of length 1..=`max_span` and the replacement the candidate implies.
fn splice_oracle(source: &[TokenId], candidate: &[TokenId], max_span: usize) -> bool {
    if source == candidate {
        return false;
    }
    let n = source.len();
    for start in 0..n {
        for len in 1..=max_span.min(n - start) {
            let tail = n - start - len;
            if candidate.len() < start + tail {
                continue;
            }
            let fill = &candidate[start..candidate.len() - tail];
            let mut spliced = source[..start].to_vec();
            spliced.extend_from_slice(fill);
            spliced.extend_from_slice(&source[start + len..]);
            if spliced == candidate {
                return true;
            }
        }
    }
    false
}

#[test]
fn baseline_eligibility_agrees_with_the_splice_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut eligible = 0;
    for _ in 0..10_000 {
        // A small alphabet makes coincidental prefix and suffix matches common.
        let alphabet = rng.random_range(2..5u32);
        let n = rng.random_range(1..=20);
        let source: Vec<TokenId> = (0..n).map(|_| TokenId(rng.random_range(0..alphabet))).collect();
        let candidate: Vec<TokenId> = match rng.random_range(0..3) {
            0 => (0..rng.random_range(0..=20)).map(|_| TokenId(rng.random_range(0..alphabet))).collect(),
            1 => source.clone(),
            _ => {
                let start = rng.random_range(0..n);
                let len = rng.random_range(0..=(n - start).min(7));
                let mut c = source[..start].to_vec();
                c.extend((0..rng.random_range(0..=7)).map(|_| TokenId(rng.random_range(0..alphabet))));
                c.extend_from_slice(&source[start + len..]);
                c
            }
        };
        let want = splice_oracle(&source, &candidate, 5);
        assert_eq!(baseline_eligible(&source, &candidate, 5), want, "source {source:?} candidate {candidate:?}");
        eligible += usize::from(want);
    }
    assert!(eligible > 1000, "fixture too easy: {eligible} eligible pairs");
}

#[test]
fn span_enumeration_counts() {
    for n in 1..=200usize {
        let expected: usize = DEFAULT_SPAN_LENGTHS.map(|l| (n + 1).saturating_sub(l)).sum();
        let plans = enumerate_spans(n, DEFAULT_SPAN_LENGTHS);
        assert_eq!(plans.len(), expected, "n = {n}");
        assert!(plans.iter().all(|p| p.validate(n).is_ok()));
    }
    assert_eq!(enumerate_spans(128, DEFAULT_SPAN_LENGTHS).len(), 630);
    let three: Vec<_> = enumerate_spans(3, DEFAULT_SPAN_LENGTHS).into_iter().map(|p| (p.spans[0].start, p.spans[0].len)).collect();
    assert_eq!(three, [(0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (2, 1)]);
}

#[test]
fn span_pairs_match_brute_force() {
    for n in 1..=14usize {
        let mut want = 0;
        for a in 0..n {
            for la in 1..=5 {
                for b in 0..n {
                    for lb in 1..=5 {
                        if a + la <= n && b + lb <= n && b > a + la {
                            want += 1;
                        }
                    }
                }
            }
        }
        let got = enumerate_span_pairs(n, DEFAULT_SPAN_LENGTHS);
        assert_eq!(got.len(), want, "n = {n}");
        assert!(got.iter().all(|p| p.validate(n).is_ok()));
    }
}

fn outcome(name: Option<&str>, validity: Validity, generated: u32) -> EditOutcome {
    EditOutcome {
        plan: MaskPlan::single(0, 1),
        result: InfillResult {
            generated: vec![TokenId(generated)],
            validity,
            fragments: None,
            reconstructed: None,
            candidate_name: name.map(str::to_string),
        },
        property: None,
    }
}

#[test]
fn novelty_hand_fixture() {
    let vocab = Vocabulary::reference();
    let records: Vec<CorpusRecord> = ["2-chloropentane", "ethylbenzene", "propane"]
        .iter()
        .map(|n| CorpusRecord::new(&vocab, n, 0.0).unwrap())
        .collect();
    let index = CorpusIndex::build(&vocab, &records);
    let source = records[2].clone();
    // Five generations: two already in the corpus, one equal to the source and
    // two new, one of which could not be rendered.
    let results = [
        outcome(Some("2-chloropentane"), Validity::Valid, 1),
        outcome(Some("ethylbenzene"), Validity::Valid, 2),
        outcome(Some("propane"), Validity::RoundTripFail, 3),
        outcome(Some("2-bromopentane"), Validity::Valid, 4),
        outcome(None, Validity::SentinelMismatch, 5),
    ];
    assert_eq!(novelty(&results, &index, &source), 2.0 / 4.0);
    assert_eq!(novelty(&[], &index, &source), 0.0);
}

fn fixture_vocab() -> Vocabulary {
    Vocabulary::from_tsv_str("# version: fixture\ndecyl\tGroup\t5\noxy\tGroup\t-0.4\nx\tGroup\t0\n").unwrap()
}

#[test]
fn token_preference_hand_fixture() {
    let vocab = fixture_vocab();
    let name = format!("decyl{}{}", "oxy".repeat(10), "x".repeat(19));
    let record = CorpusRecord::new(&vocab, &name, 1.0).unwrap();
    assert_eq!(record.ids().len(), 30);
    let index = CorpusIndex::build(&vocab, &[record]);
    let decyl = vocab.id("decyl").unwrap();
    let oxy = vocab.id("oxy").unwrap();
    let rows = token_preference(PropertyBucket::High, &[vec![decyl], vec![decyl], vec![oxy]], &index);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].token, decyl);
    assert!((rows[0].multiplier.unwrap() - 20.0).abs() < 1e-12);
    assert!((rows[1].multiplier.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_fragments_give_inverse_frequency_multipliers() {
    let vocab = Vocabulary::reference();
    let records = generate_synthetic_corpus(&vocab, 3, 500).unwrap();
    let index = CorpusIndex::build(&vocab, &records);
    let content: Vec<TokenId> = (0..vocab.len()).map(TokenId::from).filter(|&t| vocab.is_content(t)).collect();
    let fragments: Vec<Vec<TokenId>> = content.iter().map(|&t| vec![t]).collect();
    let rows = token_preference(PropertyBucket::Low, &fragments, &index);
    assert_eq!(rows.len(), content.len());
    let share = 1.0 / content.len() as f64;
    for r in &rows {
        match r.multiplier {
            Some(m) => assert!((m * index.token_freq(r.token) - share).abs() < 1e-12),
            None => assert_eq!(index.token_count(r.token), 0),
        }
    }
    // Rarer tokens rank higher.
    let freqs: Vec<f64> = rows.iter().filter(|r| r.multiplier.is_some()).map(|r| r.baseline_rate).collect();
    assert!(freqs.windows(2).all(|w| w[0] <= w[1]));
}

/// Emits the closing sentinel first, which never lines up.
struct MisalignedStub {
    vocab_version: String,
}

impl Infiller for MisalignedStub {
    fn info(&self) -> InfillerInfo {
        InfillerInfo {
            step: 1,
            vocab_version: self.vocab_version.clone(),
            property: PropertySpec::shipped(PropertyKind::Proxy),
        }
    }

    fn infill(&self, vocab: &Vocabulary, _encoder: &[TokenId]) -> iupac_infill::Result<Vec<TokenId>> {
        Ok(vec![vocab.sentinel(2), vocab.id("decyl").unwrap(), vocab.sentinel(1), vocab.eos()])
    }
}

#[test]
fn misaligned_stub_is_never_valid() {
    let vocab = Vocabulary::reference();
    let stub = MisalignedStub {
        vocab_version: vocab.version().to_string(),
    };
    let spec = PropertySpec::shipped(PropertyKind::Proxy);
    let records = generate_synthetic_corpus(&vocab, 4, 20).unwrap();
    let index = CorpusIndex::build(&vocab, &records);
    for r in &records {
        let job = EditJob::new(r.clone(), PropertyBucket::High);
        let results = run_edit_job(&job, &stub, &vocab, &spec).unwrap();
        assert_eq!(results.len(), job.plans().len());
        assert!(results.iter().all(|o| o.result.validity == Validity::SentinelMismatch && o.property.is_none()));
        let row = EvalRow::build(&job, &results, &index, Default::default());
        assert_eq!(row.percent_valid, 0.0);
        assert_eq!(row.max_gen_property, None);
    }
}

#[test]
fn untrained_and_mismatched_infillers_are_rejected() {
    let vocab = Vocabulary::reference();
    let spec = PropertySpec::shipped(PropertyKind::Proxy);
    let job = EditJob::new(CorpusRecord::new(&vocab, "propane", 0.0).unwrap(), PropertyBucket::Low);
    let other = MisalignedStub {
        vocab_version: "elsewhere".into(),
    };
    assert!(run_edit_job(&job, &other, &vocab, &spec).is_err());
    let logp = PropertySpec::shipped(PropertyKind::LogP);
    let stub = MisalignedStub {
        vocab_version: vocab.version().to_string(),
    };
    assert!(run_edit_job(&job, &stub, &vocab, &PropertySpec { low_cut: -1.0, ..logp }).is_err());
}
