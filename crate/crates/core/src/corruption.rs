//! Sentinel span corruption and the inverse splice of generated fragments.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::property::PropertyBucket;
use crate::vocab::{TokenId, Vocabulary, MAX_CONTENT_TOKENS, SENTINEL_COUNT};

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_MEAN_SPAN: f64 = 3.0;
pub const DEFAULT_MIN_SPAN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Span { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Sorted, non-overlapping, non-adjacent spans over a token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPlan {
    pub spans: Vec<Span>,
}

impl MaskPlan {
    pub fn empty() -> Self {
        MaskPlan::default()
    }

    pub fn single(start: usize, len: usize) -> Self {
        MaskPlan {
            spans: vec![Span::new(start, len)],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn masked_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    /// Checks the plan against a sequence of `seq_len` tokens. Error messages
    /// name the offending span indices.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.spans.len() > SENTINEL_COUNT {
            return Err(Error::InvalidPlan(format!(
                "{} spans exceed the {SENTINEL_COUNT} available sentinels",
                self.spans.len()
            )));
        }
        for (i, s) in self.spans.iter().enumerate() {
            if s.len == 0 {
                return Err(Error::InvalidPlan(format!("span {i} has length 0")));
            }
            if s.end() > seq_len {
                return Err(Error::InvalidPlan(format!(
                    "span {i} ({}:{}) exceeds sequence length {seq_len}",
                    s.start, s.len
                )));
            }
        }
        for (i, pair) in self.spans.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            if b.start < a.end() {
                let how = if b.start < a.start { "out of order with" } else { "overlaps" };
                return Err(Error::InvalidPlan(format!("span {} {how} span {i}", i + 1)));
            }
            if b.start == a.end() {
                return Err(Error::InvalidPlan(format!("span {} is adjacent to span {i}", i + 1)));
            }
        }
        Ok(())
    }
}

/// Draws a mask plan for a sequence of `seq_len` tokens.
///
/// The span count is `seq_len * mask_rate / mean_span`, rounded
/// stochastically, and each length is `min_span` plus a geometric draw with
/// mean `mean_span`, so the expected masked fraction is `mask_rate`. Lengths
/// are capped at `seq_len - 2` to keep some context; trailing spans are
/// dropped when the spans and their separators do not fit. Spans sit at
/// uniformly random gaps with at least one unmasked token between neighbours.
pub fn sample_mask_plan<R: Rng + ?Sized>(
    rng: &mut R,
    seq_len: usize,
    mask_rate: f64,
    mean_span: f64,
    min_span: usize,
) -> MaskPlan {
    let min_span = min_span.max(1);
    if seq_len < 3 || seq_len - 2 < min_span || !(mask_rate > 0.0) || !(mean_span > 0.0) {
        return MaskPlan::empty();
    }
    let expected = seq_len as f64 * mask_rate.min(1.0) / mean_span.max(min_span as f64);
    let mut count = expected.floor() as usize;
    if rng.random::<f64>() < expected - expected.floor() {
        count += 1;
    }
    count = count.min(SENTINEL_COUNT);
    if count == 0 {
        return MaskPlan::empty();
    }

    let extra = (mean_span - min_span as f64).max(0.0);
    let geom = Geometric::new(1.0 / (extra + 1.0)).expect("probability in (0, 1]");
    let cap = seq_len - 2;
    let mut lengths: Vec<usize> = (0..count)
        .map(|_| (min_span as u64).saturating_add(geom.sample(rng)).min(cap as u64) as usize)
        .collect();
    while lengths.iter().sum::<usize>() + lengths.len() - 1 > seq_len {
        lengths.pop();
    }

    let masked: usize = lengths.iter().sum();
    let slack = seq_len - masked - (lengths.len() - 1);
    let gaps = composition(rng, slack, lengths.len() + 1);
    let mut spans = Vec::with_capacity(lengths.len());
    let mut pos = 0;
    for (i, &len) in lengths.iter().enumerate() {
        pos += gaps[i] + usize::from(i > 0);
        spans.push(Span::new(pos, len));
        pos += len;
    }
    MaskPlan { spans }
}

/// Uniformly random composition of `total` into `parts` non-negative parts.
fn composition<R: Rng + ?Sized>(rng: &mut R, total: usize, parts: usize) -> Vec<usize> {
    if parts == 1 {
        return vec![total];
    }
    let slots = total + parts - 1;
    let mut bars = index::sample(rng, slots, parts - 1).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for (i, &b) in bars.iter().enumerate() {
        // Bar i sits at slot b; the stars before it, minus earlier bars, form part i.
        out.push(b - prev - usize::from(i > 0));
        prev = b;
    }
    out.push(slots - prev - usize::from(!bars.is_empty()));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionExample {
    pub encoder_input: Vec<TokenId>,
    pub decoder_target: Vec<TokenId>,
    pub source_bucket: PropertyBucket,
    pub plan: MaskPlan,
}

impl CorruptionExample {
    /// Cache line: `encoder<TAB>target<TAB>bucket` with space-separated ids.
    pub fn to_line(&self) -> String {
        let join = |ids: &[TokenId]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "{}\t{}\t{}",
            join(&self.encoder_input),
            join(&self.decoder_target),
            self.source_bucket
        )
    }

    /// Parses a cache line. The plan is not stored, so it comes back empty.
    pub fn from_line(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse {
            line: 0,
            message: m.to_string(),
        };
        let mut cols = line.split('\t');
        let mut ids = |what: &str| -> Result<Vec<TokenId>> {
            cols.next()
                .ok_or_else(|| bad(&format!("missing {what} column")))?
                .split_whitespace()
                .map(|t| t.parse::<u32>().map(TokenId).map_err(|_| bad(&format!("bad id {t:?}"))))
                .collect()
        };
        let encoder_input = ids("encoder")?;
        let decoder_target = ids("target")?;
        let source_bucket = cols.next().ok_or_else(|| bad("missing bucket column"))?.parse()?;
        Ok(CorruptionExample {
            encoder_input,
            decoder_target,
            source_bucket,
            plan: MaskPlan::empty(),
        })
    }
}

/// Replaces span `i` with `<s(i+1)>`, prepends the bucket token and builds
/// the self-delimiting target `<s1> .. <s2> .. <s(k+1)>`.
pub fn corrupt(vocab: &Vocabulary, seq: &[TokenId], plan: &MaskPlan, bucket: PropertyBucket) -> Result<CorruptionExample> {
    if seq.len() > MAX_CONTENT_TOKENS {
        return Err(Error::LengthOverflow {
            len: seq.len(),
            max: MAX_CONTENT_TOKENS,
        });
    }
    plan.validate(seq.len())?;
    for &id in seq {
        vocab.check_id(id)?;
    }
    let masked = plan.masked_tokens();
    let mut encoder = Vec::with_capacity(1 + seq.len() - masked + plan.spans.len());
    let mut target = Vec::with_capacity(masked + plan.spans.len() + 1);
    encoder.push(vocab.property_token(bucket));
    let mut pos = 0;
    for (i, span) in plan.spans.iter().enumerate() {
        let sentinel = vocab.sentinel(i + 1);
        encoder.extend_from_slice(&seq[pos..span.start]);
        encoder.push(sentinel);
        target.push(sentinel);
        target.extend_from_slice(&seq[span.start..span.end()]);
        pos = span.end();
    }
    encoder.extend_from_slice(&seq[pos..]);
    target.push(vocab.sentinel(plan.spans.len() + 1));
    Ok(CorruptionExample {
        encoder_input: encoder,
        decoder_target: target,
        source_bucket: bucket,
        plan: plan.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Validity {
    SentinelMismatch,
    RoundTripFail,
    Identity,
    Valid,
}

impl Validity {
    pub fn as_str(self) -> &'static str {
        match self {
            Validity::SentinelMismatch => "SentinelMismatch",
            Validity::RoundTripFail => "RoundTripFail",
            Validity::Identity => "Identity",
            Validity::Valid => "Valid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillResult {
    pub generated: Vec<TokenId>,
    pub validity: Validity,
    /// One fragment per sentinel slot, when the sentinels lined up.
    pub fragments: Option<Vec<Vec<TokenId>>>,
    /// Present iff `validity` is `Valid` or `Identity`.
    pub reconstructed: Option<Vec<TokenId>>,
    /// Rendered name of the splice whenever it could be rendered, including
    /// round-trip failures.
    pub candidate_name: Option<String>,
}

impl InfillResult {
    fn mismatch(generated: &[TokenId]) -> Self {
        InfillResult {
            generated: generated.to_vec(),
            validity: Validity::SentinelMismatch,
            fragments: None,
            reconstructed: None,
            candidate_name: None,
        }
    }
}

/// Splits `generated` into one fragment per encoder sentinel, or `None` when
/// the sentinels do not line up.
fn parse_fragments(vocab: &Vocabulary, k: usize, generated: &[TokenId]) -> Option<Vec<Vec<TokenId>>> {
    let mut iter = generated.iter().copied().peekable();
    let mut fragments = Vec::with_capacity(k);
    for n in 1..=k {
        if iter.next()? != vocab.sentinel(n) {
            return None;
        }
        let mut frag = Vec::new();
        while let Some(&t) = iter.peek() {
            if vocab.sentinel_number(t).is_some() {
                break;
            }
            if !vocab.is_content(t) && t != vocab.unk() {
                return None;
            }
            frag.push(t);
            iter.next();
        }
        fragments.push(frag);
    }
    if iter.next()? != vocab.sentinel(k + 1) {
        return None;
    }
    // Only end-of-sequence padding may follow the closing sentinel.
    iter.all(|t| t == vocab.eos() || t == vocab.pad()).then_some(fragments)
}

/// Splices generated fragments into the sentinel slots of `encoder`.
///
/// `original` is the unmasked source, used to detect identity generations.
pub fn apply_infill(
    vocab: &Vocabulary,
    encoder: &[TokenId],
    generated: &[TokenId],
    original: Option<&[TokenId]>,
) -> InfillResult {
    let Some((&head, body)) = encoder.split_first() else {
        return InfillResult::mismatch(generated);
    };
    if vocab.bucket_of(head).is_none() {
        return InfillResult::mismatch(generated);
    }
    let mut k = 0;
    for &t in body {
        if let Some(n) = vocab.sentinel_number(t) {
            if n != k + 1 {
                return InfillResult::mismatch(generated);
            }
            k = n;
        } else if vocab.bucket_of(t).is_some() {
            return InfillResult::mismatch(generated);
        }
    }
    let Some(fragments) = parse_fragments(vocab, k, generated) else {
        return InfillResult::mismatch(generated);
    };

    let mut reconstructed = Vec::with_capacity(body.len() + fragments.iter().map(Vec::len).sum::<usize>());
    for &t in body {
        match vocab.sentinel_number(t) {
            Some(n) => reconstructed.extend_from_slice(&fragments[n - 1]),
            None => reconstructed.push(t),
        }
    }
    let candidate_name = vocab.detokenize_ids(&reconstructed).ok();
    let identity = original.is_some_and(|o| o == reconstructed.as_slice());
    let validity = if identity {
        Validity::Identity
    } else if vocab.round_trips(&reconstructed) {
        Validity::Valid
    } else {
        Validity::RoundTripFail
    };
    let keep = matches!(validity, Validity::Valid | Validity::Identity);
    InfillResult {
        generated: generated.to_vec(),
        validity,
        fragments: Some(fragments),
        reconstructed: keep.then_some(reconstructed),
        candidate_name,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &Vocabulary, name: &str) -> Vec<TokenId> {
        v.tokenize(name).unwrap().ids
    }

    #[test]
    fn aspirin_example() {
        let v = Vocabulary::reference();
        let seq = ids(&v, "2-acetyloxybenzoic acid");
        let ex = corrupt(&v, &seq, &MaskPlan::single(2, 3), PropertyBucket::High).unwrap();
        let enc: Vec<&str> = v.surfaces(&ex.encoder_input).collect();
        let tgt: Vec<&str> = v.surfaces(&ex.decoder_target).collect();
        assert_eq!(enc, ["<high>", "2", "-", "<s1>", "benzo", "ic acid"]);
        assert_eq!(tgt, ["<s1>", "acet", "yl", "oxy", "<s2>"]);

        let decyl = [v.sentinel(1), v.id("decyl").unwrap(), v.sentinel(2)];
        let res = apply_infill(&v, &ex.encoder_input, &decyl, Some(&seq));
        assert_eq!(res.validity, Validity::Valid);
        assert_eq!(res.candidate_name.as_deref(), Some("2-decylbenzoic acid"));

        let same = apply_infill(&v, &ex.encoder_input, &ex.decoder_target, Some(&seq));
        assert_eq!(same.validity, Validity::Identity);
        assert_eq!(same.reconstructed.as_deref(), Some(seq.as_slice()));
    }

    #[test]
    fn empty_plan_degenerate_case() {
        let v = Vocabulary::reference();
        let seq = ids(&v, "2-chloropentane");
        let ex = corrupt(&v, &seq, &MaskPlan::empty(), PropertyBucket::Low).unwrap();
        assert_eq!(ex.encoder_input[0], v.property_token(PropertyBucket::Low));
        assert_eq!(&ex.encoder_input[1..], seq.as_slice());
        assert_eq!(ex.decoder_target, vec![v.sentinel(1)]);
    }

    #[test]
    fn sentinel_misalignment() {
        let v = Vocabulary::reference();
        let seq = ids(&v, "2-acetyloxybenzoic acid");
        let ex = corrupt(&v, &seq, &MaskPlan::single(2, 3), PropertyBucket::High).unwrap();
        let cases = [
            vec![v.sentinel(2), v.sentinel(1)],
            vec![v.sentinel(1), v.id("decyl").unwrap()],
            vec![v.sentinel(1), v.sentinel(3)],
            vec![],
            vec![v.sentinel(1), v.property_token(PropertyBucket::Low), v.sentinel(2)],
            vec![v.sentinel(1), v.sentinel(2), v.id("oxy").unwrap()],
        ];
        for g in cases {
            assert_eq!(apply_infill(&v, &ex.encoder_input, &g, None).validity, Validity::SentinelMismatch, "{g:?}");
        }
        let trailing_eos = [v.sentinel(1), v.sentinel(2), v.eos()];
        assert_ne!(apply_infill(&v, &ex.encoder_input, &trailing_eos, None).validity, Validity::SentinelMismatch);
    }

    #[test]
    fn round_trip_failure_keeps_candidate_name() {
        let v = Vocabulary::reference();
        let seq = ids(&v, "2-chloropentane");
        let ex = corrupt(&v, &seq, &MaskPlan::single(3, 1), PropertyBucket::High).unwrap();
        // "pent" + "ane" renders as "pentane", which re-tokenizes as one token.
        let g = [v.sentinel(1), v.id("pent").unwrap(), v.id("ane").unwrap(), v.sentinel(2)];
        let res = apply_infill(&v, &ex.encoder_input, &g, Some(&seq));
        assert_eq!(res.validity, Validity::RoundTripFail);
        assert!(res.reconstructed.is_none());
        assert_eq!(res.candidate_name.as_deref(), Some("2-chloropentane"));
    }

    #[test]
    fn plan_validation() {
        assert!(MaskPlan { spans: vec![Span::new(0, 2), Span::new(2, 1)] }.validate(5).is_err());
        assert!(MaskPlan { spans: vec![Span::new(0, 2), Span::new(1, 1)] }.validate(5).is_err());
        assert!(MaskPlan { spans: vec![Span::new(0, 2), Span::new(3, 1)] }.validate(5).is_ok());
        assert!(MaskPlan::single(4, 2).validate(5).is_err());
        assert!(MaskPlan::single(0, 0).validate(5).is_err());
        let many = MaskPlan { spans: (0..101).map(|i| Span::new(2 * i, 1)).collect() };
        assert!(many.validate(300).is_err());
    }

    #[test]
    fn smallest_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let plan = sample_mask_plan(&mut rng, 3, 0.15, 3.0, 1);
            assert!(plan.is_empty() || (plan.spans.len() == 1 && plan.spans[0].len == 1), "{plan:?}");
        }
        assert!(sample_mask_plan(&mut rng, 2, 0.5, 3.0, 1).is_empty());
    }

    #[test]
    fn composition_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for total in 0..20 {
            for parts in 1..6 {
                let c = composition(&mut rng, total, parts);
                assert_eq!(c.len(), parts);
                assert_eq!(c.iter().sum::<usize>(), total);
            }
        }
    }

    #[test]
    fn example_line_round_trip() {
        let v = Vocabulary::reference();
        let seq = ids(&v, "2-acetyloxybenzoic acid");
        let ex = corrupt(&v, &seq, &MaskPlan::single(2, 3), PropertyBucket::Med).unwrap();
        let back = CorruptionExample::from_line(&ex.to_line()).unwrap();
        assert_eq!(back.encoder_input, ex.encoder_input);
        assert_eq!(back.decoder_target, ex.decoder_target);
        assert_eq!(back.source_bucket, PropertyBucket::Med);
    }

    proptest! {
        #[test]
        fn sampled_plans_are_valid(seed in any::<u64>(), n in 3usize..200, rate in 0.01f64..0.9, mean in 1.0f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_mask_plan(&mut rng, n, rate, mean, 1);
            prop_assert!(plan.validate(n).is_ok(), "{plan:?}");
            let mut again = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(sample_mask_plan(&mut again, n, rate, mean, 1), plan);
        }

        #[test]
        fn corrupt_then_apply_is_identity(seed in any::<u64>(), raw in prop::collection::vec(0usize..10_000, 1..=128), b in 0usize..3) {
            let v = Vocabulary::reference();
            let seq: Vec<TokenId> = raw.iter().map(|&i| TokenId::from(i % v.content_len())).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_mask_plan(&mut rng, seq.len(), 0.3, 3.0, 1);
            let ex = corrupt(&v, &seq, &plan, PropertyBucket::ALL[b]).unwrap();
            let k = plan.spans.len();
            prop_assert_eq!(ex.encoder_input.len(), 1 + seq.len() - plan.masked_tokens() + k);
            let sentinels: Vec<usize> = ex.encoder_input.iter().filter_map(|&t| v.sentinel_number(t)).collect();
            prop_assert_eq!(sentinels, (1..=k).collect::<Vec<_>>());
            let res = apply_infill(&v, &ex.encoder_input, &ex.decoder_target, Some(&seq));
            prop_assert_eq!(res.validity, Validity::Identity);
            prop_assert_eq!(res.reconstructed, Some(seq));
        }
    }
}
