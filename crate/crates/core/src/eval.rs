//! Span-enumeration editing and its accounting: validity and novelty rates,
//! property shifts, token-preference multipliers and the best-in-dataset
//! baseline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::corpus::{CorpusIndex, CorpusRecord};
use crate::corruption::{apply_infill, corrupt, InfillResult, MaskPlan, Span, Validity};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ModelState};
use crate::property::{proxy_property, PropertyBucket, PropertyKind, PropertySpec};
use crate::vocab::{TokenId, Vocabulary};

pub const DEFAULT_SPAN_LENGTHS: RangeInclusive<usize> = 1..=5;
/// Baseline prefilter thresholds: length difference and bag-of-tokens difference.
pub const BASELINE_MAX_LEN_DIFF: usize = 15;
pub const BASELINE_MAX_BAG_DIFF: usize = 15;
/// Decode cap during evaluation; a single-span fragment is far shorter.
pub const EVAL_DECODE_LEN: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct EditJob {
    pub source: CorpusRecord,
    pub target: PropertyBucket,
    pub span_lengths: RangeInclusive<usize>,
    /// Mask pairs of spans instead of single spans.
    pub multi_span: bool,
}

impl EditJob {
    pub fn new(source: CorpusRecord, target: PropertyBucket) -> Self {
        EditJob {
            source,
            target,
            span_lengths: DEFAULT_SPAN_LENGTHS,
            multi_span: false,
        }
    }

    pub fn plans(&self) -> Vec<MaskPlan> {
        let n = self.source.ids().len();
        if self.multi_span {
            enumerate_span_pairs(n, self.span_lengths.clone())
        } else {
            enumerate_spans(n, self.span_lengths.clone())
        }
    }
}

/// Every contiguous span with a length in `lengths`, ordered by `(start, len)`.
pub fn enumerate_spans(seq_len: usize, lengths: RangeInclusive<usize>) -> Vec<MaskPlan> {
    let mut out = Vec::new();
    for start in 0..seq_len {
        for len in lengths.clone() {
            if len >= 1 && start + len <= seq_len {
                out.push(MaskPlan::single(start, len));
            }
        }
    }
    out
}

/// Pairs of non-adjacent spans, each with a length in `lengths`.
pub fn enumerate_span_pairs(seq_len: usize, lengths: RangeInclusive<usize>) -> Vec<MaskPlan> {
    let singles = enumerate_spans(seq_len, lengths);
    let mut out = Vec::new();
    for a in &singles {
        for b in &singles {
            let (a, b) = (a.spans[0], b.spans[0]);
            if b.start > a.end() {
                out.push(MaskPlan { spans: vec![a, b] });
            }
        }
    }
    out
}

/// Identity of the model behind an [`Infiller`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InfillerInfo {
    pub step: u64,
    pub vocab_version: String,
    pub property: PropertySpec,
}

/// Anything that turns an encoder input into generated sentinel/fragment tokens.
pub trait Infiller: Sync {
    fn info(&self) -> InfillerInfo;
    fn infill(&self, vocab: &Vocabulary, encoder: &[TokenId]) -> Result<Vec<TokenId>>;
}

impl Infiller for ModelState {
    fn info(&self) -> InfillerInfo {
        InfillerInfo {
            step: self.step,
            vocab_version: self.vocab_version.clone(),
            property: self.property,
        }
    }

    fn infill(&self, vocab: &Vocabulary, encoder: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok(greedy_decode(self, vocab, encoder, EVAL_DECODE_LEN)?.tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub plan: MaskPlan,
    pub result: InfillResult,
    /// Property of the reconstruction, for `Valid` results only.
    pub property: Option<f64>,
}

/// Rejects models that are untrained or were trained for another vocabulary or property.
pub fn check_infiller(infiller: &dyn Infiller, vocab: &Vocabulary, spec: &PropertySpec) -> Result<()> {
    let info = infiller.info();
    if info.step == 0 {
        return Err(Error::Incompatible("model has not been trained".into()));
    }
    if info.vocab_version != vocab.version() {
        return Err(Error::VocabMismatch {
            expected: vocab.version().to_string(),
            found: info.vocab_version,
        });
    }
    if info.property != *spec {
        return Err(Error::Incompatible(format!(
            "model was trained for {} with cutoffs ({}, {}), not {} ({}, {})",
            info.property.kind.as_str(),
            info.property.low_cut,
            info.property.high_cut,
            spec.kind.as_str(),
            spec.low_cut,
            spec.high_cut
        )));
    }
    Ok(())
}

/// Runs the model on every plan of `job`, dropping generations that reproduce
/// the source. The property is the token proxy when `spec` is the proxy and is
/// otherwise left to the caller's oracle.
pub fn run_edit_job(job: &EditJob, infiller: &dyn Infiller, vocab: &Vocabulary, spec: &PropertySpec) -> Result<Vec<EditOutcome>> {
    check_infiller(infiller, vocab, spec)?;
    let ids = job.source.ids();
    let mut out = Vec::new();
    for plan in job.plans() {
        let ex = corrupt(vocab, ids, &plan, job.target)?;
        let generated = infiller.infill(vocab, &ex.encoder_input)?;
        let result = apply_infill(vocab, &ex.encoder_input, &generated, Some(ids));
        if result.validity == Validity::Identity {
            continue;
        }
        let property = match (&result.reconstructed, result.validity, spec.kind) {
            (Some(rec), Validity::Valid, PropertyKind::Proxy) => Some(proxy_property(vocab, rec)?),
            _ => None,
        };
        out.push(EditOutcome { plan, result, property });
    }
    Ok(out)
}

/// Key identifying a generation for novelty: its rendered name, or the raw
/// tokens when nothing could be rendered.
fn generation_key(o: &EditOutcome) -> String {
    match &o.result.candidate_name {
        Some(name) => name.clone(),
        None => format!("{:?}", o.result.generated),
    }
}

/// Fraction of distinct non-identity generations, valid or not, that are absent
/// from `index`. Zero when there are none.
pub fn novelty(results: &[EditOutcome], index: &CorpusIndex, source: &CorpusRecord) -> f64 {
    let distinct: HashSet<String> = results
        .iter()
        .filter(|o| o.result.validity != Validity::Identity)
        .map(generation_key)
        .filter(|k| *k != source.name)
        .collect();
    if distinct.is_empty() {
        return 0.0;
    }
    let novel = distinct.iter().filter(|k| !index.contains(k)).count();
    novel as f64 / distinct.len() as f64
}

/// Whether `candidate` can be produced from `source` by replacing one span of
/// at most `max_span` tokens with any tokens.
pub fn baseline_eligible(source: &[TokenId], candidate: &[TokenId], max_span: usize) -> bool {
    if source == candidate || source.is_empty() || max_span == 0 {
        return false;
    }
    let m = source.len().min(candidate.len());
    let p = source.iter().zip(candidate).take_while(|(a, b)| a == b).count();
    let s = source
        .iter()
        .rev()
        .zip(candidate.iter().rev())
        .take(m - p)
        .take_while(|(a, b)| a == b)
        .count();
    source.len() - p - s <= max_span
}

fn bag_difference(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut counts: HashMap<TokenId, i64> = HashMap::new();
    for &t in a {
        *counts.entry(t).or_default() += 1;
    }
    for &t in b {
        *counts.entry(t).or_default() -= 1;
    }
    counts.values().map(|c| c.unsigned_abs() as usize).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BaselineSummary {
    pub count: usize,
    pub min_property: Option<f64>,
    pub max_property: Option<f64>,
}

/// Scans `corpus` for records reachable from `source` by one span edit of at
/// most five tokens, after the length and bag-of-tokens prefilters.
pub fn baseline_scan(source: &CorpusRecord, corpus: &[CorpusRecord]) -> BaselineSummary {
    let src = source.ids();
    let mut summary = BaselineSummary::default();
    for rec in corpus {
        let cand = rec.ids();
        if src.len().abs_diff(cand.len()) > BASELINE_MAX_LEN_DIFF || bag_difference(src, cand) > BASELINE_MAX_BAG_DIFF {
            continue;
        }
        if !baseline_eligible(src, cand, *DEFAULT_SPAN_LENGTHS.end()) {
            continue;
        }
        summary.count += 1;
        let v = rec.property_value;
        summary.min_property = Some(summary.min_property.map_or(v, |m| m.min(v)));
        summary.max_property = Some(summary.max_property.map_or(v, |m| m.max(v)));
    }
    summary
}

/// Records passing only the prefilters; an upper bound on the scan count.
pub fn baseline_prefilter_count(source: &CorpusRecord, corpus: &[CorpusRecord]) -> usize {
    let src = source.ids();
    corpus
        .iter()
        .filter(|r| src.len().abs_diff(r.ids().len()) <= BASELINE_MAX_LEN_DIFF && bag_difference(src, r.ids()) <= BASELINE_MAX_BAG_DIFF)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenPreferenceRow {
    pub token: TokenId,
    pub target: PropertyBucket,
    pub observed_rate: f64,
    pub baseline_rate: f64,
    /// Absent when the token never occurs in the corpus.
    pub multiplier: Option<f64>,
}

/// Infill fragments of the `Valid` outcomes.
pub fn valid_fragments(results: &[EditOutcome]) -> Vec<Vec<TokenId>> {
    results
        .iter()
        .filter(|o| o.result.validity == Validity::Valid)
        .filter_map(|o| o.result.fragments.clone())
        .flatten()
        .collect()
}

/// Rates of tokens added inside infill fragments relative to their corpus
/// frequency. Rows are sorted by descending multiplier, then token id; rows
/// without a multiplier come last.
pub fn token_preference(target: PropertyBucket, fragments: &[Vec<TokenId>], index: &CorpusIndex) -> Vec<TokenPreferenceRow> {
    let mut counts: BTreeMap<TokenId, u64> = BTreeMap::new();
    for &t in fragments.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    let total: u64 = counts.values().sum();
    let mut rows: Vec<TokenPreferenceRow> = counts
        .into_iter()
        .map(|(token, c)| {
            let observed_rate = c as f64 / total as f64;
            let baseline_rate = index.token_freq(token);
            TokenPreferenceRow {
                token,
                target,
                observed_rate,
                baseline_rate,
                multiplier: (baseline_rate > 0.0).then(|| observed_rate / baseline_rate),
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.multiplier, b.multiplier) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.token.cmp(&b.token)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.token.cmp(&b.token),
    });
    rows
}

/// One row per source, shaped like the usual per-molecule editing table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalRow {
    pub source: String,
    pub target: PropertyBucket,
    pub generated_count: usize,
    pub percent_novel: f64,
    pub percent_valid: f64,
    pub max_gen_property: Option<f64>,
    pub min_gen_property: Option<f64>,
    pub eligible_baseline_count: usize,
    pub max_baseline_property: Option<f64>,
    pub min_baseline_property: Option<f64>,
}

impl EvalRow {
    pub fn build(job: &EditJob, results: &[EditOutcome], index: &CorpusIndex, baseline: BaselineSummary) -> Self {
        let generated = results.len();
        let valid = results.iter().filter(|o| o.result.validity == Validity::Valid).count();
        let props: Vec<f64> = results.iter().filter_map(|o| o.property).collect();
        let pct = |x: f64| if generated == 0 { 0.0 } else { 100.0 * x };
        EvalRow {
            source: job.source.name.clone(),
            target: job.target,
            generated_count: generated,
            percent_novel: pct(novelty(results, index, &job.source)),
            percent_valid: pct(valid as f64 / generated.max(1) as f64),
            max_gen_property: props.iter().copied().reduce(f64::max),
            min_gen_property: props.iter().copied().reduce(f64::min),
            eligible_baseline_count: baseline.count,
            max_baseline_property: baseline.max_property,
            min_baseline_property: baseline.min_property,
        }
    }
}

/// Validity shares over non-identity generations, as percentages.
pub fn validity_shares(results: &[EditOutcome]) -> [(Validity, f64); 3] {
    let n = results.len().max(1) as f64;
    let share = |v: Validity| 100.0 * results.iter().filter(|o| o.result.validity == v).count() as f64 / n;
    [
        (Validity::Valid, share(Validity::Valid)),
        (Validity::SentinelMismatch, share(Validity::SentinelMismatch)),
        (Validity::RoundTripFail, share(Validity::RoundTripFail)),
    ]
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "source",
    "target",
    "generated_count",
    "percent_novel",
    "percent_valid",
    "max_gen_property",
    "min_gen_property",
    "eligible_baseline_count",
    "max_baseline_property",
    "min_baseline_property",
];

pub fn report_tsv(rows: &[EvalRow]) -> String {
    let mut out = REPORT_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}\t{}\t{}\t{}",
            r.source,
            r.target,
            r.generated_count,
            r.percent_novel,
            r.percent_valid,
            fmt_opt(r.max_gen_property),
            fmt_opt(r.min_gen_property),
            r.eligible_baseline_count,
            fmt_opt(r.max_baseline_property),
            fmt_opt(r.min_baseline_property)
        );
    }
    out
}

/// Aligned plain-text rendering of the report.
pub fn report_table(rows: &[EvalRow]) -> String {
    let width = rows.iter().map(|r| r.source.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$}  {:<6} {:>5} {:>7} {:>7} {:>9} {:>9} {:>5} {:>9} {:>9}\n",
        "source", "target", "gen", "%novel", "%valid", "gen max", "gen min", "base", "base max", "base min"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<6} {:>5} {:>7.1} {:>7.1} {:>9} {:>9} {:>5} {:>9} {:>9}",
            r.source,
            r.target.as_str(),
            r.generated_count,
            r.percent_novel,
            r.percent_valid,
            fmt_opt(r.max_gen_property),
            fmt_opt(r.min_gen_property),
            r.eligible_baseline_count,
            fmt_opt(r.max_baseline_property),
            fmt_opt(r.min_baseline_property)
        );
    }
    out
}

pub fn token_pref_tsv(vocab: &Vocabulary, rows: &[TokenPreferenceRow]) -> String {
    let mut out = String::from("target\ttoken_id\ttoken\tweight\tobserved_rate\tbaseline_rate\tmultiplier\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
            r.target,
            r.token.0,
            vocab.surface(r.token),
            vocab.weight(r.token),
            r.observed_rate,
            r.baseline_rate,
            fmt_opt(r.multiplier)
        );
    }
    out
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `trials` fair coin flips.
pub fn sign_test_p(wins: u64, trials: u64) -> f64 {
    if wins == 0 || trials == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, trials).expect("valid binomial");
    b.sf(wins - 1)
}

/// Paired comparison of the same plans edited toward `<high>` and `<low>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Sensitivity {
    /// Plans valid under both targets.
    pub pairs: usize,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub mean_high: f64,
    pub mean_low: f64,
    /// Sign-test p-value over non-tied pairs.
    pub p_value: f64,
}

impl Sensitivity {
    pub fn win_fraction(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.wins as f64 / self.pairs as f64
        }
    }

    /// Accumulates pairs over sources edited toward both targets. Only plans in
    /// `scope` for their source count.
    pub fn from_outcomes<'a, I>(vocab: &Vocabulary, scope: SpanScope, jobs: I) -> Self
    where
        I: IntoIterator<Item = (&'a CorpusRecord, &'a [EditOutcome], &'a [EditOutcome])>,
    {
        let (mut wins, mut ties, mut losses) = (0, 0, 0);
        let (mut sum_h, mut sum_l) = (0.0, 0.0);
        for (source, high, low) in jobs {
            let low_by_plan: HashMap<&[Span], f64> = low.iter().filter_map(|o| Some((o.plan.spans.as_slice(), o.property?))).collect();
            for o in high.iter().filter(|o| scope.admits(vocab, source.ids(), &o.plan)) {
                let (Some(h), Some(&l)) = (o.property, low_by_plan.get(o.plan.spans.as_slice())) else {
                    continue;
                };
                sum_h += h;
                sum_l += l;
                match h.partial_cmp(&l) {
                    Some(std::cmp::Ordering::Greater) => wins += 1,
                    Some(std::cmp::Ordering::Less) => losses += 1,
                    _ => ties += 1,
                }
            }
        }
        let pairs = wins + ties + losses;
        let mean = |s: f64| if pairs == 0 { 0.0 } else { s / pairs as f64 };
        Sensitivity {
            pairs,
            wins,
            ties,
            losses,
            mean_high: mean(sum_h),
            mean_low: mean(sum_l),
            p_value: sign_test_p(wins as u64, (wins + losses) as u64),
        }
    }
}

/// Which plans a sensitivity summary counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SpanScope {
    All,
    /// Plans masking at least one token with a nonzero proxy weight. Masking
    /// only locants and punctuation leaves no weighted fragment to rewrite.
    PropertyBearing,
}

impl SpanScope {
    pub fn admits(self, vocab: &Vocabulary, source: &[TokenId], plan: &MaskPlan) -> bool {
        match self {
            SpanScope::All => true,
            SpanScope::PropertyBearing => plan
                .spans
                .iter()
                .any(|sp| source.get(sp.start..sp.end()).is_some_and(|ts| ts.iter().any(|&t| vocab.weight(t) != 0.0))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_counts() {
        assert_eq!(enumerate_spans(3, 1..=5).len(), 6);
        assert_eq!(enumerate_spans(1, 1..=5).len(), 1);
        assert_eq!(enumerate_spans(128, 1..=5).len(), 630);
        let plans = enumerate_spans(4, 1..=2);
        let keys: Vec<(usize, usize)> = plans.iter().map(|p| (p.spans[0].start, p.spans[0].len)).collect();
        assert_eq!(keys, vec![(0, 1), (0, 2), (1, 1), (1, 2), (2, 1), (2, 2), (3, 1)]);
    }

    #[test]
    fn span_pairs_are_valid_plans() {
        for p in enumerate_span_pairs(9, 1..=3) {
            p.validate(9).unwrap();
            assert_eq!(p.spans.len(), 2);
        }
        assert!(enumerate_span_pairs(2, 1..=5).is_empty());
        // lengths 1: starts (0,2) only
        assert_eq!(enumerate_span_pairs(3, 1..=1).len(), 1);
    }

    #[test]
    fn eligibility_basics() {
        let t = |xs: &[u32]| xs.iter().map(|&x| TokenId(x)).collect::<Vec<_>>();
        assert!(!baseline_eligible(&t(&[1, 2, 3]), &t(&[1, 2, 3]), 5));
        assert!(baseline_eligible(&t(&[1, 2, 3]), &t(&[1, 9, 3]), 5));
        assert!(baseline_eligible(&t(&[1, 2, 3]), &t(&[1, 2, 9, 3]), 5));
        assert!(baseline_eligible(&t(&[1, 2, 3]), &t(&[1, 3]), 1));
        assert!(!baseline_eligible(&t(&[1, 2, 3, 4, 5, 6, 7]), &t(&[1, 9, 9, 9, 9, 9, 9, 7]), 4));
        assert!(baseline_eligible(&t(&[1, 1]), &t(&[1, 1, 1]), 1));
    }

    #[test]
    fn sign_test_tail() {
        assert!((sign_test_p(10, 10) - 0.5f64.powi(10)).abs() < 1e-12);
        assert!((sign_test_p(1, 1) - 0.5).abs() < 1e-12);
        assert_eq!(sign_test_p(0, 5), 1.0);
        // P(X >= 8 | n=10) = (45 + 10 + 1) / 1024
        assert!((sign_test_p(8, 10) - 56.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn valid_fragments_skip_other_outcomes() {
        let t = |xs: &[u32]| xs.iter().map(|&x| TokenId(x)).collect::<Vec<_>>();
        let outcome = |validity, fragments: Vec<Vec<TokenId>>| EditOutcome {
            plan: MaskPlan {
                spans: vec![Span::new(1, 2), Span::new(4, 1)],
            },
            result: InfillResult {
                generated: Vec::new(),
                validity,
                fragments: Some(fragments),
                reconstructed: None,
                candidate_name: None,
            },
            property: None,
        };
        let results = [
            outcome(Validity::Valid, vec![t(&[2, 9, 2]), t(&[5])]),
            outcome(Validity::RoundTripFail, vec![t(&[7]), t(&[8])]),
            outcome(Validity::Identity, vec![t(&[2, 3]), t(&[5])]),
        ];
        assert_eq!(valid_fragments(&results), vec![t(&[2, 9, 2]), t(&[5])]);
    }
}
