//! Corpus ingestion, the novelty/frequency index, and a synthetic corpus
//! generator whose property is the token proxy.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::property::{proxy_property, PropertyBucket, PropertySpec};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub name: String,
    pub tokens: TokenSequence,
    pub property_value: f64,
    /// Tokenization produced `<unk>`; such records are skipped for training.
    pub has_unk: bool,
}

impl CorpusRecord {
    pub fn new(vocab: &Vocabulary, name: &str, property_value: f64) -> Result<Self> {
        let tokens = vocab.tokenize(name)?;
        let has_unk = tokens.ids.contains(&vocab.unk());
        Ok(CorpusRecord {
            name: name.to_string(),
            tokens,
            property_value,
            has_unk,
        })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.tokens.ids
    }
}

/// Exact name membership plus content-token frequencies.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    names: HashSet<String>,
    token_counts: Vec<u64>,
    total_tokens: u64,
    record_count: usize,
}

impl CorpusIndex {
    pub fn build(vocab: &Vocabulary, records: &[CorpusRecord]) -> Self {
        let mut token_counts = vec![0u64; vocab.len()];
        let mut total_tokens = 0;
        let mut names = HashSet::with_capacity(records.len());
        for r in records {
            names.insert(r.name.clone());
            for &id in r.ids() {
                if vocab.is_content(id) {
                    token_counts[id.index()] += 1;
                    total_tokens += 1;
                }
            }
        }
        CorpusIndex {
            names,
            token_counts,
            total_tokens,
            record_count: records.len(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn distinct_names(&self) -> usize {
        self.names.len()
    }

    pub fn record_count(&self) -> usize {
        self.record_count
    }

    pub fn token_count(&self, id: TokenId) -> u64 {
        self.token_counts.get(id.index()).copied().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// Occurrence probability of `id` in the content-token stream.
    pub fn token_freq(&self, id: TokenId) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.token_count(id) as f64 / self.total_tokens as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub records: Vec<CorpusRecord>,
    pub index: CorpusIndex,
    /// Rows dropped because the property column did not parse.
    pub skipped: usize,
}

/// Reads `name<TAB>value` rows; `#` lines and blank lines are ignored.
pub fn ingest(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Ingested> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&text, vocab)
}

pub fn ingest_str(text: &str, vocab: &Vocabulary) -> Result<Ingested> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for raw in text.lines() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((name, value)) = line.rsplit_once('\t') else {
            skipped += 1;
            continue;
        };
        match value.trim().parse::<f64>() {
            Ok(v) if v.is_finite() && !name.is_empty() => records.push(CorpusRecord::new(vocab, name, v)?),
            _ => skipped += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let index = CorpusIndex::build(vocab, &records);
    Ok(Ingested { records, index, skipped })
}

pub fn corpus_to_string(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for r in records {
        // `{}` on f64 prints the shortest string that parses back exactly.
        let _ = writeln!(out, "{}\t{}", r.name, r.property_value);
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus_to_string(records)).map_err(|e| Error::io(path, e))
}

/// Stable identifier of a corpus: sha256 over names and values.
pub fn fingerprint(records: &[CorpusRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.name.as_bytes());
        hasher.update([0]);
        hasher.update(r.property_value.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Deterministic train/validation split. Returns `(train, valid)`.
pub fn split(records: &[CorpusRecord], valid_fraction: f64, seed: u64) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((records.len() as f64) * valid_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut valid_idx = order[..n_valid].to_vec();
    let mut train_idx = order[n_valid..].to_vec();
    valid_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    (pick(&train_idx), pick(&valid_idx))
}

/// Bucket counts under `spec`, in `Low, Med, High` order.
pub fn bucket_histogram(records: &[CorpusRecord], spec: &PropertySpec) -> [usize; 3] {
    let mut h = [0; 3];
    for r in records {
        if let Ok(b) = spec.bucketize(r.property_value) {
            h[b as usize] += 1;
        }
    }
    h
}

// Synthetic grammar. Each entry is a list of token surfaces.

const ANALOGY_FAMILIES: [(&str, &str); 5] = [
    ("phosph", "sodium"),
    ("sulf", "potassium"),
    ("selen", "lithium"),
    ("tellur", "calcium"),
    ("arsen", "magnesium"),
];

/// Anion forms and the counter-word that accompanies each in analogy records.
const ANALOGY_FORMS: [(&str, &str, &str); 4] = [("", "ate", "hydrogen"), ("", "ite", "oxide"), ("di", "ate", "hydrate"), ("", "o", "chloride")];

const LONG_CHAINS: &[&str] = &[
    "decyl", "undecyl", "dodecyl", "tridecyl", "tetradecyl", "pentadecyl", "hexadecyl", "heptadecyl", "octadecyl", "trityl",
];
const SHORT_HYDROPHOBIC: &[&[&str]] = &[
    &["meth", "yl"],
    &["eth", "yl"],
    &["prop", "yl"],
    &["but", "yl"],
    &["pent", "yl"],
    &["hex", "yl"],
    &["phen", "yl"],
    &["benz", "yl"],
    &["chloro"],
    &["bromo"],
    &["iodo"],
    &["fluoro"],
];
const NEUTRAL: &[&[&str]] = &[&["meth", "oxy"], &["eth", "oxy"], &["sulfanyl"]];
const POLAR: &[&str] = &[
    "hydroxy", "amino", "oxo", "carboxy", "nitro", "cyano", "phosphono", "phosphonato", "sulfinato", "carbamoyl", "sulfamoyl", "sulfino",
];
/// Cumulative probabilities of 1 and 2 substituents (3 otherwise). Single-group
/// names dominate so that a masked group is often the only bucket evidence.
const SUBSTITUENT_COUNTS: [f64; 2] = [0.5, 0.85];
/// Groups that may take a "di" multiplier.
const DOUBLABLE: &[&str] = &["chloro", "bromo", "fluoro", "iodo", "hydroxy", "meth"];

struct Parent {
    tokens: Vec<&'static str>,
    /// Highest usable locant.
    size: usize,
    /// Lowest usable locant for substituents.
    first: usize,
    /// Locant range for a `#` placeholder in `tokens`.
    suffix_locants: Option<(usize, usize)>,
}

fn chain_parents() -> Vec<Parent> {
    // (alkane, stem + "an" form, stem + "ane" form, chain length)
    let chains: [(&[&str], &[&str], &[&str], usize); 4] = [
        (&["prop", "ane"], &["prop", "an"], &["prop", "ane"], 3),
        (&["but", "ane"], &["but", "an"], &["but", "ane"], 4),
        (&["pentane"], &["pentan"], &["pentane"], 5),
        (&["hexane"], &["hexan"], &["hexane"], 6),
    ];
    let mut out = Vec::new();
    for (alkane, an, ane, c) in chains {
        let mk = |parts: &[&[&'static str]]| parts.iter().flat_map(|p| p.iter().copied()).collect::<Vec<_>>();
        let plain = |tokens: Vec<&'static str>, first| Parent { tokens, size: c, first, suffix_locants: None };
        out.push(plain(alkane.to_vec(), 1));
        for suffix in [&["oic acid"][..], &["al"], &["amide"]] {
            out.push(plain(mk(&[an, suffix]), 2));
        }
        for (suffix, base, lo, hi) in [("ol", an, 1, 2), ("amine", an, 1, 2), ("one", an, 2, c - 1), ("thiol", ane, 1, 2)] {
            out.push(Parent {
                tokens: mk(&[base, &["-", "#", "-", suffix]]),
                size: c,
                first: 2,
                suffix_locants: Some((lo, hi)),
            });
        }
    }
    let ring = |tokens: Vec<&'static str>, size, first| Parent { tokens, size, first, suffix_locants: None };
    out.push(ring(vec!["benzene"], 6, 1));
    out.push(ring(vec!["pyridine"], 6, 2));
    out.push(ring(vec!["furan"], 5, 2));
    out.push(ring(vec!["thiophene"], 5, 2));
    out.push(ring(vec!["benzo", "ic acid"], 6, 2));
    out.push(ring(vec!["phen", "ol"], 6, 2));
    out
}

const LOCANTS: [&str; 6] = ["1", "2", "3", "4", "5", "6"];

#[derive(Clone, Copy)]
enum GroupKind {
    Long,
    Short,
    Neutral,
    Polar,
}

fn group_mix(target: PropertyBucket) -> [(GroupKind, f64); 4] {
    use GroupKind::*;
    match target {
        PropertyBucket::High => [(Long, 0.5), (Short, 0.35), (Neutral, 0.1), (Polar, 0.05)],
        PropertyBucket::Med => [(Long, 0.05), (Short, 0.4), (Neutral, 0.25), (Polar, 0.3)],
        PropertyBucket::Low => [(Long, 0.0), (Short, 0.1), (Neutral, 0.15), (Polar, 0.75)],
    }
}

fn draw_group<R: Rng>(rng: &mut R, target: PropertyBucket) -> Vec<&'static str> {
    let mix = group_mix(target);
    let mut u = rng.random::<f64>();
    let mut kind = mix[3].0;
    for (k, p) in mix {
        if u < p {
            kind = k;
            break;
        }
        u -= p;
    }
    match kind {
        GroupKind::Long => vec![*LONG_CHAINS.choose(rng).unwrap()],
        GroupKind::Short => SHORT_HYDROPHOBIC.choose(rng).unwrap().to_vec(),
        GroupKind::Neutral => NEUTRAL.choose(rng).unwrap().to_vec(),
        GroupKind::Polar => vec![*POLAR.choose(rng).unwrap()],
    }
}

/// One generic pseudo-name as token surfaces.
fn draw_generic<R: Rng>(rng: &mut R, parents: &[Parent], target: PropertyBucket) -> Vec<&'static str> {
    let parent = parents.choose(rng).unwrap();
    let u = rng.random::<f64>();
    let n_subs = 1 + SUBSTITUENT_COUNTS.iter().filter(|&&c| u >= c).count();
    let mut free: Vec<usize> = (parent.first..=parent.size).collect();
    free.shuffle(rng);
    let mut out: Vec<&'static str> = Vec::new();
    for s in 0..n_subs {
        let Some(loc) = free.pop() else { break };
        let group = draw_group(rng, target);
        let double = DOUBLABLE.contains(&group[0]) && !free.is_empty() && rng.random_bool(0.25);
        if s > 0 {
            out.push("-");
        }
        if double {
            let other = free.pop().unwrap();
            let (a, b) = (loc.min(other), loc.max(other));
            out.extend([LOCANTS[a - 1], ",", LOCANTS[b - 1], "-", "di"]);
        } else {
            out.extend([LOCANTS[loc - 1], "-"]);
        }
        out.extend(group);
    }
    for &t in &parent.tokens {
        match (t, parent.suffix_locants) {
            ("#", Some((lo, hi))) => out.push(LOCANTS[rng.random_range(lo..=hi) - 1]),
            _ => out.push(t),
        }
    }
    out
}

fn analogy_surfaces(family: &str, form: (&str, &str, &str)) -> String {
    format!("{}{}{}", form.0, family, form.1)
}

/// Planted analogy quadruples `(a, b, c, expected)` with
/// `a - b + c ~ expected`: `a` and `b` share a form, `c` shares `b`'s family
/// and the expected token combines `a`'s family with `c`'s form.
pub fn planted_analogies(vocab: &Vocabulary) -> Result<Vec<[TokenId; 4]>> {
    let anion = |f: usize, k: usize| -> Result<TokenId> {
        let s = analogy_surfaces(ANALOGY_FAMILIES[f].0, ANALOGY_FORMS[k]);
        vocab.id(&s).ok_or(Error::MissingTokens(s))
    };
    let mut out = Vec::new();
    for f1 in 0..ANALOGY_FAMILIES.len() {
        for f2 in 0..ANALOGY_FAMILIES.len() {
            if f1 == f2 {
                continue;
            }
            for k1 in 0..ANALOGY_FORMS.len() {
                for k2 in 0..ANALOGY_FORMS.len() {
                    if k1 == k2 {
                        continue;
                    }
                    out.push([anion(f1, k1)?, anion(f2, k1)?, anion(f2, k2)?, anion(f1, k2)?]);
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of synthetic records drawn from the analogy families.
pub const ANALOGY_SHARE: f64 = 0.15;

/// Generates `size` records whose property value is the token proxy.
///
/// Generic records pick a target bucket uniformly and are resampled until
/// their proxy value lands in it, so each bucket holds roughly a third of
/// them. The rest are `cation counter-word anion` records that plant a
/// family-by-form structure for embedding analogies.
pub fn generate_synthetic_corpus(vocab: &Vocabulary, seed: u64, size: usize) -> Result<Vec<CorpusRecord>> {
    if size == 0 {
        return Err(Error::Config("synthetic corpus size must be at least 1".into()));
    }
    let parents = chain_parents();
    let mut required: Vec<String> = Vec::new();
    required.extend(LONG_CHAINS.iter().map(|s| s.to_string()));
    required.extend(SHORT_HYDROPHOBIC.iter().chain(NEUTRAL).flat_map(|g| g.iter().map(|s| s.to_string())));
    required.extend(POLAR.iter().map(|s| s.to_string()));
    required.extend(parents.iter().flat_map(|p| p.tokens.iter().filter(|s| **s != "#").map(|s| s.to_string())));
    required.extend(LOCANTS.iter().chain(&["-", ",", "di", " "]).map(|s| s.to_string()));
    for (family, cation) in ANALOGY_FAMILIES {
        required.push(cation.to_string());
        for form in ANALOGY_FORMS {
            required.push(form.2.to_string());
            required.push(analogy_surfaces(family, form));
        }
    }
    let missing: Vec<String> = required.into_iter().filter(|s| vocab.id(s).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingTokens(missing.join(", ")));
    }

    let spec = PropertySpec::shipped(crate::property::PropertyKind::Proxy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let surfaces: Vec<String> = if rng.random_bool(ANALOGY_SHARE) {
            let (family, cation) = *ANALOGY_FAMILIES.choose(&mut rng).unwrap();
            let form = *ANALOGY_FORMS.choose(&mut rng).unwrap();
            vec![cation.into(), " ".into(), form.2.into(), " ".into(), analogy_surfaces(family, form)]
        } else {
            let target = PropertyBucket::ALL[rng.random_range(0..3)];
            let mut picked = None;
            for _ in 0..256 {
                let cand = draw_generic(&mut rng, &parents, target);
                let ids: Vec<TokenId> = cand.iter().map(|s| vocab.id(s).unwrap()).collect();
                if spec.bucketize(proxy_property(vocab, &ids)?)? == target {
                    picked = Some(cand);
                    break;
                }
            }
            match picked {
                Some(c) => c.into_iter().map(String::from).collect(),
                None => continue,
            }
        };
        let ids: Vec<TokenId> = surfaces.iter().map(|s| vocab.id(s).unwrap()).collect();
        let name = surfaces.concat();
        // Keep only names whose greedy tokenization is the intended one.
        if vocab.tokenize_ids(&name) != ids {
            continue;
        }
        let value = proxy_property(vocab, &ids)?;
        out.push(CorpusRecord {
            name,
            tokens: TokenSequence {
                vocab_version: vocab.version().to_string(),
                ids,
            },
            property_value: value,
            has_unk: false,
        });
    }
    Ok(out)
}
