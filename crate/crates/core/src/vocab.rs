//! Token vocabulary and greedy longest-match tokenization of IUPAC names.
//!
//! A vocabulary is loaded from a tab-separated file of content tokens
//! (`surface<TAB>class<TAB>weight`). The loader appends the control tokens in
//! a fixed layout after the content entries:
//!
//! ```text
//! content tokens | <low> <med> <high> | <s1> .. <s100> | <pad> <eos> <unk>
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::property::PropertyBucket;

/// Number of sentinel tokens `<s1>..<s100>`.
pub const SENTINEL_COUNT: usize = 100;

/// Content-token cap applied to sequences fed to the model.
pub const MAX_CONTENT_TOKENS: usize = 128;

const REFERENCE_VOCAB: &str = include_str!("../data/reference_vocab.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenClass {
    Group,
    Locant,
    Multiplier,
    Stereo,
    RingLocant,
    Element,
    Charge,
    Punctuation,
    Special,
}

impl TokenClass {
    pub const ALL: [TokenClass; 9] = [
        TokenClass::Group,
        TokenClass::Locant,
        TokenClass::Multiplier,
        TokenClass::Stereo,
        TokenClass::RingLocant,
        TokenClass::Element,
        TokenClass::Charge,
        TokenClass::Punctuation,
        TokenClass::Special,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TokenClass::Group => "Group",
            TokenClass::Locant => "Locant",
            TokenClass::Multiplier => "Multiplier",
            TokenClass::Stereo => "Stereo",
            TokenClass::RingLocant => "RingLocant",
            TokenClass::Element => "Element",
            TokenClass::Charge => "Charge",
            TokenClass::Punctuation => "Punctuation",
            TokenClass::Special => "Special",
        }
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TokenClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TokenClass::ALL
            .iter()
            .copied()
            .find(|c| c.label() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub surface: String,
    pub class: TokenClass,
    /// Additive contribution to the token-proxy property.
    pub weight: f64,
}

/// A tokenized name bound to the vocabulary version that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub vocab_version: String,
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Caps the sequence at `max` tokens, returning whether anything was cut.
    pub fn truncate(&mut self, max: usize) -> bool {
        let cut = self.ids.len() > max;
        self.ids.truncate(max);
        cut
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: Vec<(u8, u32)>,
    terminal: Option<TokenId>,
}

/// Byte trie over content surfaces, used for longest-match scanning.
#[derive(Debug, Clone)]
struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn new() -> Self {
        Trie {
            nodes: vec![TrieNode::default()],
        }
    }

    fn insert(&mut self, surface: &str, id: TokenId) {
        let mut node = 0usize;
        for &b in surface.as_bytes() {
            let next = match self.nodes[node].children.binary_search_by_key(&b, |c| c.0) {
                Ok(pos) => self.nodes[node].children[pos].1 as usize,
                Err(pos) => {
                    let fresh = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children.insert(pos, (b, fresh as u32));
                    fresh
                }
            };
            node = next;
        }
        self.nodes[node].terminal = Some(id);
    }

    /// Longest surface that is a prefix of `text`, as (id, byte length).
    fn longest_prefix(&self, text: &[u8]) -> Option<(TokenId, usize)> {
        let mut node = 0usize;
        let mut best = None;
        for (i, &b) in text.iter().enumerate() {
            match self.nodes[node].children.binary_search_by_key(&b, |c| c.0) {
                Ok(pos) => node = self.nodes[node].children[pos].1 as usize,
                Err(_) => break,
            }
            if let Some(id) = self.nodes[node].terminal {
                best = Some((id, i + 1));
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    version: String,
    entries: Vec<VocabEntry>,
    by_surface: HashMap<String, TokenId>,
    content_len: usize,
    trie: Trie,
}

fn special_surfaces() -> Vec<String> {
    let mut out = vec!["<low>".to_string(), "<med>".to_string(), "<high>".to_string()];
    out.extend((1..=SENTINEL_COUNT).map(|i| format!("<s{i}>")));
    out.extend(["<pad>", "<eos>", "<unk>"].iter().map(|s| s.to_string()));
    out
}

impl Vocabulary {
    /// The vocabulary shipped with this crate.
    pub fn reference() -> Vocabulary {
        Vocabulary::from_tsv_str(REFERENCE_VOCAB).expect("shipped reference vocabulary is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tsv_str(&text)
    }

    /// Parses the vocabulary file format. A `# version: <v>` comment sets the
    /// version; otherwise it is derived from a content hash.
    pub fn from_tsv_str(text: &str) -> Result<Vocabulary> {
        let mut version = None;
        let mut content = Vec::new();
        let mut listed_specials = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    version = Some(v.trim().to_string());
                }
                continue;
            }
            let mut cols = line.split('\t');
            let surface = cols.next().unwrap_or_default();
            let class_label = cols.next().ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("missing class column for {surface:?}"),
            })?;
            let weight = match cols.next().map(str::trim) {
                None | Some("") => 0.0,
                Some(w) => w.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid weight {w:?}"),
                })?,
            };
            if cols.next().is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "too many columns".into(),
                });
            }
            if surface.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty surface".into(),
                });
            }
            let class = class_label
                .trim()
                .parse::<TokenClass>()
                .map_err(|label| Error::UnknownClass {
                    line: line_no,
                    label,
                })?;
            if class == TokenClass::Special {
                listed_specials.push(surface.to_string());
            } else {
                content.push(VocabEntry {
                    surface: surface.to_string(),
                    class,
                    weight,
                });
            }
        }

        let specials = special_surfaces();
        if !listed_specials.is_empty() {
            if let Some(missing) = specials.iter().find(|s| !listed_specials.contains(s)) {
                return Err(Error::MissingSpecials(missing.clone()));
            }
            if let Some(extra) = listed_specials.iter().find(|s| !specials.contains(s)) {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("unrecognised special token {extra:?}"),
                });
            }
        }

        let version = version.unwrap_or_else(|| {
            let digest = Sha256::digest(text.as_bytes());
            let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
            format!("sha-{hex}")
        });
        Vocabulary::from_entries(version, content)
    }

    /// Builds a vocabulary from content entries; the specials are appended.
    pub fn from_entries(version: impl Into<String>, content: Vec<VocabEntry>) -> Result<Vocabulary> {
        let specials = special_surfaces();
        let mut by_surface = HashMap::with_capacity(content.len() + specials.len());
        let mut trie = Trie::new();
        for (i, entry) in content.iter().enumerate() {
            if entry.class == TokenClass::Special || specials.contains(&entry.surface) {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("{:?} is reserved for control tokens", entry.surface),
                });
            }
            if by_surface.insert(entry.surface.clone(), TokenId::from(i)).is_some() {
                return Err(Error::DuplicateSurface(entry.surface.clone()));
            }
            trie.insert(&entry.surface, TokenId::from(i));
        }
        let content_len = content.len();
        let mut entries = content;
        for s in specials {
            by_surface.insert(s.clone(), TokenId::from(entries.len()));
            entries.push(VocabEntry {
                surface: s,
                class: TokenClass::Special,
                weight: 0.0,
            });
        }
        Ok(Vocabulary {
            version: version.into(),
            entries,
            by_surface,
            content_len,
            trie,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn entry(&self, id: TokenId) -> &VocabEntry {
        &self.entries[id.index()]
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.entries[id.index()].surface
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        self.entries[id.index()].class
    }

    pub fn weight(&self, id: TokenId) -> f64 {
        self.entries[id.index()].weight
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.by_surface.get(surface).copied()
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        id.index() < self.content_len
    }

    pub fn property_token(&self, bucket: PropertyBucket) -> TokenId {
        TokenId::from(self.content_len + bucket as usize)
    }

    /// Bucket carried by a property token, if `id` is one.
    pub fn bucket_of(&self, id: TokenId) -> Option<PropertyBucket> {
        let i = id.index().checked_sub(self.content_len)?;
        PropertyBucket::ALL.get(i).copied()
    }

    /// Sentinel `<s{n}>`, 1-based.
    pub fn sentinel(&self, n: usize) -> TokenId {
        assert!((1..=SENTINEL_COUNT).contains(&n), "sentinel index {n} out of range");
        TokenId::from(self.content_len + 3 + n - 1)
    }

    /// The 1-based sentinel number of `id`, if it is a sentinel.
    pub fn sentinel_number(&self, id: TokenId) -> Option<usize> {
        let first = self.content_len + 3;
        let i = id.index();
        (first..first + SENTINEL_COUNT).contains(&i).then(|| i - first + 1)
    }

    pub fn pad(&self) -> TokenId {
        TokenId::from(self.content_len + 3 + SENTINEL_COUNT)
    }

    pub fn eos(&self) -> TokenId {
        TokenId::from(self.content_len + 4 + SENTINEL_COUNT)
    }

    pub fn unk(&self) -> TokenId {
        TokenId::from(self.content_len + 5 + SENTINEL_COUNT)
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if id.index() < self.entries.len() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id: id.index(),
                size: self.entries.len(),
            })
        }
    }

    /// Greedy longest-match segmentation. Runs of text that no surface
    /// matches collapse into a single `<unk>`.
    pub fn tokenize(&self, name: &str) -> Result<TokenSequence> {
        if name.is_empty() {
            return Err(Error::EmptyName);
        }
        Ok(TokenSequence {
            vocab_version: self.version.clone(),
            ids: self.tokenize_ids(name),
        })
    }

    pub(crate) fn tokenize_ids(&self, name: &str) -> Vec<TokenId> {
        let bytes = name.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut pos = 0;
        let mut in_unknown = false;
        while pos < bytes.len() {
            match self.trie.longest_prefix(&bytes[pos..]) {
                Some((id, len)) => {
                    if in_unknown {
                        ids.push(self.unk());
                        in_unknown = false;
                    }
                    ids.push(id);
                    pos += len;
                }
                None => {
                    in_unknown = true;
                    let ch_len = name[pos..].chars().next().map_or(1, char::len_utf8);
                    pos += ch_len;
                }
            }
        }
        if in_unknown {
            ids.push(self.unk());
        }
        ids
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        self.detokenize_ids(&seq.ids)
    }

    pub fn detokenize_ids(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (position, &id) in ids.iter().enumerate() {
            self.check_id(id)?;
            if !self.is_content(id) {
                return Err(Error::SpecialToken {
                    position,
                    surface: self.surface(id).to_string(),
                });
            }
            out.push_str(self.surface(id));
        }
        Ok(out)
    }

    /// True when `ids` renders to text that tokenizes back to exactly `ids`.
    pub fn round_trips(&self, ids: &[TokenId]) -> bool {
        match self.detokenize_ids(ids) {
            Ok(text) if !text.is_empty() => self.tokenize_ids(&text) == ids,
            _ => false,
        }
    }

    /// Number of content entries per class.
    pub fn class_counts(&self) -> Vec<(TokenClass, usize)> {
        TokenClass::ALL
            .iter()
            .map(|&c| (c, self.entries.iter().filter(|e| e.class == c).count()))
            .collect()
    }

    pub fn surfaces<'a>(&'a self, ids: &'a [TokenId]) -> impl Iterator<Item = &'a str> + 'a {
        ids.iter().map(move |&id| self.surface(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Vocabulary {
        Vocabulary::from_tsv_str("acet\tGroup\t0.3\nyl\tGroup\t0.2\n").unwrap()
    }

    fn surfaces(v: &Vocabulary, name: &str) -> Vec<String> {
        let seq = v.tokenize(name).unwrap();
        v.surfaces(&seq.ids).map(str::to_string).collect()
    }

    #[test]
    fn minimal_file_gets_specials_appended() {
        let v = tiny();
        assert_eq!(v.content_len(), 2);
        assert_eq!(v.len(), 2 + 3 + SENTINEL_COUNT + 3);
        assert_eq!(v.surface(v.property_token(PropertyBucket::Low)), "<low>");
        assert_eq!(v.surface(v.sentinel(1)), "<s1>");
        assert_eq!(v.surface(v.sentinel(100)), "<s100>");
        assert_eq!(v.surface(v.pad()), "<pad>");
        assert_eq!(v.surface(v.eos()), "<eos>");
        assert_eq!(v.surface(v.unk()), "<unk>");
        assert_eq!(v.weight(v.id("acet").unwrap()), 0.3);
        assert_eq!(v.sentinel_number(v.sentinel(42)), Some(42));
        assert_eq!(v.bucket_of(v.property_token(PropertyBucket::High)), Some(PropertyBucket::High));
        assert_eq!(v.bucket_of(v.sentinel(1)), None);
    }

    #[test]
    fn duplicate_surface_is_named() {
        let err = Vocabulary::from_tsv_str("acet\tGroup\nyl\tGroup\nacet\tGroup\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateSurface(ref s) if s == "acet"), "{err}");
    }

    #[test]
    fn unknown_class_label() {
        let err = Vocabulary::from_tsv_str("acet\tGroop\n").unwrap_err();
        assert!(matches!(err, Error::UnknownClass { line: 1, .. }), "{err}");
    }

    #[test]
    fn partial_special_block_is_rejected() {
        let mut text = String::from("acet\tGroup\n<low>\tSpecial\n<med>\tSpecial\n<high>\tSpecial\n");
        for i in 1..=50 {
            text.push_str(&format!("<s{i}>\tSpecial\n"));
        }
        let err = Vocabulary::from_tsv_str(&text).unwrap_err();
        assert!(matches!(err, Error::MissingSpecials(ref s) if s == "<s51>"), "{err}");
    }

    #[test]
    fn complete_special_block_is_accepted() {
        let mut text = String::from("acet\tGroup\n");
        for s in special_surfaces() {
            text.push_str(&format!("{s}\tSpecial\n"));
        }
        let v = Vocabulary::from_tsv_str(&text).unwrap();
        assert_eq!(v.content_len(), 1);
        assert_eq!(v.len(), 1 + 106);
    }

    #[test]
    fn comments_weights_and_version() {
        let v = Vocabulary::from_tsv_str("# version: t-9\n# comment\nmeth\tGroup\t0.5\n \tPunctuation\n").unwrap();
        assert_eq!(v.version(), "t-9");
        assert_eq!(v.weight(v.id(" ").unwrap()), 0.0);
        let err = Vocabulary::from_tsv_str("meth\tGroup\tabc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn reference_tokenizes_the_aspirin_example() {
        let v = Vocabulary::reference();
        assert_eq!(
            surfaces(&v, "2-acetyloxybenzoic acid"),
            ["2", "-", "acet", "yl", "oxy", "benzo", "ic acid"]
        );
    }

    #[test]
    fn empty_name_is_rejected() {
        assert!(matches!(Vocabulary::reference().tokenize(""), Err(Error::EmptyName)));
    }

    #[test]
    fn unknown_run_collapses_to_one_unk() {
        let v = Vocabulary::reference();
        let seq = v.tokenize("2-%%%%-ol").unwrap();
        let unks = seq.ids.iter().filter(|&&id| id == v.unk()).count();
        assert_eq!(unks, 1);
        assert_eq!(v.tokenize("%%%").unwrap().ids, vec![v.unk()]);
    }

    #[test]
    fn longest_match_prefers_longer_surface() {
        let v = Vocabulary::from_tsv_str("eth\tGroup\nethyl\tGroup\nyl\tGroup\n-\tPunctuation\n").unwrap();
        assert_eq!(surfaces(&v, "ethyl"), ["ethyl"]);
        assert_eq!(surfaces(&v, "eth-yl"), ["eth", "-", "yl"]);
    }

    #[test]
    fn detokenize_rejects_specials_with_position() {
        let v = Vocabulary::reference();
        let mut ids = v.tokenize("2-chloropentane").unwrap().ids;
        ids.insert(2, v.sentinel(1));
        let err = v.detokenize_ids(&ids).unwrap_err();
        assert!(matches!(err, Error::SpecialToken { position: 2, .. }), "{err}");
        assert_eq!(v.detokenize_ids(&[]).unwrap(), "");
    }

    #[test]
    fn reference_vocabulary_invariants() {
        let v = Vocabulary::reference();
        assert!(v.content_len() >= 400, "{}", v.content_len());
        for i in 1..=100 {
            let id = v.id(&i.to_string()).expect("locant present");
            assert_eq!(v.class(id), TokenClass::Locant);
        }
        assert_eq!(v.class(v.id("Z").unwrap()), TokenClass::Stereo);
        let sentinels = (0..v.len())
            .filter(|&i| v.sentinel_number(TokenId::from(i)).is_some())
            .count();
        assert_eq!(sentinels, SENTINEL_COUNT);
    }
}
