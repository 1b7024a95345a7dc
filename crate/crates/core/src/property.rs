//! Property specifications, three-way bucketing, and property oracles.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Discretized property value, ordered `Low < Med < High`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyBucket {
    Low = 0,
    Med = 1,
    High = 2,
}

impl PropertyBucket {
    pub const ALL: [PropertyBucket; 3] = [PropertyBucket::Low, PropertyBucket::Med, PropertyBucket::High];

    pub fn as_str(self) -> &'static str {
        match self {
            PropertyBucket::Low => "low",
            PropertyBucket::Med => "med",
            PropertyBucket::High => "high",
        }
    }

    /// Surface of the matching control token.
    pub fn token_surface(self) -> &'static str {
        match self {
            PropertyBucket::Low => "<low>",
            PropertyBucket::Med => "<med>",
            PropertyBucket::High => "<high>",
        }
    }
}

impl fmt::Display for PropertyBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PropertyBucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "<low>" => Ok(PropertyBucket::Low),
            "med" | "medium" | "<med>" => Ok(PropertyBucket::Med),
            "high" | "<high>" => Ok(PropertyBucket::High),
            _ => Err(Error::Config(format!("unknown bucket {s:?} (expected low, med or high)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropertyKind {
    LogP,
    LogD,
    Psa,
    Refractivity,
    /// Sum of per-token weights from the vocabulary.
    Proxy,
}

impl PropertyKind {
    pub const ALL: [PropertyKind; 5] = [
        PropertyKind::LogP,
        PropertyKind::LogD,
        PropertyKind::Psa,
        PropertyKind::Refractivity,
        PropertyKind::Proxy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PropertyKind::LogP => "logp",
            PropertyKind::LogD => "logd",
            PropertyKind::Psa => "psa",
            PropertyKind::Refractivity => "refractivity",
            PropertyKind::Proxy => "proxy",
        }
    }
}

impl fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PropertyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        PropertyKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == lower || (lower == "tokenproxy" && *k == PropertyKind::Proxy))
            .ok_or_else(|| Error::UnknownProperty(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PropertySpec {
    pub kind: PropertyKind,
    pub low_cut: f64,
    pub high_cut: f64,
}

impl PropertySpec {
    pub fn new(kind: PropertyKind, low_cut: f64, high_cut: f64) -> Result<Self> {
        if !(low_cut < high_cut) || !low_cut.is_finite() || !high_cut.is_finite() {
            return Err(Error::InvalidCutoffs { low: low_cut, high: high_cut });
        }
        Ok(PropertySpec { kind, low_cut, high_cut })
    }

    /// Shipped cutoffs. logD shares the logP thresholds; the proxy uses them too.
    pub fn shipped(kind: PropertyKind) -> Self {
        let (low_cut, high_cut) = match kind {
            PropertyKind::LogP | PropertyKind::LogD | PropertyKind::Proxy => (-0.4, 5.6),
            PropertyKind::Psa => (90.0, 140.0),
            PropertyKind::Refractivity => (40.0, 130.0),
        };
        PropertySpec { kind, low_cut, high_cut }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(PropertySpec::shipped(name.parse()?))
    }

    /// `v < low` is Low, `low <= v < high` is Med, `v >= high` is High.
    pub fn bucketize(&self, value: f64) -> Result<PropertyBucket> {
        if !value.is_finite() {
            return Err(Error::NonFinite(value));
        }
        Ok(if value < self.low_cut {
            PropertyBucket::Low
        } else if value < self.high_cut {
            PropertyBucket::Med
        } else {
            PropertyBucket::High
        })
    }
}

/// Sum of token weights. Fails on any non-content token.
pub fn proxy_property(vocab: &Vocabulary, ids: &[TokenId]) -> Result<f64> {
    let mut total = 0.0;
    for (position, &id) in ids.iter().enumerate() {
        vocab.check_id(id)?;
        if !vocab.is_content(id) {
            return Err(Error::SpecialToken {
                position,
                surface: vocab.surface(id).to_string(),
            });
        }
        total += vocab.weight(id);
    }
    Ok(total)
}

/// Anything that can score a tokenized name.
pub trait PropertyOracle: Send + Sync {
    /// Returns `None` when the oracle has no value for this name.
    fn evaluate(&self, name: &str, ids: &[TokenId]) -> Option<f64>;
}

/// The token-weight proxy as an oracle.
#[derive(Debug, Clone)]
pub struct TokenProxyOracle<'a> {
    pub vocab: &'a Vocabulary,
}

impl PropertyOracle for TokenProxyOracle<'_> {
    fn evaluate(&self, _name: &str, ids: &[TokenId]) -> Option<f64> {
        proxy_property(self.vocab, ids).ok()
    }
}

/// Values looked up by exact name, e.g. from an ingested corpus.
#[derive(Debug, Clone, Default)]
pub struct LookupOracle {
    values: HashMap<String, f64>,
}

impl LookupOracle {
    pub fn new(values: impl IntoIterator<Item = (String, f64)>) -> Self {
        LookupOracle {
            values: values.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl PropertyOracle for LookupOracle {
    fn evaluate(&self, name: &str, _ids: &[TokenId]) -> Option<f64> {
        self.values.get(name).copied()
    }
}
