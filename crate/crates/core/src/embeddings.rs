//! Skip-gram token embeddings with negative sampling, nearest-neighbour
//! queries and analogy evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{fingerprint, CorpusRecord};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vocab_version: String,
    /// Corpus fingerprint, empty for loaded tables.
    pub trained_on: String,
    /// Row-major `vocab_size x dim`.
    pub vectors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-pair loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub pairs_per_epoch: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^-x)`, i.e. `-ln sigmoid(x)`, without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of the negative-sampling loss for one training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SgnsGrad {
    pub loss: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `-ln s(u_o . v_c) - sum_k ln s(-u_k . v_c)` and its gradient with respect
/// to the center vector, the context output vector and each negative.
pub fn sgns_loss_and_grad(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> SgnsGrad {
    let dim = center.len();
    let score = dot(center, context);
    let mut loss = softplus_neg(score);
    let g_pos = sigmoid(score) - 1.0;
    let mut g_center: Vec<f64> = context.iter().map(|u| g_pos * u).collect();
    let g_context: Vec<f64> = center.iter().map(|v| g_pos * v).collect();
    let mut g_negs = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let s = dot(center, neg);
        loss += softplus_neg(-s);
        let g = sigmoid(s);
        for d in 0..dim {
            g_center[d] += g * neg[d];
        }
        g_negs.push(center.iter().map(|v| g * v).collect());
    }
    SgnsGrad {
        loss,
        center: g_center,
        context: g_context,
        negatives: g_negs,
    }
}

/// Cumulative unigram^0.75 distribution over token ids.
struct NoiseTable {
    cumulative: Vec<f64>,
}

impl NoiseTable {
    fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        NoiseTable { cumulative }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// Single-threaded reference trainer; identical seeds give identical tables.
pub fn train_embeddings(vocab: &Vocabulary, records: &[CorpusRecord], cfg: &SgnsConfig) -> Result<(EmbeddingTable, TrainReport)> {
    if cfg.dim < 2 {
        return Err(Error::Config(format!("embedding dim must be at least 2, got {}", cfg.dim)));
    }
    if cfg.window == 0 || cfg.epochs == 0 {
        return Err(Error::Config("window and epochs must be positive".into()));
    }
    let sentences: Vec<&[TokenId]> = records.iter().filter(|r| !r.has_unk && r.ids().len() > 1).map(|r| r.ids()).collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let v = vocab.len();
    let dim = cfg.dim;
    let mut counts = vec![0u64; v];
    for s in &sentences {
        for &t in *s {
            counts[t.index()] += 1;
        }
    }
    let noise = NoiseTable::new(&counts);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 / dim as f64;
    let mut input: Vec<f64> = (0..v * dim).map(|_| rng.random_range(-half..half)).collect();
    let mut output = vec![0.0; v * dim];

    let pairs_per_epoch: usize = sentences
        .iter()
        .map(|s| (0..s.len()).map(|i| i.min(cfg.window) + (s.len() - 1 - i).min(cfg.window)).sum::<usize>())
        .sum();
    let total_pairs = (pairs_per_epoch * cfg.epochs) as f64;
    let mut seen = 0usize;
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut neg_ids = Vec::with_capacity(cfg.negatives);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &si in &order {
            let s = sentences[si];
            for (i, &center) in s.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(s.len());
                for (j, &ctx) in s.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.learning_rate * (1.0 - seen as f64 / total_pairs).max(1e-4);
                    seen += 1;
                    neg_ids.clear();
                    while neg_ids.len() < cfg.negatives {
                        let n = noise.sample(&mut rng);
                        if n != ctx.index() {
                            neg_ids.push(n);
                        }
                    }
                    let c = center.index() * dim;
                    let o = ctx.index() * dim;
                    let grad = {
                        let negs: Vec<&[f64]> = neg_ids.iter().map(|&n| &output[n * dim..(n + 1) * dim]).collect();
                        sgns_loss_and_grad(&input[c..c + dim], &output[o..o + dim], &negs)
                    };
                    epoch_loss += grad.loss;
                    for d in 0..dim {
                        output[o + d] -= lr * grad.context[d];
                    }
                    for (k, &n) in neg_ids.iter().enumerate() {
                        for d in 0..dim {
                            output[n * dim + d] -= lr * grad.negatives[k][d];
                        }
                    }
                    for d in 0..dim {
                        input[c + d] -= lr * grad.center[d];
                    }
                }
            }
        }
        epoch_losses.push(epoch_loss / pairs_per_epoch.max(1) as f64);
    }

    let table = EmbeddingTable {
        dim,
        vocab_version: vocab.version().to_string(),
        trained_on: fingerprint(records),
        vectors: input,
    };
    Ok((
        table,
        TrainReport {
            epoch_losses,
            pairs_per_epoch,
        },
    ))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn vector(&self, id: TokenId) -> &[f64] {
        &self.vectors[id.index() * self.dim..(id.index() + 1) * self.dim]
    }

    /// Top `k` ids by cosine similarity to `query`, ties by ascending id.
    pub fn nearest(&self, query: &[f64], exclude: &HashSet<TokenId>, k: usize) -> Result<Vec<(TokenId, f64)>> {
        if query.len() != self.dim {
            return Err(Error::Config(format!("query has dim {}, table has {}", query.len(), self.dim)));
        }
        if dot(query, query) == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let mut scored: Vec<(TokenId, f64)> = (0..self.vocab_size())
            .map(TokenId::from)
            .filter(|id| !exclude.contains(id))
            .map(|id| (id, cosine(query, self.vector(id))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Nearest token to `v(a) - v(b) + v(c)`, excluding the three inputs.
    pub fn analogy(&self, a: TokenId, b: TokenId, c: TokenId) -> Result<TokenId> {
        let query: Vec<f64> = (0..self.dim)
            .map(|d| self.vector(a)[d] - self.vector(b)[d] + self.vector(c)[d])
            .collect();
        let exclude = HashSet::from([a, b, c]);
        Ok(self.nearest(&query, &exclude, 1)?[0].0)
    }

    /// Top-1 accuracy over `(a, b, c, expected)` quadruples.
    pub fn analogy_accuracy(&self, quads: &[[TokenId; 4]]) -> Result<f64> {
        if quads.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for q in quads {
            if self.analogy(q[0], q[1], q[2])? == q[3] {
                hits += 1;
            }
        }
        Ok(hits as f64 / quads.len() as f64)
    }

    /// Mean fraction of each query's `k` nearest neighbours (self excluded,
    /// restricted to content tokens) that share its token class.
    pub fn class_purity(&self, vocab: &Vocabulary, queries: &[TokenId], k: usize) -> Result<f64> {
        if queries.is_empty() {
            return Ok(0.0);
        }
        let specials: HashSet<TokenId> = (vocab.content_len()..vocab.len()).map(TokenId::from).collect();
        let mut total = 0.0;
        for &q in queries {
            let mut exclude = specials.clone();
            exclude.insert(q);
            let hits = self.nearest(self.vector(q), &exclude, k)?;
            let same = hits.iter().filter(|(id, _)| vocab.class(*id) == vocab.class(q)).count();
            total += same as f64 / hits.len().max(1) as f64;
        }
        Ok(total / queries.len() as f64)
    }

    /// Header `dim version`, then `surface<TAB>v1 v2 ...` per token.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = format!("{} {}\n", self.dim, self.vocab_version);
        for i in 0..self.vocab_size() {
            let id = TokenId::from(i);
            let vals: Vec<String> = self.vector(id).iter().map(|x| format!("{x:e}")).collect();
            let _ = writeln!(out, "{}\t{}", vocab.surface(id), vals.join(" "));
        }
        out
    }

    pub fn save(&self, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text(vocab)).map_err(|e| Error::io(path, e))
    }

    pub fn from_text(vocab: &Vocabulary, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let (dim, version) = header.split_once(' ').ok_or_else(|| Error::Parse {
            line: 1,
            message: "header must be `dim version`".into(),
        })?;
        let dim: usize = dim.parse().map_err(|_| Error::Parse {
            line: 1,
            message: format!("bad dim {dim:?}"),
        })?;
        if version != vocab.version() {
            return Err(Error::VocabMismatch {
                expected: vocab.version().to_string(),
                found: version.to_string(),
            });
        }
        let mut vectors = vec![0.0; vocab.len() * dim];
        let mut filled = vec![false; vocab.len()];
        for (n, line) in lines.enumerate() {
            let line_no = n + 2;
            let (surface, vals) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected surface<TAB>values".into(),
            })?;
            let id = vocab.id(surface).ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("unknown surface {surface:?}"),
            })?;
            let parsed: Vec<f64> = vals
                .split(' ')
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line: line_no,
                    message: "bad vector value".into(),
                })?;
            if parsed.len() != dim {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {dim} values, found {}", parsed.len()),
                });
            }
            vectors[id.index() * dim..(id.index() + 1) * dim].copy_from_slice(&parsed);
            filled[id.index()] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Parse {
                line: 0,
                message: format!("no vector for {:?}", vocab.surface(TokenId::from(i))),
            });
        }
        Ok(EmbeddingTable {
            dim,
            vocab_version: version.to_string(),
            trained_on: String::new(),
            vectors,
        })
    }

    pub fn load(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmbeddingTable::from_text(vocab, &text)
    }
}
