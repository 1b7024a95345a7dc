//! A small pre-norm encoder-decoder transformer for conditional span infilling.

mod checkpoint;
mod decode;
mod optim;
mod tape;
mod train;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{greedy_decode, sample_decode, Decoded};
pub use optim::{AdamW, AdamWConfig, TrainSchedule};
pub use train::{train, TrainLog};

use crate::corruption::CorruptionExample;
use crate::error::{Error, Result};
use crate::property::PropertySpec;
use crate::vocab::{TokenId, Vocabulary, MAX_CONTENT_TOKENS, SENTINEL_COUNT};
use tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` ids.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 256,
            // Content cap plus the property token; sentinels never lengthen the input.
            max_encoder_len: MAX_CONTENT_TOKENS + 1,
            max_decoder_len: MAX_CONTENT_TOKENS + SENTINEL_COUNT + 1,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.layers, self.heads, self.model_dim, self.ff_dim, self.max_encoder_len, self.max_decoder_len];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must all be at least 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross_attn: AttnIdx,
    ln3: NormIdx,
    ff: FfIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Standard normal, for the token embedding.
    Embedding,
    /// Xavier normal.
    Xavier,
    /// Small normal for the output projection so initial logits are near uniform.
    Output,
    Zeros,
    Ones,
}

/// Parameter names, shapes and the index of each role.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
    embed: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: NormIdx,
    decoder: Vec<DecoderLayer>,
    dec_norm: NormIdx,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut inits = Vec::new();
        let mut reg = |name: String, shape: (usize, usize), init: Init| {
            names.push(name);
            shapes.push(shape);
            inits.push(init);
            names.len() - 1
        };
        let d = cfg.model_dim;
        let norm = |reg: &mut dyn FnMut(String, (usize, usize), Init) -> usize, p: &str| NormIdx {
            gamma: reg(format!("{p}.gamma"), (1, d), Init::Ones),
            beta: reg(format!("{p}.beta"), (1, d), Init::Zeros),
        };
        let attn = |reg: &mut dyn FnMut(String, (usize, usize), Init) -> usize, p: &str| AttnIdx {
            wq: reg(format!("{p}.wq"), (d, d), Init::Xavier),
            bq: reg(format!("{p}.bq"), (1, d), Init::Zeros),
            wk: reg(format!("{p}.wk"), (d, d), Init::Xavier),
            bk: reg(format!("{p}.bk"), (1, d), Init::Zeros),
            wv: reg(format!("{p}.wv"), (d, d), Init::Xavier),
            bv: reg(format!("{p}.bv"), (1, d), Init::Zeros),
            wo: reg(format!("{p}.wo"), (d, d), Init::Xavier),
            bo: reg(format!("{p}.bo"), (1, d), Init::Zeros),
        };
        let ff = |reg: &mut dyn FnMut(String, (usize, usize), Init) -> usize, p: &str| FfIdx {
            w1: reg(format!("{p}.w1"), (d, cfg.ff_dim), Init::Xavier),
            b1: reg(format!("{p}.b1"), (1, cfg.ff_dim), Init::Zeros),
            w2: reg(format!("{p}.w2"), (cfg.ff_dim, d), Init::Xavier),
            b2: reg(format!("{p}.b2"), (1, d), Init::Zeros),
        };

        let embed = reg("embed".into(), (cfg.vocab_size, d), Init::Embedding);
        let encoder = (0..cfg.layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    ln1: norm(&mut reg, &format!("{p}.ln1")),
                    attn: attn(&mut reg, &format!("{p}.attn")),
                    ln2: norm(&mut reg, &format!("{p}.ln2")),
                    ff: ff(&mut reg, &format!("{p}.ff")),
                }
            })
            .collect();
        let enc_norm = norm(&mut reg, "enc.norm");
        let decoder = (0..cfg.layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayer {
                    ln1: norm(&mut reg, &format!("{p}.ln1")),
                    self_attn: attn(&mut reg, &format!("{p}.self")),
                    ln2: norm(&mut reg, &format!("{p}.ln2")),
                    cross_attn: attn(&mut reg, &format!("{p}.cross")),
                    ln3: norm(&mut reg, &format!("{p}.ln3")),
                    ff: ff(&mut reg, &format!("{p}.ff")),
                }
            })
            .collect();
        let dec_norm = norm(&mut reg, "dec.norm");
        let out_w = reg("out.w".into(), (d, cfg.vocab_size), Init::Output);
        let out_b = reg("out.b".into(), (1, cfg.vocab_size), Init::Zeros);
        Layout {
            names,
            shapes,
            inits,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
        }
    }

    /// Whether weight decay applies: weight matrices, not biases, norms or the embedding.
    fn decays(&self, i: usize) -> bool {
        matches!(self.inits[i], Init::Xavier | Init::Output)
    }
}

/// Trained (or freshly initialised) parameters with their metadata.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub step: u64,
    pub vocab_version: String,
    pub property: PropertySpec,
    pub(crate) params: Vec<Array2<f64>>,
    pub(crate) layout: Layout,
}

/// Per-forward options: dropout masks are drawn from `rng` when present.
struct Mode<'r> {
    dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Mode<'_> {
    fn eval() -> Mode<'static> {
        Mode { dropout: 0.0, rng: None }
    }
}

impl ModelState {
    pub fn new(config: ModelConfig, vocab: &Vocabulary, property: PropertySpec) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "config vocab_size {} does not match vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(&(r, c), init)| {
                let std = match init {
                    Init::Embedding => 1.0,
                    Init::Xavier => (2.0 / (r + c) as f64).sqrt(),
                    Init::Output => 0.02,
                    Init::Zeros => return Array2::zeros((r, c)),
                    Init::Ones => return Array2::ones((r, c)),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng))
            })
            .collect();
        Ok(ModelState {
            config,
            step: 0,
            vocab_version: vocab.version().to_string(),
            property,
            params,
            layout,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.layout.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Errors unless this model was trained against `vocab` and `spec`.
    pub fn check_compatible(&self, vocab: &Vocabulary, spec: &PropertySpec) -> Result<()> {
        if self.vocab_version != vocab.version() || self.config.vocab_size != vocab.len() {
            return Err(Error::VocabMismatch {
                expected: vocab.version().to_string(),
                found: self.vocab_version.clone(),
            });
        }
        if self.property != *spec {
            return Err(Error::Incompatible(format!(
                "model conditions on {} ({}, {}), job uses {} ({}, {})",
                self.property.kind, self.property.low_cut, self.property.high_cut, spec.kind, spec.low_cut, spec.high_cut
            )));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId], max: usize) -> Result<()> {
        if ids.len() > max {
            return Err(Error::LengthOverflow { len: ids.len(), max });
        }
        for &id in ids {
            if id.index() >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: id.index(),
                    size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn dropout(&self, t: &mut Tape, x: NodeId, mode: &mut Mode) -> NodeId {
        match (&mut mode.rng, mode.dropout) {
            (Some(rng), p) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let dim = t.value(x).dim();
                let mask = Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < p { 0.0 } else { keep });
                t.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn norm(&self, t: &mut Tape, x: NodeId, n: NormIdx) -> NodeId {
        let (g, b) = (t.param(n.gamma), t.param(n.beta));
        t.layer_norm(x, g, b)
    }

    fn attn_block(&self, t: &mut Tape, x: NodeId, ctx: NodeId, a: AttnIdx, causal: bool) -> NodeId {
        let p = |t: &mut Tape, w, b| (t.param(w), t.param(b));
        let (wq, bq) = p(t, a.wq, a.bq);
        let (wk, bk) = p(t, a.wk, a.bk);
        let (wv, bv) = p(t, a.wv, a.bv);
        let (wo, bo) = p(t, a.wo, a.bo);
        let q = t.linear(x, wq, bq);
        let k = t.linear(ctx, wk, bk);
        let v = t.linear(ctx, wv, bv);
        let o = t.attention(q, k, v, self.config.heads, causal);
        t.linear(o, wo, bo)
    }

    fn ff_block(&self, t: &mut Tape, x: NodeId, f: FfIdx, mode: &mut Mode) -> NodeId {
        let (w1, b1, w2, b2) = (t.param(f.w1), t.param(f.b1), t.param(f.w2), t.param(f.b2));
        let h = t.linear(x, w1, b1);
        let h = t.gelu(h);
        let h = self.dropout(t, h, mode);
        t.linear(h, w2, b2)
    }

    fn encode(&self, t: &mut Tape, encoder: &[TokenId], mode: &mut Mode) -> NodeId {
        let ids: Vec<usize> = encoder.iter().map(|i| i.index()).collect();
        let table = t.param(self.layout.embed);
        let mut x = t.embed(table, &ids);
        x = self.dropout(t, x, mode);
        for layer in &self.layout.encoder {
            let n = self.norm(t, x, layer.ln1);
            let a = self.attn_block(t, n, n, layer.attn, false);
            let a = self.dropout(t, a, mode);
            x = t.add(x, a);
            let n = self.norm(t, x, layer.ln2);
            let f = self.ff_block(t, n, layer.ff, mode);
            let f = self.dropout(t, f, mode);
            x = t.add(x, f);
        }
        self.norm(t, x, self.layout.enc_norm)
    }

    /// Logits `[len(prefix), vocab]` for each decoder position.
    fn decode_logits(&self, t: &mut Tape, memory: NodeId, prefix: &[TokenId], mode: &mut Mode) -> NodeId {
        let ids: Vec<usize> = prefix.iter().map(|i| i.index()).collect();
        let table = t.param(self.layout.embed);
        let mut x = t.embed(table, &ids);
        x = self.dropout(t, x, mode);
        for layer in &self.layout.decoder {
            let n = self.norm(t, x, layer.ln1);
            let a = self.attn_block(t, n, n, layer.self_attn, true);
            let a = self.dropout(t, a, mode);
            x = t.add(x, a);
            let n = self.norm(t, x, layer.ln2);
            let c = self.attn_block(t, n, memory, layer.cross_attn, false);
            let c = self.dropout(t, c, mode);
            x = t.add(x, c);
            let n = self.norm(t, x, layer.ln3);
            let f = self.ff_block(t, n, layer.ff, mode);
            let f = self.dropout(t, f, mode);
            x = t.add(x, f);
        }
        let x = self.norm(t, x, self.layout.dec_norm);
        let (w, b) = (t.param(self.layout.out_w), t.param(self.layout.out_b));
        t.linear(x, w, b)
    }

    /// Encoder output for `encoder`, reusable across decoding steps.
    pub fn encode_memory(&self, encoder: &[TokenId]) -> Result<Array2<f64>> {
        self.check_ids(encoder, self.config.max_encoder_len)?;
        if encoder.is_empty() {
            return Err(Error::Config("encoder input is empty".into()));
        }
        let mut t = Tape::new(&self.params);
        let m = self.encode(&mut t, encoder, &mut Mode::eval());
        Ok(t.value(m).to_owned())
    }

    /// Logits for every position of `prefix` given precomputed encoder memory.
    pub fn logits_with_memory(&self, memory: &Array2<f64>, prefix: &[TokenId]) -> Result<Array2<f64>> {
        self.check_ids(prefix, self.config.max_decoder_len)?;
        if prefix.is_empty() {
            return Err(Error::Config("decoder prefix is empty".into()));
        }
        let mut t = Tape::new(&self.params);
        let mem = t.leaf(memory.clone());
        let l = self.decode_logits(&mut t, mem, prefix, &mut Mode::eval());
        Ok(t.value(l).to_owned())
    }

    /// Per-position probability distributions over the vocabulary.
    pub fn forward(&self, encoder: &[TokenId], decoder_prefix: &[TokenId]) -> Result<Array2<f64>> {
        let memory = self.encode_memory(encoder)?;
        let mut logits = self.logits_with_memory(&memory, decoder_prefix)?;
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        Ok(logits)
    }

    /// Teacher-forced decoder input: `<pad>` followed by the target minus its last token.
    fn decoder_input(&self, vocab_pad: TokenId, target: &[TokenId]) -> Vec<TokenId> {
        let mut input = Vec::with_capacity(target.len());
        input.push(vocab_pad);
        input.extend_from_slice(&target[..target.len() - 1]);
        input
    }

    /// Summed NLL of one example; adds `scale * gradient` into `grads` when given.
    fn example_loss(
        &self,
        pad: TokenId,
        ex: &CorruptionExample,
        grads: Option<(&mut [Array2<f64>], f64)>,
        mode: &mut Mode,
    ) -> Result<(f64, usize)> {
        self.check_ids(&ex.encoder_input, self.config.max_encoder_len)?;
        self.check_ids(&ex.decoder_target, self.config.max_decoder_len)?;
        if ex.encoder_input.is_empty() || ex.decoder_target.is_empty() {
            return Err(Error::Config("empty encoder input or decoder target".into()));
        }
        let mut t = Tape::new(&self.params);
        let memory = self.encode(&mut t, &ex.encoder_input, mode);
        let input = self.decoder_input(pad, &ex.decoder_target);
        let logits = self.decode_logits(&mut t, memory, &input, mode);
        let targets: Vec<usize> = ex.decoder_target.iter().map(|i| i.index()).collect();
        let loss = t.cross_entropy(logits, &targets);
        let value = t.value(loss)[[0, 0]];
        if let Some((g, scale)) = grads {
            t.backward(loss, scale, g);
        }
        Ok((value, targets.len()))
    }

    /// Mean per-token teacher-forced cross-entropy over `batch`.
    pub fn loss(&self, vocab: &Vocabulary, batch: &[CorruptionExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("loss needs a non-empty batch".into()));
        }
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in batch {
            let (l, n) = self.example_loss(vocab.pad(), ex, None, &mut Mode::eval())?;
            total += l;
            tokens += n;
        }
        Ok(total / tokens as f64)
    }

    /// Loss and its gradient for every parameter, without dropout.
    pub fn loss_and_grad(&self, vocab: &Vocabulary, batch: &[CorruptionExample]) -> Result<(f64, Vec<Array2<f64>>)> {
        self.loss_and_grad_inner(vocab, batch, &mut Mode::eval())
    }

    fn loss_and_grad_inner(&self, vocab: &Vocabulary, batch: &[CorruptionExample], mode: &mut Mode) -> Result<(f64, Vec<Array2<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Config("loss needs a non-empty batch".into()));
        }
        let tokens: usize = batch.iter().map(|e| e.decoder_target.len()).sum();
        let scale = 1.0 / tokens as f64;
        let mut grads: Vec<Array2<f64>> = self.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        let mut total = 0.0;
        for ex in batch {
            total += self.example_loss(vocab.pad(), ex, Some((&mut grads, scale)), mode)?.0;
        }
        Ok((total / tokens as f64, grads))
    }

    /// Flat view of every parameter, for finite-difference checks.
    pub fn flat_param(&self, index: usize) -> f64 {
        let (p, off) = self.locate(index);
        self.params[p].as_slice().expect("standard layout")[off]
    }

    pub fn set_flat_param(&mut self, index: usize, value: f64) {
        let (p, off) = self.locate(index);
        self.params[p].as_slice_mut().expect("standard layout")[off] = value;
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (i, p) in self.params.iter().enumerate() {
            if index < p.len() {
                return (i, index);
            }
            index -= p.len();
        }
        panic!("parameter index out of range");
    }
}

/// Flattens per-tensor gradients in parameter order.
pub fn flatten_grads(grads: &[Array2<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{corrupt, MaskPlan, Span};
    use crate::property::{PropertyBucket, PropertyKind};

    fn tiny(vocab: &Vocabulary) -> ModelState {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ff_dim: 32,
            seed: 3,
            ..ModelConfig::small(vocab.len())
        };
        ModelState::new(cfg, vocab, PropertySpec::shipped(PropertyKind::Proxy)).unwrap()
    }

    fn example(v: &Vocabulary) -> CorruptionExample {
        let seq = v.tokenize("3,3-bis(aminomethyl)pentane-1,5-diol").unwrap().ids;
        let plan = MaskPlan {
            spans: vec![Span::new(4, 3), Span::new(9, 1)],
        };
        corrupt(v, &seq, &plan, PropertyBucket::High).unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let v = Vocabulary::reference();
        let m = tiny(&v);
        let ex = example(&v);
        let p = m.forward(&ex.encoder_input, &ex.decoder_target).unwrap();
        assert_eq!(p.dim(), (ex.decoder_target.len(), v.len()));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let v = Vocabulary::reference();
        let m = tiny(&v);
        let ex = example(&v);
        let prefix = ex.decoder_target.clone();
        let base = m.forward(&ex.encoder_input, &prefix).unwrap();
        for t in 0..prefix.len() - 1 {
            let mut changed = prefix.clone();
            changed[t + 1] = v.id("decyl").unwrap();
            let out = m.forward(&ex.encoder_input, &changed).unwrap();
            for pos in 0..=t {
                assert_eq!(base.row(pos), out.row(pos), "position {pos} moved when {} changed", t + 1);
            }
        }
    }

    #[test]
    fn initial_loss_is_near_uniform_entropy() {
        let v = Vocabulary::reference();
        let m = ModelState::new(ModelConfig::small(v.len()), &v, PropertySpec::shipped(PropertyKind::Proxy)).unwrap();
        let loss = m.loss(&v, &[example(&v)]).unwrap();
        let ln_v = (v.len() as f64).ln();
        assert!((loss - ln_v).abs() / ln_v < 0.05, "loss {loss} vs ln V {ln_v}");
    }

    #[test]
    fn duplicated_batch_has_the_same_loss() {
        let v = Vocabulary::reference();
        let m = tiny(&v);
        let ex = example(&v);
        let one = m.loss(&v, std::slice::from_ref(&ex)).unwrap();
        let eight = m.loss(&v, &vec![ex; 8]).unwrap();
        assert!((one - eight).abs() < 1e-12);
        assert!(one >= 0.0);
    }

    #[test]
    fn input_errors() {
        let v = Vocabulary::reference();
        let m = tiny(&v);
        let bad = [TokenId(v.len() as u32)];
        assert!(matches!(m.forward(&bad, &[v.pad()]), Err(Error::TokenOutOfRange { .. })));
        let long = vec![v.pad(); m.config.max_encoder_len + 1];
        assert!(matches!(m.forward(&long, &[v.pad()]), Err(Error::LengthOverflow { .. })));
        let mut cfg = m.config;
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn compatibility_checks() {
        let v = Vocabulary::reference();
        let m = tiny(&v);
        assert!(m.check_compatible(&v, &PropertySpec::shipped(PropertyKind::Proxy)).is_ok());
        assert!(m.check_compatible(&v, &PropertySpec::shipped(PropertyKind::Psa)).is_err());
        let other = Vocabulary::from_tsv_str("a\tGroup\n").unwrap();
        assert!(matches!(m.check_compatible(&other, &m.property), Err(Error::VocabMismatch { .. })));
    }
}
