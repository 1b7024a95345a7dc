//! Python bindings: tokenization, corruption, model editing and the
//! evaluation helpers. Token sequences cross the boundary as lists of surfaces.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iupac_infill::corpus::generate_synthetic_corpus;
use iupac_infill::corruption::{self, MaskPlan, Span};
use iupac_infill::edit::{propose_edits, DecodeMode};
use iupac_infill::eval;
use iupac_infill::model::{load_checkpoint, ModelState};
use iupac_infill::{Error, PropertyBucket, PropertySpec, TokenId};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { ref source, .. } => PyIOError::new_err(format!("{e}: {source}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_bucket(s: &str) -> PyResult<PropertyBucket> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown bucket {s:?}; expected low, med or high")))
}

fn plan_of(spans: Vec<(usize, usize)>) -> MaskPlan {
    MaskPlan {
        spans: spans.into_iter().map(|(s, l)| Span::new(s, l)).collect(),
    }
}

/// A token vocabulary; the bundled reference one unless loaded from a file.
#[pyclass(name = "Vocabulary", frozen)]
struct PyVocabulary(iupac_infill::Vocabulary);

impl PyVocabulary {
    fn ids(&self, name: &str) -> PyResult<Vec<TokenId>> {
        Ok(self.0.tokenize(name).map_err(err)?.ids)
    }

    fn surfaces(&self, ids: &[TokenId]) -> Vec<String> {
        self.0.surfaces(ids).map(str::to_string).collect()
    }

    fn lookup(&self, surfaces: &[String]) -> PyResult<Vec<TokenId>> {
        surfaces
            .iter()
            .map(|s| self.0.id(s).ok_or_else(|| PyValueError::new_err(format!("unknown token {s:?}"))))
            .collect()
    }
}

#[pymethods]
impl PyVocabulary {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<&str>) -> PyResult<Self> {
        match path {
            Some(p) => iupac_infill::Vocabulary::load(p).map(PyVocabulary).map_err(err),
            None => Ok(PyVocabulary(iupac_infill::Vocabulary::reference())),
        }
    }

    #[getter]
    fn version(&self) -> String {
        self.0.version().to_string()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `(surface, class)` pairs for each token of `name`.
    fn tokenize(&self, name: &str) -> PyResult<Vec<(String, String)>> {
        let ids = self.ids(name)?;
        Ok(ids.iter().map(|&id| (self.0.surface(id).to_string(), self.0.class(id).label().to_string())).collect())
    }

    fn detokenize(&self, surfaces: Vec<String>) -> PyResult<String> {
        let ids = self.lookup(&surfaces)?;
        self.0.detokenize_ids(&ids).map_err(err)
    }

    /// Token-proxy property of a name.
    fn proxy_property(&self, name: &str) -> PyResult<f64> {
        iupac_infill::proxy_property(&self.0, &self.ids(name)?).map_err(err)
    }

    /// Seeded synthetic `(name, value)` records.
    fn synthetic_corpus(&self, seed: u64, size: usize) -> PyResult<Vec<(String, f64)>> {
        let records = generate_synthetic_corpus(&self.0, seed, size).map_err(err)?;
        Ok(records.into_iter().map(|r| (r.name, r.property_value)).collect())
    }
}

/// Draws `(start, length)` spans for a sequence of `seq_len` tokens.
#[pyfunction]
#[pyo3(signature = (seq_len, seed, mask_rate=corruption::DEFAULT_MASK_RATE, mean_span=corruption::DEFAULT_MEAN_SPAN, min_span=corruption::DEFAULT_MIN_SPAN))]
fn sample_mask_plan(seq_len: usize, seed: u64, mask_rate: f64, mean_span: f64, min_span: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = corruption::sample_mask_plan(&mut rng, seq_len, mask_rate, mean_span, min_span);
    plan.spans.iter().map(|s| (s.start, s.len)).collect()
}

/// Encoder input and decoder target for masking `spans` of `name`.
#[pyfunction]
fn corrupt(vocab: &PyVocabulary, name: &str, spans: Vec<(usize, usize)>, bucket: &str) -> PyResult<(Vec<String>, Vec<String>)> {
    let ids = vocab.ids(name)?;
    let ex = corruption::corrupt(&vocab.0, &ids, &plan_of(spans), parse_bucket(bucket)?).map_err(err)?;
    Ok((vocab.surfaces(&ex.encoder_input), vocab.surfaces(&ex.decoder_target)))
}

/// Splices generated tokens back into an encoder input. Returns the validity
/// label and the candidate name, if one could be rendered.
#[pyfunction]
#[pyo3(signature = (vocab, encoder, generated, original=None))]
fn apply_infill(
    vocab: &PyVocabulary,
    encoder: Vec<String>,
    generated: Vec<String>,
    original: Option<&str>,
) -> PyResult<(String, Option<String>)> {
    let enc = vocab.lookup(&encoder)?;
    let gen = vocab.lookup(&generated)?;
    let orig = original.map(|n| vocab.ids(n)).transpose()?;
    let r = corruption::apply_infill(&vocab.0, &enc, &gen, orig.as_deref());
    Ok((r.validity.as_str().to_string(), r.candidate_name))
}

/// A trained checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel(ModelState);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_checkpoint(path).map(PyModel).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step
    }

    #[getter]
    fn property(&self) -> String {
        self.0.property.kind.as_str().to_string()
    }

    /// Masks `spans` of `name`, asks for `target` and returns ranked
    /// candidates as dicts. Greedy unless a temperature is given.
    #[pyo3(signature = (vocab, name, spans, target, temperature=None, k=5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn edit<'py>(
        &self,
        py: Python<'py>,
        vocab: &PyVocabulary,
        name: &str,
        spans: Vec<(usize, usize)>,
        target: &str,
        temperature: Option<f64>,
        k: usize,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.0.check_compatible(&vocab.0, &self.0.property).map_err(err)?;
        let ids = vocab.ids(name)?;
        let decode = match temperature {
            None => DecodeMode::Greedy,
            Some(temperature) => DecodeMode::Sample { temperature, k, seed },
        };
        let score = |_: &str, t: &[TokenId]| iupac_infill::proxy_property(&vocab.0, t).ok();
        let candidates =
            propose_edits(&self.0, &vocab.0, &ids, &plan_of(spans), parse_bucket(target)?, decode, &score).map_err(err)?;
        candidates
            .into_iter()
            .map(|c| {
                let d = PyDict::new(py);
                d.set_item("name", c.result.candidate_name)?;
                d.set_item("validity", c.result.validity.as_str())?;
                let frags: Vec<Vec<String>> = c.result.fragments.unwrap_or_default().iter().map(|f| vocab.surfaces(f)).collect();
                d.set_item("fragments", frags)?;
                d.set_item("property_after", c.property_after)?;
                d.set_item("bucket_after", c.bucket_after.map(|b| b.as_str()))?;
                Ok(d)
            })
            .collect()
    }
}

/// `(start, length)` of every single span with length up to `max_len`.
#[pyfunction]
#[pyo3(signature = (seq_len, max_len=5))]
fn enumerate_spans(seq_len: usize, max_len: usize) -> Vec<(usize, usize)> {
    eval::enumerate_spans(seq_len, 1..=max_len)
        .into_iter()
        .map(|p| (p.spans[0].start, p.spans[0].len))
        .collect()
}

/// Whether `candidate` is one span edit of at most `max_span` tokens from `source`.
#[pyfunction]
#[pyo3(signature = (vocab, source, candidate, max_span=5))]
fn baseline_eligible(vocab: &PyVocabulary, source: &str, candidate: &str, max_span: usize) -> PyResult<bool> {
    Ok(eval::baseline_eligible(&vocab.ids(source)?, &vocab.ids(candidate)?, max_span))
}

/// One-sided sign-test p-value for `wins` out of `trials`.
#[pyfunction]
fn sign_test_p(wins: u64, trials: u64) -> f64 {
    eval::sign_test_p(wins, trials)
}

/// Bucket label of `value` under the shipped cutoffs for `property`.
#[pyfunction]
#[pyo3(signature = (value, property="proxy"))]
fn bucketize(value: f64, property: &str) -> PyResult<String> {
    let spec = PropertySpec::by_name(property).map_err(err)?;
    Ok(spec.bucketize(value).map_err(err)?.as_str().to_string())
}

#[pymodule]
#[pyo3(name = "iupac_infill")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_mask_plan, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(apply_infill, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_spans, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_eligible, m)?)?;
    m.add_function(wrap_pyfunction!(sign_test_p, m)?)?;
    m.add_function(wrap_pyfunction!(bucketize, m)?)?;
    Ok(())
}
