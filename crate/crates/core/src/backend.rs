//! Task back-ends: closed-set posterior scoring and zero-resource cosine
//! scoring against enrolled language centroids.
//!
//! Both produce plain score vectors that go straight into a score file. A
//! segment that cannot be scored gets `-inf` in every column plus a
//! diagnostic, never an error that aborts a run.

use std::io::{self, BufRead, Write};

use ndarray::Array1;
use thiserror::Error;

use crate::dsp::{FeatureMatrix, FrontEnd, Waveform};
use crate::net::{extract_xvector, forward, NetworkParams};
use crate::submission::format_score;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("language `{0}` has no usable reference utterance")]
    NoUsableReferences(String),
    #[error("language `{0}` enrolled twice")]
    DuplicateLanguage(String),
    #[error("language index {index} outside the {num_classes} trained languages")]
    InvalidSubset { index: usize, num_classes: usize },
    #[error("{line}: malformed language model line")]
    MalformedModel { line: usize },
    #[error("x-vector dimension {found}, models have {expected}")]
    DimMismatch { expected: usize, found: usize },
}

/// Scores for one segment plus an optional diagnostic for lost columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub scores: Vec<f64>,
    pub diagnostic: Option<String>,
}

impl Scored {
    pub fn ok(scores: Vec<f64>) -> Self {
        Self { scores, diagnostic: None }
    }

    /// Every column `-inf`.
    pub fn lost(num_columns: usize, reason: impl ToString) -> Self {
        Self {
            scores: vec![f64::NEG_INFINITY; num_columns],
            diagnostic: Some(reason.to_string()),
        }
    }

    pub fn is_lost(&self) -> bool {
        self.scores.iter().all(|s| *s == f64::NEG_INFINITY)
    }
}

fn check_subset(params: &NetworkParams, subset: Option<&[usize]>) -> Result<usize, BackendError> {
    let n = params.num_classes();
    match subset {
        None => Ok(n),
        Some(s) => {
            if let Some(&index) = s.iter().find(|&&i| i >= n) {
                return Err(BackendError::InvalidSubset { index, num_classes: n });
            }
            Ok(s.len())
        }
    }
}

/// Log posteriors of the trained languages, projected onto `subset` (in
/// subset order) without renormalising.
pub fn score_closed_set(params: &NetworkParams, features: &FeatureMatrix, subset: Option<&[usize]>) -> Result<Scored, BackendError> {
    let cols = check_subset(params, subset)?;
    Ok(match forward(params, features) {
        Ok(cache) => {
            let lp = cache.log_posteriors;
            Scored::ok(match subset {
                None => lp.to_vec(),
                Some(s) => s.iter().map(|&i| lp[i]).collect(),
            })
        }
        Err(e) => Scored::lost(cols, e),
    })
}

/// Front end plus [`score_closed_set`]; utterances the front end rejects
/// (e.g. all frames removed by VAD) score `-inf`.
pub fn score_closed_set_wave(
    params: &NetworkParams,
    front_end: &FrontEnd,
    wave: &Waveform,
    subset: Option<&[usize]>,
) -> Result<Scored, BackendError> {
    let cols = check_subset(params, subset)?;
    match front_end.process(wave) {
        Ok(f) => score_closed_set(params, &f, subset),
        Err(e) => Ok(Scored::lost(cols, e)),
    }
}

/// Per-language centroids of reference x-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModelSet {
    pub language_ids: Vec<String>,
    pub centroids: Vec<Array1<f64>>,
    pub num_reference_utts: Vec<usize>,
}

impl LanguageModelSet {
    /// Mean x-vector per language. Languages with no vectors are an error.
    pub fn from_xvectors(references: Vec<(String, Vec<Array1<f64>>)>) -> Result<Self, BackendError> {
        let mut set = Self {
            language_ids: Vec::new(),
            centroids: Vec::new(),
            num_reference_utts: Vec::new(),
        };
        for (lang, vecs) in references {
            if set.language_ids.contains(&lang) {
                return Err(BackendError::DuplicateLanguage(lang));
            }
            let Some(first) = vecs.first() else {
                return Err(BackendError::NoUsableReferences(lang));
            };
            let mut sum = Array1::zeros(first.len());
            for v in &vecs {
                if v.len() != first.len() {
                    return Err(BackendError::DimMismatch {
                        expected: first.len(),
                        found: v.len(),
                    });
                }
                sum += v;
            }
            set.centroids.push(sum / vecs.len() as f64);
            set.num_reference_utts.push(vecs.len());
            set.language_ids.push(lang);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.language_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.language_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Array1::len)
    }

    /// One line per language: `language count v1 v2 ...`.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ((id, c), n) in self.language_ids.iter().zip(&self.centroids).zip(&self.num_reference_utts) {
            write!(w, "{id} {n}")?;
            for v in c {
                write!(w, " {}", format_score(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn parse_text<R: BufRead>(reader: R) -> Result<Self, BackendError> {
        let mut set = Self {
            language_ids: Vec::new(),
            centroids: Vec::new(),
            num_reference_utts: Vec::new(),
        };
        for (i, line) in reader.lines().enumerate() {
            let bad = BackendError::MalformedModel { line: i + 1 };
            let line = line.map_err(|_| bad.clone())?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let mut tok = t.split_whitespace();
            let id = tok.next().ok_or(bad.clone())?.to_string();
            let n: usize = tok.next().and_then(|s| s.parse().ok()).ok_or(bad.clone())?;
            let values: Vec<f64> = tok.map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad.clone())?;
            if n == 0 || values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(bad);
            }
            if set.dim() != 0 && values.len() != set.dim() {
                return Err(BackendError::DimMismatch {
                    expected: set.dim(),
                    found: values.len(),
                });
            }
            if set.language_ids.contains(&id) {
                return Err(BackendError::DuplicateLanguage(id));
            }
            set.language_ids.push(id);
            set.num_reference_utts.push(n);
            set.centroids.push(Array1::from(values));
        }
        Ok(set)
    }
}

/// Extracts x-vectors for every reference utterance and averages them per
/// language. References the network cannot process are skipped.
pub fn enroll_languages(params: &NetworkParams, references: &[(String, Vec<FeatureMatrix>)]) -> Result<LanguageModelSet, BackendError> {
    let mut xvecs = Vec::with_capacity(references.len());
    for (lang, feats) in references {
        let vecs: Vec<Array1<f64>> = feats
            .iter()
            .filter_map(|f| match extract_xvector(params, f) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("skipping reference for `{lang}`: {e}");
                    None
                }
            })
            .collect();
        xvecs.push((lang.clone(), vecs));
    }
    LanguageModelSet::from_xvectors(xvecs)
}

/// `<a, b> / (|a| |b|)`, or `None` when either vector has zero norm.
pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of `xvector` against every centroid. Zero-norm
/// centroids score `-inf` in their column.
pub fn score_xvector(models: &LanguageModelSet, xvector: &Array1<f64>) -> Result<Scored, BackendError> {
    if xvector.len() != models.dim() {
        return Err(BackendError::DimMismatch {
            expected: models.dim(),
            found: xvector.len(),
        });
    }
    let mut bad = Vec::new();
    let scores = models
        .centroids
        .iter()
        .zip(&models.language_ids)
        .map(|(c, id)| {
            cosine_similarity(xvector, c).unwrap_or_else(|| {
                bad.push(id.as_str());
                f64::NEG_INFINITY
            })
        })
        .collect();
    let diagnostic = (!bad.is_empty()).then(|| format!("zero-norm vector scoring against {}", bad.join(",")));
    Ok(Scored { scores, diagnostic })
}

pub fn score_zero_resource(models: &LanguageModelSet, features: &FeatureMatrix, params: &NetworkParams) -> Result<Scored, BackendError> {
    match extract_xvector(params, features) {
        Ok(x) => score_xvector(models, &x),
        Err(e) => Ok(Scored::lost(models.len(), e)),
    }
}

pub fn score_zero_resource_wave(
    models: &LanguageModelSet,
    front_end: &FrontEnd,
    wave: &Waveform,
    params: &NetworkParams,
) -> Result<Scored, BackendError> {
    match front_end.process(wave) {
        Ok(f) => score_zero_resource(models, &f, params),
        Err(e) => Ok(Scored::lost(models.len(), e)),
    }
}
