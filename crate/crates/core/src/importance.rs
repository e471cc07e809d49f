//! Layer importance from calibration hidden states.
//!
//! Two metrics are supported:
//!
//! * **Jaccard** (default): project a layer's input and output hidden states
//!   onto the vocabulary through the embedding matrix, take the top-k token
//!   index sets of each, and score `1 - |A ∩ B| / |A ∪ B|`. A layer whose
//!   output still "points at" the same tokens as its input scores low.
//! * **Cosine**: `1 - cos(x_in, x_out)` on the raw hidden states.
//!
//! Both are oriented so that higher means more important. Scores are computed
//! in f32 and averaged over calibration samples.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::CalibrationBundle;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ImportanceError {
    #[error("dimension mismatch: vector has {got} elements, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k = {k} is out of range for a vocabulary of {vocab}")]
    KOutOfRange { k: usize, vocab: usize },
    #[error("token sets must be non-empty")]
    EmptySet,
    #[error("token sets have different sizes ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("logit at index {0} is NaN")]
    NanLogit(usize),
    #[error("unknown metric `{0}` (expected jaccard or cosine)")]
    UnknownMetric(String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Jaccard,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Jaccard => "jaccard",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = ImportanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jaccard" => Ok(Metric::Jaccard),
            "cosine" => Ok(Metric::Cosine),
            other => Err(ImportanceError::UnknownMetric(other.to_string())),
        }
    }
}

/// A set of exactly `k` distinct vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSet(BTreeSet<usize>);

impl TokenSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset(&self, other: &TokenSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl FromIterator<usize> for TokenSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        TokenSet(iter.into_iter().collect())
    }
}

/// Logit-lens projection: `result[v] = h · W_E[v]`.
///
/// `embed` is row-major `vocab x d`; `h` must have `d` elements.
pub fn project_to_vocab(
    h: &[f32],
    embed: &[f32],
    vocab: usize,
) -> Result<Vec<f32>, ImportanceError> {
    let d = h.len();
    if vocab == 0 || embed.len() != vocab * d || d == 0 {
        return Err(ImportanceError::DimensionMismatch {
            expected: embed.len().checked_div(vocab).unwrap_or(0),
            got: d,
        });
    }
    Ok(embed.chunks_exact(d).map(|row| dot(h, row)).collect())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// Descending by value, then ascending by index. `-0.0` and `0.0` compare equal.
fn rank_order(logits: &[f32], a: usize, b: usize) -> Ordering {
    logits[b]
        .partial_cmp(&logits[a])
        .expect("NaN filtered")
        .then(a.cmp(&b))
}

/// Indices of the `k` largest logits; ties go to the lower index.
pub fn topk_indices(logits: &[f32], k: usize) -> Result<TokenSet, ImportanceError> {
    let vocab = logits.len();
    if k == 0 || k > vocab {
        return Err(ImportanceError::KOutOfRange { k, vocab });
    }
    if let Some(i) = logits.iter().position(|v| v.is_nan()) {
        return Err(ImportanceError::NanLogit(i));
    }
    let mut idx: Vec<usize> = (0..vocab).collect();
    if k < vocab {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(logits, a, b));
    }
    Ok(idx[..k].iter().copied().collect())
}

/// `1 - J(c_in, c_out)`.
pub fn jaccard_importance(c_in: &TokenSet, c_out: &TokenSet) -> Result<f32, ImportanceError> {
    if c_in.is_empty() || c_out.is_empty() {
        return Err(ImportanceError::EmptySet);
    }
    if c_in.len() != c_out.len() {
        return Err(ImportanceError::SizeMismatch(c_in.len(), c_out.len()));
    }
    let inter = c_in.0.intersection(&c_out.0).count();
    let union = c_in.len() + c_out.len() - inter;
    Ok(1.0 - inter as f32 / union as f32)
}

/// `1 - cos(x_in, x_out)`, in `[0, 2]`.
pub fn cosine_importance(x_in: &[f32], x_out: &[f32]) -> Result<f32, ImportanceError> {
    if x_in.len() != x_out.len() {
        return Err(ImportanceError::DimensionMismatch {
            expected: x_in.len(),
            got: x_out.len(),
        });
    }
    let n_in = dot(x_in, x_in).sqrt();
    let n_out = dot(x_out, x_out).sqrt();
    if n_in == 0.0 || n_out == 0.0 {
        return Err(ImportanceError::ZeroVector);
    }
    let cos = (dot(x_in, x_out) / (n_in * n_out)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub score: f32,
}

/// Serialized as `{"metric", "k", "scores": [{"layer", "score"}], "ordering"}`.
/// `k` is `null` for the cosine metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub metric: Metric,
    pub k: Option<usize>,
    pub scores: Vec<LayerScore>,
    pub ordering: Vec<usize>,
}

impl ImportanceReport {
    /// Builds a report from per-layer scores (index = layer).
    pub fn from_scores(metric: Metric, k: Option<usize>, scores: &[f32]) -> Self {
        Self {
            metric,
            k,
            scores: scores
                .iter()
                .enumerate()
                .map(|(layer, &score)| LayerScore { layer, score })
                .collect(),
            ordering: ascending_order(scores),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }

    /// Checks that scores cover `0..L` once each and that `ordering` is the
    /// ascending permutation under the lower-index tie-break.
    pub fn validate(&self) -> Result<(), ImportanceError> {
        let l = self.scores.len();
        let mut by_layer = vec![None; l];
        for s in &self.scores {
            let slot = by_layer.get_mut(s.layer).ok_or_else(|| {
                ImportanceError::InvalidReport(format!("layer {} out of range", s.layer))
            })?;
            if slot.replace(s.score).is_some() {
                return Err(ImportanceError::InvalidReport(format!(
                    "layer {} scored twice",
                    s.layer
                )));
            }
        }
        let scores: Vec<f32> = by_layer
            .into_iter()
            .map(|s| s.expect("all filled"))
            .collect();
        if self.ordering != ascending_order(&scores) {
            return Err(ImportanceError::InvalidReport(
                "ordering is not ascending by score".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two-column `layer,score` CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "layer,score")?;
        for s in &self.scores {
            writeln!(out, "{},{}", s.layer, s.score)?;
        }
        Ok(())
    }
}

fn ascending_order(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

fn sample_score(
    bundle: &CalibrationBundle,
    layer: usize,
    sample: usize,
    metric: Metric,
    k: usize,
) -> Result<f32, ImportanceError> {
    let x_in = bundle.x_in(layer, sample);
    let x_out = bundle.x_out(layer, sample);
    match metric {
        Metric::Jaccard => {
            let c_in = topk_indices(&project_to_vocab(x_in, bundle.embed(), bundle.vocab())?, k)?;
            let c_out = topk_indices(&project_to_vocab(x_out, bundle.embed(), bundle.vocab())?, k)?;
            jaccard_importance(&c_in, &c_out)
        }
        Metric::Cosine => cosine_importance(x_in, x_out),
    }
}

/// Scores every layer and orders them from least to most important.
///
/// `k` is ignored for the cosine metric.
pub fn score_layers(
    bundle: &CalibrationBundle,
    metric: Metric,
    k: usize,
) -> Result<ImportanceReport, ImportanceError> {
    if metric == Metric::Jaccard && (k == 0 || k > bundle.vocab()) {
        return Err(ImportanceError::KOutOfRange {
            k,
            vocab: bundle.vocab(),
        });
    }
    let samples = bundle.samples();
    let mut scores = Vec::with_capacity(bundle.num_layers());
    for layer in 0..bundle.num_layers() {
        let mut sum = 0.0f32;
        for s in 0..samples {
            sum += sample_score(bundle, layer, s, metric, k)?;
        }
        scores.push(sum / samples as f32);
    }
    let k = (metric == Metric::Jaccard).then_some(k);
    Ok(ImportanceReport::from_scores(metric, k, &scores))
}

/// Layer indices, least important first.
pub fn rank_ascending(report: &ImportanceReport) -> &[usize] {
    &report.ordering
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ix: &[usize]) -> TokenSet {
        ix.iter().copied().collect()
    }

    #[test]
    fn projection_examples() {
        let embed = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(
            project_to_vocab(&[2.0, -1.0], &embed, 3).unwrap(),
            vec![2.0, -1.0, 1.0]
        );
        assert_eq!(
            project_to_vocab(&[0.0, 0.0], &embed, 3).unwrap(),
            vec![0.0; 3]
        );
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(
            project_to_vocab(&[0.5, -3.0, 7.0], &identity, 3).unwrap(),
            vec![0.5, -3.0, 7.0]
        );
        assert!(matches!(
            project_to_vocab(&[1.0, 2.0, 3.0], &embed, 3),
            Err(ImportanceError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.9, 0.5], 2).unwrap(), set(&[1, 2]));
        assert_eq!(topk_indices(&[3.0; 5], 3).unwrap(), set(&[0, 1, 2]));
        assert_eq!(topk_indices(&[0.0, -0.0, 0.0], 1).unwrap(), set(&[0]));
        assert_eq!(topk_indices(&[1.0, 2.0], 2).unwrap(), set(&[0, 1]));
    }

    #[test]
    fn topk_rejects_bad_k_and_nan() {
        assert_eq!(
            topk_indices(&[1.0, 2.0], 0),
            Err(ImportanceError::KOutOfRange { k: 0, vocab: 2 })
        );
        assert_eq!(
            topk_indices(&[1.0, 2.0], 3),
            Err(ImportanceError::KOutOfRange { k: 3, vocab: 2 })
        );
        assert_eq!(
            topk_indices(&[1.0, f32::NAN], 1),
            Err(ImportanceError::NanLogit(1))
        );
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(
            jaccard_importance(&set(&[1, 2, 3]), &set(&[1, 2, 3])).unwrap(),
            0.0
        );
        assert_eq!(
            jaccard_importance(&set(&[1, 2]), &set(&[3, 4])).unwrap(),
            1.0
        );
        let v = jaccard_importance(&set(&[0, 1, 2, 3]), &set(&[2, 3, 4, 5])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(
            jaccard_importance(&set(&[]), &set(&[])),
            Err(ImportanceError::EmptySet)
        );
        assert_eq!(
            jaccard_importance(&set(&[1]), &set(&[1, 2])),
            Err(ImportanceError::SizeMismatch(1, 2))
        );
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_importance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine_importance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), 2.0);
        assert_eq!(cosine_importance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(
            cosine_importance(&[0.0, 0.0], &[0.0, 1.0]),
            Err(ImportanceError::ZeroVector)
        );
        assert!(matches!(
            cosine_importance(&[1.0], &[1.0, 0.0]),
            Err(ImportanceError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ranking_examples() {
        let r = ImportanceReport::from_scores(Metric::Jaccard, Some(10), &[0.5, 0.1, 0.9]);
        assert_eq!(rank_ascending(&r), &[1, 0, 2]);
        let r = ImportanceReport::from_scores(Metric::Jaccard, Some(10), &[0.3; 3]);
        assert_eq!(rank_ascending(&r), &[0, 1, 2]);
        r.validate().unwrap();
    }

    #[test]
    fn validate_catches_inconsistent_ordering() {
        let mut r = ImportanceReport::from_scores(Metric::Cosine, None, &[0.5, 0.1]);
        r.ordering = vec![0, 1];
        assert!(r.validate().is_err());
        let mut r = ImportanceReport::from_scores(Metric::Cosine, None, &[0.5, 0.1]);
        r.scores[1].layer = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn report_json_schema() {
        let r = ImportanceReport::from_scores(Metric::Jaccard, Some(10), &[0.5, 0.25]);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["metric"], "jaccard");
        assert_eq!(v["k"], 10);
        assert_eq!(v["scores"][1]["layer"], 1);
        assert_eq!(v["scores"][1]["score"], 0.25);
        assert_eq!(v["ordering"], serde_json::json!([1, 0]));
        let back: ImportanceReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);

        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "layer,score\n0,0.5\n1,0.25\n"
        );
    }

    #[test]
    fn multi_sample_mean() {
        // Sample 0 shares two of three tokens (1 - 2/4 = 0.5), sample 1 is
        // unchanged (0). Mean 0.25.
        let embed: Vec<f32> = (0..6)
            .flat_map(|v| (0..6).map(move |j| if v == j { 1.0 } else { 0.0 }))
            .collect();
        let x_in = vec![vec![
            vec![6.0, 5.0, 4.0, 0.0, 0.0, 0.0],
            vec![6.0, 5.0, 4.0, 0.0, 0.0, 0.0],
        ]];
        let x_out = vec![vec![
            vec![6.0, 0.0, 4.0, 5.0, 0.0, 0.0],
            vec![6.0, 5.0, 4.0, 0.0, 0.0, 0.0],
        ]];
        let bundle = CalibrationBundle::new(x_in, x_out, embed, 6).unwrap();
        let r = score_layers(&bundle, Metric::Jaccard, 3).unwrap();
        assert_eq!(r.scores[0].score, 0.25);
        assert!(matches!(
            score_layers(&bundle, Metric::Jaccard, 7),
            Err(ImportanceError::KOutOfRange { k: 7, vocab: 6 })
        ));
        let c = score_layers(&bundle, Metric::Cosine, 0).unwrap();
        assert_eq!(c.k, None);
    }
}
