//! Gradient×input token saliencies and the cosine similarity between two
//! models' saliency vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, ClassifierParams, InputView};
use crate::tensor::Tensor;

/// Per-token saliency scores over a set of sequence positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyVector {
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SaliencyVector {
    pub fn new(positions: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if positions.len() != scores.len() {
            return Err(Error::Shape {
                op: "saliency_vector",
                lhs: vec![positions.len()],
                rhs: vec![scores.len()],
            });
        }
        if let Some(s) = scores
            .iter()
            .find(|s| s.is_nan() || **s < 0.0 || s.is_infinite())
        {
            return Err(Error::domain(
                "saliency_vector",
                format!("invalid score {s}"),
            ));
        }
        Ok(SaliencyVector { positions, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score_at(&self, position: usize) -> Option<f64> {
        self.positions
            .iter()
            .position(|&p| p == position)
            .map(|i| self.scores[i])
    }
}

/// Which class logit the saliency is taken with respect to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyTarget {
    #[default]
    GoldLabel,
    Predicted,
}

/// `score[j] = ‖grad[j] ⊙ emb[j]‖₂` for every selected position `j`.
pub fn saliency(
    grad_embeddings: &Tensor,
    embeddings: &Tensor,
    positions: &[usize],
) -> Result<SaliencyVector> {
    if grad_embeddings.shape() != embeddings.shape() || embeddings.rank() != 2 {
        return Err(Error::Shape {
            op: "saliency",
            lhs: grad_embeddings.shape().to_vec(),
            rhs: embeddings.shape().to_vec(),
        });
    }
    if positions.is_empty() {
        return Err(Error::domain("saliency", "empty position set"));
    }
    let rows = embeddings.shape()[0];
    let scores = positions
        .iter()
        .map(|&j| {
            if j >= rows {
                return Err(Error::Index {
                    what: "saliency position",
                    index: j,
                    bound: rows,
                });
            }
            let s = grad_embeddings
                .row(j)
                .iter()
                .zip(embeddings.row(j))
                .map(|(g, e)| (g * e) * (g * e))
                .sum::<f64>()
                .sqrt();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    SaliencyVector::new(positions.to_vec(), scores)
}

/// Cosine similarity over the positions both vectors cover.
///
/// Returns 0 when either restricted vector has zero norm. The result lies in
/// `[0, 1]` because scores are non-negative.
pub fn cosine_similarity(a: &SaliencyVector, b: &SaliencyVector) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut shared = 0usize;
    for (&p, &sa) in a.positions.iter().zip(&a.scores) {
        if let Some(sb) = b.score_at(p) {
            shared += 1;
            dot += sa * sb;
            na += sa * sa;
            nb += sb * sb;
        }
    }
    if shared == 0 {
        return Err(Error::domain(
            "cosine_similarity",
            format!(
                "disjoint position sets {:?} and {:?}",
                a.positions, b.positions
            ),
        ));
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0))
}

/// Saliency of a model on `input` restricted to `positions`, taken with
/// respect to `gold` or to the model's own prediction.
pub fn model_saliency(
    params: &ClassifierParams,
    input: &InputView,
    gold: usize,
    target: SaliencyTarget,
    positions: &[usize],
) -> Result<(Tensor, SaliencyVector)> {
    let class = match target {
        SaliencyTarget::GoldLabel => gold,
        SaliencyTarget::Predicted => argmax(params.forward(input)?.values()),
    };
    let ig = params.forward_with_input_grad(input, class)?;
    let sal = saliency(&ig.grad_embeddings, &ig.embeddings, positions)?;
    Ok((ig.logits, sal))
}
