//! Cross-entropy, product-of-experts, and the similarity-gated mixture of
//! the two.
//!
//! All functions work on log-probability rows recorded on a [`Graph`], so the
//! same code path serves training (with backward) and plain evaluation
//! (see [`evaluate`]). Probabilities are only materialised for the
//! similarity exponent and for diagnostics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    Poe,
    PoeCe,
    PoeSals,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Ce,
        LossVariant::Poe,
        LossVariant::PoeCe,
        LossVariant::PoeSals,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Poe => "poe",
            LossVariant::PoeCe => "poe_ce",
            LossVariant::PoeSals => "poe_sals",
        }
    }

    /// Whether the loss reads the frozen biased model's outputs.
    pub fn needs_artifacts(self) -> bool {
        self != LossVariant::Ce
    }

    pub fn needs_similarity(self) -> bool {
        self == LossVariant::PoeSals
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("loss", format!("unknown loss variant `{s}`")))
    }
}

fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-12
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Weight of the cross-entropy term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Sharpness of the similarity adjustment.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Floor applied to the combined gold probability before exponentiation.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Treat the adjusted similarity as a constant weight during backward.
    /// Only `true` is supported.
    #[serde(default = "default_true")]
    pub detach_similarity: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::PoeSals,
            alpha: default_alpha(),
            beta: default_beta(),
            epsilon: default_epsilon(),
            detach_similarity: true,
        }
    }
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        LossConfig {
            variant,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(
                "loss.alpha",
                format!("must be > 0, got {}", self.alpha),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(
                "loss.beta",
                format!("must be > 0, got {}", self.beta),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::config(
                "loss.epsilon",
                format!("must lie in (0, 1e-6], got {}", self.epsilon),
            ));
        }
        if !self.detach_similarity {
            return Err(Error::config(
                "loss.detach_similarity",
                "differentiating through the similarity weight is not supported",
            ));
        }
        Ok(())
    }
}

/// Per-example diagnostics of the similarity-gated loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub poe: f64,
    pub rho: f64,
    pub rho_star: f64,
    pub combined_gold_prob: f64,
    pub total: f64,
}

fn check_gold(g: &Graph, lp: Var, gold: usize) -> Result<()> {
    let y = g.value(lp).len();
    if gold >= y {
        return Err(Error::Index {
            what: "gold label",
            index: gold,
            bound: y,
        });
    }
    Ok(())
}

/// `-main_log_probs[gold]`.
pub fn ce_loss(g: &mut Graph, main_log_probs: Var, gold: usize) -> Result<Var> {
    check_gold(g, main_log_probs, gold)?;
    let picked = g.pick(main_log_probs, gold)?;
    Ok(g.neg(picked))
}

/// Sum of the two experts' log-probabilities (unnormalised).
pub fn combine_log_scores(
    g: &mut Graph,
    main_log_probs: Var,
    biased_log_probs: Var,
) -> Result<Var> {
    if g.shape(main_log_probs) != g.shape(biased_log_probs) {
        return Err(Error::Shape {
            op: "combine_log_scores",
            lhs: g.shape(main_log_probs).to_vec(),
            rhs: g.shape(biased_log_probs).to_vec(),
        });
    }
    g.add(main_log_probs, biased_log_probs)
}

/// Cross-entropy of the renormalised product of experts.
pub fn poe_loss(
    g: &mut Graph,
    main_log_probs: Var,
    biased_log_probs: Var,
    gold: usize,
) -> Result<Var> {
    check_gold(g, main_log_probs, gold)?;
    let combined = combine_log_scores(g, main_log_probs, biased_log_probs)?;
    let normalized = g.log_softmax(combined)?;
    ce_loss(g, normalized, gold)
}

/// `rho^(p^beta)` with `p` clamped to `[epsilon, 1]`.
pub fn adjusted_similarity(
    rho: f64,
    combined_gold_prob: f64,
    beta: f64,
    epsilon: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::domain(
            "adjusted_similarity",
            format!("rho {rho} outside [0, 1]"),
        ));
    }
    if beta.is_nan()
        || beta <= 0.0
        || epsilon.is_nan()
        || epsilon <= 0.0
        || combined_gold_prob.is_nan()
    {
        return Err(Error::domain(
            "adjusted_similarity",
            format!("invalid beta {beta}, epsilon {epsilon} or probability {combined_gold_prob}"),
        ));
    }
    let p = combined_gold_prob.clamp(epsilon, 1.0);
    Ok(rho.powf(p.powf(beta)))
}

/// `rho* · L_poe + alpha · (1 − rho*) · L_ce`, with `rho*` held constant.
pub fn poe_sals_loss(
    g: &mut Graph,
    main_log_probs: Var,
    biased_log_probs: Var,
    rho: f64,
    gold: usize,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let ce = ce_loss(g, main_log_probs, gold)?;
    let poe = poe_loss(g, main_log_probs, biased_log_probs, gold)?;
    let poe_value = g.scalar_value(poe);
    let combined_gold_prob = (-poe_value).exp();
    let rho_star = adjusted_similarity(rho, combined_gold_prob, config.beta, config.epsilon)?;

    let weighted_poe = g.mul_scalar(poe, rho_star);
    let weighted_ce = g.mul_scalar(ce, config.alpha * (1.0 - rho_star));
    let total = g.add(weighted_poe, weighted_ce)?;

    let breakdown = LossBreakdown {
        ce: g.scalar_value(ce),
        poe: poe_value,
        rho,
        rho_star,
        combined_gold_prob,
        total: g.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// `L_poe + alpha · L_ce` with a fixed weight.
pub fn poe_ce_loss(
    g: &mut Graph,
    main_log_probs: Var,
    biased_log_probs: Var,
    gold: usize,
    alpha: f64,
) -> Result<Var> {
    let poe = poe_loss(g, main_log_probs, biased_log_probs, gold)?;
    let ce = ce_loss(g, main_log_probs, gold)?;
    let weighted = g.mul_scalar(ce, alpha);
    g.add(poe, weighted)
}

/// One example's training loss under `config.variant`.
#[derive(Clone, Copy, Debug)]
pub struct ExampleLoss {
    pub total: Var,
    pub rho: Option<f64>,
    pub rho_star: Option<f64>,
}

pub fn example_loss(
    g: &mut Graph,
    main_log_probs: Var,
    biased_log_probs: Option<Var>,
    rho: Option<f64>,
    gold: usize,
    config: &LossConfig,
) -> Result<ExampleLoss> {
    let need_biased = || {
        biased_log_probs.ok_or_else(|| {
            Error::Alignment(format!(
                "loss `{}` needs biased log-probabilities",
                config.variant
            ))
        })
    };
    let plain = |total| ExampleLoss {
        total,
        rho: None,
        rho_star: None,
    };
    match config.variant {
        LossVariant::Ce => ce_loss(g, main_log_probs, gold).map(plain),
        LossVariant::Poe => poe_loss(g, main_log_probs, need_biased()?, gold).map(plain),
        LossVariant::PoeCe => {
            poe_ce_loss(g, main_log_probs, need_biased()?, gold, config.alpha).map(plain)
        }
        LossVariant::PoeSals => {
            let rho = rho.ok_or_else(|| Error::Alignment("poe_sals needs a similarity".into()))?;
            let (total, b) = poe_sals_loss(g, main_log_probs, need_biased()?, rho, gold, config)?;
            Ok(ExampleLoss {
                total,
                rho: Some(b.rho),
                rho_star: Some(b.rho_star),
            })
        }
    }
}

/// Checks that `row` is a log-probability vector (exp sums to 1 within 1e-9).
pub fn check_log_probs(row: &[f64]) -> Result<()> {
    if row.len() < 2 || row.iter().any(|x| x.is_nan() || *x > 1e-12) {
        return Err(Error::domain("log_probs", format!("invalid row {row:?}")));
    }
    let total: f64 = row.iter().map(|x| x.exp()).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(
            "log_probs",
            format!("probabilities sum to {total}, not 1"),
        ));
    }
    Ok(())
}

/// Evaluates every loss term for plain log-probability rows.
pub fn evaluate(
    main_log_probs: &[f64],
    biased_log_probs: &[f64],
    rho: f64,
    gold: usize,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    check_log_probs(main_log_probs)?;
    check_log_probs(biased_log_probs)?;
    let mut g = Graph::new();
    let m = g.constant(&Tensor::vector(main_log_probs.to_vec())?);
    let b = g.constant(&Tensor::vector(biased_log_probs.to_vec())?);
    poe_sals_loss(&mut g, m, b, rho, gold, config).map(|(_, breakdown)| breakdown)
}

/// Fixed-weight PoE + CE for plain rows (`alpha >= 0`).
pub fn evaluate_poe_ce(
    main_log_probs: &[f64],
    biased_log_probs: &[f64],
    gold: usize,
    alpha: f64,
) -> Result<f64> {
    check_log_probs(main_log_probs)?;
    check_log_probs(biased_log_probs)?;
    let mut g = Graph::new();
    let m = g.constant(&Tensor::vector(main_log_probs.to_vec())?);
    let b = g.constant(&Tensor::vector(biased_log_probs.to_vec())?);
    let v = poe_ce_loss(&mut g, m, b, gold, alpha)?;
    Ok(g.scalar_value(v))
}

/// Renormalised combined probabilities of the two experts.
pub fn combined_probs(main_log_probs: &[f64], biased_log_probs: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let m = g.constant(&Tensor::vector(main_log_probs.to_vec())?);
    let b = g.constant(&Tensor::vector(biased_log_probs.to_vec())?);
    let c = combine_log_scores(&mut g, m, b)?;
    let n = g.log_softmax(c)?;
    Ok(g.value(n).iter().map(|x| x.exp()).collect())
}
