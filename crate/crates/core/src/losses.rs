//! Risk estimators over classifier outputs.
//!
//! Every estimator uses the probability surrogate `ℒ[g, +1] = g₋₁` and
//! `ℒ[g, -1] = g₊₁`, which satisfies `ℒ[t, +1] + ℒ[t, -1] = 1` and is
//! 1-Lipschitz. Because of that, each risk is affine (or, for nnPU, piecewise
//! affine) in the per-instance `g₋₁` values, and the `*_with_grad` variants
//! return the exact derivative of the risk with respect to each `g₋₁`.
//!
//! "Positive" means the normal class throughout: `P` is the set of instances
//! drawn from normal bags and `U` the set drawn from anomalous bags.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

/// Output of the two-logit classifier for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Probability of the anomalous class, `g₋₁`.
    pub g_neg: f64,
    /// Probability of the normal class, `g₊₁ = 1 - g₋₁`.
    pub g_pos: f64,
}

impl Prediction {
    /// Builds a prediction from the anomalous-class probability.
    pub fn from_anomaly_prob(g_neg: f64) -> Self {
        Prediction { g_neg, g_pos: 1.0 - g_neg }
    }

    pub const UNIFORM: Prediction = Prediction { g_neg: 0.5, g_pos: 0.5 };
}

/// The probability surrogate loss.
pub fn surrogate(pred: Prediction, label: Label) -> f64 {
    match label {
        Label::Normal => pred.g_neg,
        Label::Anomalous => pred.g_pos,
    }
}

/// `∂ℒ[g, label] / ∂g₋₁`.
fn surrogate_slope(label: Label) -> f64 {
    match label {
        Label::Normal => 1.0,
        Label::Anomalous => -1.0,
    }
}

/// A risk value with its additive breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub positive_term: f64,
    pub unlabeled_term: f64,
    pub correction_term: f64,
}

impl RiskEstimate {
    fn from_terms(positive_term: f64, unlabeled_term: f64, correction_term: f64) -> Self {
        RiskEstimate {
            value: positive_term + (unlabeled_term + correction_term),
            positive_term,
            unlabeled_term,
            correction_term,
        }
    }

    fn scaled(self, c: f64) -> Self {
        RiskEstimate::from_terms(c * self.positive_term, c * self.unlabeled_term, c * self.correction_term)
    }
}

/// Derivative of a risk with respect to each instance's `g₋₁`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreGradient {
    pub positive: Vec<f64>,
    pub unlabeled: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PnWeighting {
    /// `½` on each class-conditional mean.
    Balanced,
    /// `π` on the positive mean, `1 - π` on the negative mean.
    Prior(f64),
}

/// Algebraic form of the balanced PU estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalancedPuForm {
    /// Three-term form with an explicit correction on `P`.
    ThreeTerm,
    /// Form simplified by the symmetric condition; a constant shift replaces
    /// the correction term.
    Simplified,
}

fn check_prior(prior: f64) -> Result<()> {
    if prior > 0.0 && prior < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid_config(format!("class prior must lie in (0, 1), got {prior}")))
    }
}

fn check_non_empty(p: &[Prediction], u: &[Prediction]) -> Result<()> {
    if p.is_empty() || u.is_empty() {
        return Err(Error::invalid_input("both prediction sets must be non-empty"));
    }
    Ok(())
}

fn mean_loss(preds: &[Prediction], label: Label) -> f64 {
    preds.iter().map(|&p| surrogate(p, label)).sum::<f64>() / preds.len() as f64
}

pub fn pn_risk_with_grad(
    preds_pos: &[Prediction],
    preds_neg: &[Prediction],
    weighting: PnWeighting,
) -> Result<(RiskEstimate, ScoreGradient)> {
    check_non_empty(preds_pos, preds_neg)?;
    let (wp, wn) = match weighting {
        PnWeighting::Balanced => (0.5, 0.5),
        PnWeighting::Prior(pi) => {
            check_prior(pi)?;
            (pi, 1.0 - pi)
        }
    };
    let est = RiskEstimate::from_terms(
        wp * mean_loss(preds_pos, Label::Normal),
        wn * mean_loss(preds_neg, Label::Anomalous),
        0.0,
    );
    let gp = wp / preds_pos.len() as f64;
    let gn = -wn / preds_neg.len() as f64;
    Ok((est, ScoreGradient { positive: vec![gp; preds_pos.len()], unlabeled: vec![gn; preds_neg.len()] }))
}

/// Fully supervised risk; `preds_neg` are instances with known negative labels.
pub fn pn_risk(preds_pos: &[Prediction], preds_neg: &[Prediction], weighting: PnWeighting) -> Result<RiskEstimate> {
    pn_risk_with_grad(preds_pos, preds_neg, weighting).map(|(r, _)| r)
}

/// The three empirical means every PU estimator is built from:
/// `(R_P⁺, R_U⁻, R_P⁻)`.
fn pu_components(p: &[Prediction], u: &[Prediction]) -> (f64, f64, f64) {
    (mean_loss(p, Label::Normal), mean_loss(u, Label::Anomalous), mean_loss(p, Label::Anomalous))
}

pub fn upu_risk_with_grad(p: &[Prediction], u: &[Prediction], prior: f64) -> Result<(RiskEstimate, ScoreGradient)> {
    check_prior(prior)?;
    check_non_empty(p, u)?;
    let (rp_pos, ru_neg, rp_neg) = pu_components(p, u);
    let est = RiskEstimate::from_terms(prior * rp_pos, ru_neg, -prior * rp_neg);
    let (np, nu) = (p.len() as f64, u.len() as f64);
    Ok((est, ScoreGradient { positive: vec![2.0 * prior / np; p.len()], unlabeled: vec![-1.0 / nu; u.len()] }))
}

/// Unbiased PU risk. May be negative.
pub fn upu_risk(p: &[Prediction], u: &[Prediction], prior: f64) -> Result<RiskEstimate> {
    upu_risk_with_grad(p, u, prior).map(|(r, _)| r)
}

pub fn nnpu_risk_with_grad(p: &[Prediction], u: &[Prediction], prior: f64) -> Result<(RiskEstimate, ScoreGradient)> {
    check_prior(prior)?;
    check_non_empty(p, u)?;
    let (rp_pos, ru_neg, rp_neg) = pu_components(p, u);
    let negative_part = ru_neg - prior * rp_neg;
    let (np, nu) = (p.len() as f64, u.len() as f64);
    if negative_part >= 0.0 {
        let est = RiskEstimate::from_terms(prior * rp_pos, ru_neg, -prior * rp_neg);
        Ok((est, ScoreGradient { positive: vec![2.0 * prior / np; p.len()], unlabeled: vec![-1.0 / nu; u.len()] }))
    } else {
        // Clamp active: the negative-class part contributes exactly zero.
        let mut est = RiskEstimate::from_terms(prior * rp_pos, ru_neg, -ru_neg);
        est.value = prior * rp_pos;
        Ok((est, ScoreGradient { positive: vec![prior / np; p.len()], unlabeled: vec![0.0; u.len()] }))
    }
}

/// Non-negative PU risk: `π·R_P⁺ + max(0, R_U⁻ - π·R_P⁻)`.
pub fn nnpu_risk(p: &[Prediction], u: &[Prediction], prior: f64) -> Result<RiskEstimate> {
    nnpu_risk_with_grad(p, u, prior).map(|(r, _)| r)
}

pub fn balanced_pu_risk_with_grad(
    p: &[Prediction],
    u: &[Prediction],
    prior: f64,
    form: BalancedPuForm,
) -> Result<(RiskEstimate, ScoreGradient)> {
    check_prior(prior)?;
    check_non_empty(p, u)?;
    let (rp_pos, ru_neg, rp_neg) = pu_components(p, u);
    let k = 1.0 / (2.0 * (1.0 - prior));
    let est = match form {
        BalancedPuForm::ThreeTerm => RiskEstimate::from_terms(0.5 * rp_pos, k * ru_neg, -prior * k * rp_neg),
        BalancedPuForm::Simplified => RiskEstimate::from_terms(k * rp_pos, k * ru_neg, -prior * k),
    };
    let (np, nu) = (p.len() as f64, u.len() as f64);
    Ok((est, ScoreGradient { positive: vec![k / np; p.len()], unlabeled: vec![-k / nu; u.len()] }))
}

/// Balanced PU risk, an unbiased estimate of the balanced PN risk.
pub fn balanced_pu_risk(p: &[Prediction], u: &[Prediction], prior: f64, form: BalancedPuForm) -> Result<RiskEstimate> {
    balanced_pu_risk_with_grad(p, u, prior, form).map(|(r, _)| r)
}

/// Per-bag normalized exponential of `g₋₁`: the soft estimate of which
/// instance is the bag's most anomalous one.
pub fn attention_weights(bag: &[Prediction]) -> Vec<f64> {
    let max = bag.iter().map(|p| p.g_neg).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = bag.iter().map(|p| (p.g_neg - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_groups(pos_bags: &[Vec<Prediction>], neg_bags: &[Vec<Prediction>]) -> Result<()> {
    if pos_bags.is_empty() || neg_bags.is_empty() {
        return Err(Error::Grouping("need at least one positive and one negative bag".into()));
    }
    if pos_bags.iter().chain(neg_bags).any(Vec::is_empty) {
        return Err(Error::Grouping("empty bag in grouped predictions".into()));
    }
    Ok(())
}

/// Attention weights for every bag.
pub fn bag_weights(bags: &[Vec<Prediction>]) -> Vec<Vec<f64>> {
    bags.iter().map(|b| attention_weights(b)).collect()
}

/// BFGPU risk with caller-supplied per-instance weights. The weights are
/// constants here, so the gradient is with respect to `g₋₁` only.
pub fn bfgpu_risk_weighted(
    pos_bags: &[Vec<Prediction>],
    neg_bags: &[Vec<Prediction>],
    pos_weights: &[Vec<f64>],
    neg_weights: &[Vec<f64>],
) -> Result<(RiskEstimate, ScoreGradient)> {
    check_groups(pos_bags, neg_bags)?;
    let same_shape =
        |a: &[Vec<Prediction>], w: &[Vec<f64>]| a.len() == w.len() && a.iter().zip(w).all(|(x, y)| x.len() == y.len());
    if !same_shape(pos_bags, pos_weights) || !same_shape(neg_bags, neg_weights) {
        return Err(Error::Grouping("weights do not match bag structure".into()));
    }
    let n_p: usize = pos_bags.iter().map(Vec::len).sum();
    let n_u: usize = neg_bags.iter().map(Vec::len).sum();
    let cp = 1.0 / (2.0 * n_p as f64);
    let cu = 1.0 / (2.0 * n_u as f64);

    let weighted = |bags: &[Vec<Prediction>], weights: &[Vec<f64>], label: Label| -> f64 {
        bags.iter().zip(weights).flat_map(|(b, w)| b.iter().zip(w)).map(|(&p, &w)| w * surrogate(p, label)).sum()
    };
    let est = RiskEstimate::from_terms(
        cp * weighted(pos_bags, pos_weights, Label::Normal),
        cu * weighted(neg_bags, neg_weights, Label::Anomalous),
        0.0,
    );
    let grad = ScoreGradient {
        positive: pos_weights.iter().flatten().map(|w| cp * w).collect(),
        unlabeled: neg_weights.iter().flatten().map(|w| -cu * w).collect(),
    };
    Ok((est, grad))
}

pub fn bfgpu_risk_with_grad(
    pos_bags: &[Vec<Prediction>],
    neg_bags: &[Vec<Prediction>],
) -> Result<(RiskEstimate, ScoreGradient)> {
    check_groups(pos_bags, neg_bags)?;
    bfgpu_risk_weighted(pos_bags, neg_bags, &bag_weights(pos_bags), &bag_weights(neg_bags))
}

/// Balanced fine-grained PU risk over bag-grouped predictions.
pub fn bfgpu_risk(pos_bags: &[Vec<Prediction>], neg_bags: &[Vec<Prediction>]) -> Result<RiskEstimate> {
    bfgpu_risk_with_grad(pos_bags, neg_bags).map(|(r, _)| r)
}

/// Unweighted sum of the surrogate over pseudo-labelled pairs.
pub fn pseudo_loss(pairs: &[(Prediction, Label)]) -> f64 {
    pairs.iter().map(|&(p, y)| surrogate(p, y)).sum()
}

fn pseudo_loss_with_grad(pairs: &[(Prediction, Label)]) -> (RiskEstimate, Vec<f64>) {
    let sum_for =
        |label: Label| -> f64 { pairs.iter().filter(|(_, y)| *y == label).map(|&(p, y)| surrogate(p, y)).sum() };
    let est = RiskEstimate::from_terms(sum_for(Label::Normal), sum_for(Label::Anomalous), 0.0);
    (est, pairs.iter().map(|&(_, y)| surrogate_slope(y)).collect())
}

/// How a flat batch of instances is organised.
///
/// For `Bags`, instances are laid out as every positive bag in order followed
/// by every unlabeled bag in order; the vectors hold bag lengths.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLayout {
    Bags { positive: Vec<usize>, unlabeled: Vec<usize> },
    Labeled(Vec<Label>),
}

impl BatchLayout {
    pub fn n_instances(&self) -> usize {
        match self {
            BatchLayout::Bags { positive, unlabeled } => positive.iter().chain(unlabeled).sum(),
            BatchLayout::Labeled(labels) => labels.len(),
        }
    }

    /// One bag per instance on each side.
    pub fn flat(n_positive: usize, n_unlabeled: usize) -> Self {
        BatchLayout::Bags { positive: vec![1; n_positive], unlabeled: vec![1; n_unlabeled] }
    }
}

/// A differentiable training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Pn(PnWeighting),
    Upu { prior: f64 },
    Nnpu { prior: f64 },
    BalancedPu { prior: f64, form: BalancedPuForm },
    Bfgpu,
    Pseudo,
}

fn regroup(preds: &[Prediction], lens: &[usize]) -> Vec<Vec<Prediction>> {
    let mut out = Vec::with_capacity(lens.len());
    let mut start = 0;
    for &l in lens {
        out.push(preds[start..start + l].to_vec());
        start += l;
    }
    out
}

impl Objective {
    /// Risk and `∂risk/∂g₋₁` per instance, in batch order.
    pub fn evaluate(&self, preds: &[Prediction], layout: &BatchLayout) -> Result<(RiskEstimate, Vec<f64>)> {
        if preds.len() != layout.n_instances() {
            return Err(Error::Grouping(format!(
                "{} predictions for a layout of {} instances",
                preds.len(),
                layout.n_instances()
            )));
        }
        let (pos_lens, unl_lens) = match (self, layout) {
            (Objective::Pseudo, BatchLayout::Labeled(labels)) => {
                let pairs: Vec<(Prediction, Label)> = preds.iter().copied().zip(labels.iter().copied()).collect();
                return Ok(pseudo_loss_with_grad(&pairs));
            }
            (Objective::Pseudo, _) => return Err(Error::Grouping("pseudo loss needs labeled pairs".into())),
            (_, BatchLayout::Labeled(_)) => return Err(Error::Grouping("PU and PN risks need a bag layout".into())),
            (_, BatchLayout::Bags { positive, unlabeled }) => (positive, unlabeled),
        };
        let n_pos: usize = pos_lens.iter().sum();
        let (p, u) = preds.split_at(n_pos);
        let (est, grad) = match *self {
            Objective::Pn(w) => pn_risk_with_grad(p, u, w)?,
            Objective::Upu { prior } => upu_risk_with_grad(p, u, prior)?,
            Objective::Nnpu { prior } => nnpu_risk_with_grad(p, u, prior)?,
            Objective::BalancedPu { prior, form } => balanced_pu_risk_with_grad(p, u, prior, form)?,
            Objective::Bfgpu => bfgpu_risk_with_grad(&regroup(p, pos_lens), &regroup(u, unl_lens))?,
            Objective::Pseudo => unreachable!(),
        };
        let mut flat = grad.positive;
        flat.extend(grad.unlabeled);
        Ok((est, flat))
    }

    /// Like [`Objective::evaluate`], scaled by `lambda`.
    pub fn evaluate_scaled(
        &self,
        preds: &[Prediction],
        layout: &BatchLayout,
        lambda: f64,
    ) -> Result<(RiskEstimate, Vec<f64>)> {
        let (est, grad) = self.evaluate(preds, layout)?;
        Ok((est.scaled(lambda), grad.into_iter().map(|g| lambda * g).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(g_neg: f64) -> Prediction {
        Prediction::from_anomaly_prob(g_neg)
    }

    fn preds(v: &[f64]) -> Vec<Prediction> {
        v.iter().copied().map(pred).collect()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pn_examples() {
        let perfect_p = preds(&[0.0, 0.0]);
        let perfect_n = preds(&[1.0, 1.0]);
        assert_eq!(pn_risk(&perfect_p, &perfect_n, PnWeighting::Balanced).unwrap().value, 0.0);
        assert_eq!(pn_risk(&perfect_p, &perfect_n, PnWeighting::Prior(0.3)).unwrap().value, 0.0);

        let u = vec![Prediction::UNIFORM; 3];
        assert_eq!(pn_risk(&u, &u, PnWeighting::Balanced).unwrap().value, 0.5);

        // g₊₁ = (0.1, 0.3) on negatives means g₋₁ = (0.9, 0.7).
        let r = pn_risk(&preds(&[0.2, 0.4]), &preds(&[0.9, 0.7]), PnWeighting::Balanced).unwrap();
        assert!(close(r.value, 0.25, 1e-15));

        assert!(pn_risk(&[], &u, PnWeighting::Balanced).is_err());
        assert!(pn_risk(&u, &u, PnWeighting::Prior(1.0)).is_err());
    }

    #[test]
    fn upu_examples() {
        let u = vec![Prediction::UNIFORM; 4];
        for pi in [0.1, 0.5, 0.9] {
            assert!(close(upu_risk(&u, &u, pi).unwrap().value, 0.5, 1e-15));
        }
        let r = upu_risk(&preds(&[0.0]), &preds(&[0.0]), 0.5).unwrap();
        assert!(close(r.value, 0.5, 1e-15));
        assert!(matches!(upu_risk(&u, &u, 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(upu_risk(&u, &u, 1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn upu_can_go_negative_and_nnpu_clamps() {
        // P with g₊₁ = 1 (g₋₁ = 0), U with g₊₁ = 0 (g₋₁ = 1), π = 0.9.
        let p = preds(&[0.0]);
        let u = preds(&[1.0]);
        let upu = upu_risk(&p, &u, 0.9).unwrap();
        assert!(close(upu.value, -0.9, 1e-15));
        let nn = nnpu_risk(&p, &u, 0.9).unwrap();
        assert_eq!(nn.value, 0.0);
        assert!(nn.value >= upu.value);
        let (_, g) = nnpu_risk_with_grad(&p, &u, 0.9).unwrap();
        assert_eq!(g.unlabeled, vec![0.0]);
    }

    #[test]
    fn nnpu_matches_upu_when_clamp_inactive() {
        let p = preds(&[0.1, 0.3]);
        let u = preds(&[0.2, 0.6, 0.4]);
        let a = upu_risk(&p, &u, 0.6).unwrap();
        let b = nnpu_risk(&p, &u, 0.6).unwrap();
        assert!(a.unlabeled_term + a.correction_term > 0.0);
        assert!((a.value - b.value).abs() < 1e-15);
        assert_eq!(a.positive_term, b.positive_term);
    }

    #[test]
    fn balanced_pu_examples() {
        let u = vec![Prediction::UNIFORM; 5];
        let r = balanced_pu_risk(&u, &u, 0.5, BalancedPuForm::Simplified).unwrap();
        assert!(close(r.value, 0.5, 1e-15));
        assert!(balanced_pu_risk(&u, &u, 1.0, BalancedPuForm::Simplified).is_err());

        // π → 0: the simplified form becomes the balanced PN risk with U as N.
        let p = preds(&[0.2, 0.3]);
        let un = preds(&[0.7, 0.9, 0.4]);
        let tiny = balanced_pu_risk(&p, &un, 1e-14, BalancedPuForm::Simplified).unwrap();
        let pn = pn_risk(&p, &un, PnWeighting::Balanced).unwrap();
        assert!(close(tiny.value, pn.value, 1e-12));
    }

    #[test]
    fn balanced_pu_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let np = rng.random_range(1..30);
            let nu = rng.random_range(1..30);
            let p: Vec<Prediction> = (0..np).map(|_| pred(rng.random())).collect();
            let u: Vec<Prediction> = (0..nu).map(|_| pred(rng.random())).collect();
            let pi = rng.random_range(0.01..0.99);
            let a = balanced_pu_risk(&p, &u, pi, BalancedPuForm::ThreeTerm).unwrap();
            let b = balanced_pu_risk(&p, &u, pi, BalancedPuForm::Simplified).unwrap();
            assert!(close(a.value, b.value, 1e-12), "{} vs {}", a.value, b.value);
        }
    }

    #[test]
    fn attention_weight_examples() {
        let w = attention_weights(&[pred(0.3); 3]);
        for x in &w {
            assert!(close(*x, 1.0 / 3.0, 1e-15));
        }
        let w = attention_weights(&preds(&[0.0, 1.0]));
        let e = std::f64::consts::E;
        assert!(close(w[0], 1.0 / (1.0 + e), 1e-15));
        assert!(close(w[1], e / (1.0 + e), 1e-15));
        assert!(close(w[0], 0.2689414213699951, 1e-15));
    }

    #[test]
    fn bfgpu_examples() {
        let uni = vec![vec![Prediction::UNIFORM; 2]];
        assert!(close(bfgpu_risk(&uni, &uni).unwrap().value, 0.25, 1e-15));

        // One dominant instance in a negative bag of length l.
        let l = 5;
        let mut bag = vec![pred(0.0); l];
        bag[2] = pred(1.0);
        let w = attention_weights(&bag);
        let e = std::f64::consts::E;
        assert!(close(w[2], e / (e + (l - 1) as f64), 1e-15));

        assert!(matches!(bfgpu_risk(&[], &uni), Err(Error::Grouping(_))));
        assert!(matches!(bfgpu_risk(&[vec![]], &uni), Err(Error::Grouping(_))));
    }

    #[test]
    fn bfgpu_reduces_to_balanced_pn_for_singleton_bags() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<Prediction> = (0..7).map(|_| pred(rng.random())).collect();
        let u: Vec<Prediction> = (0..4).map(|_| pred(rng.random())).collect();
        let pos: Vec<Vec<Prediction>> = p.iter().map(|&x| vec![x]).collect();
        let neg: Vec<Vec<Prediction>> = u.iter().map(|&x| vec![x]).collect();
        let bf = bfgpu_risk(&pos, &neg).unwrap().value;
        let pn = pn_risk(&p, &u, PnWeighting::Balanced).unwrap().value;
        assert!(close(bf, pn, 1e-15));
        let pi = 0.8;
        let eq6 = balanced_pu_risk(&p, &u, pi, BalancedPuForm::Simplified).unwrap().value;
        assert!(close(bf, (1.0 - pi) * eq6 + pi / 2.0, 1e-14));
    }

    #[test]
    fn pseudo_examples() {
        assert_eq!(pseudo_loss(&[(pred(0.0), Label::Normal), (pred(1.0), Label::Anomalous)]), 0.0);
        assert_eq!(pseudo_loss(&[(Prediction::UNIFORM, Label::Normal)]), 0.5);
        assert_eq!(pseudo_loss(&[(Prediction::UNIFORM, Label::Anomalous)]), 0.5);
        let v = pseudo_loss(&[
            (Prediction { g_neg: 0.2, g_pos: 0.8 }, Label::Normal),
            (Prediction { g_neg: 0.9, g_pos: 0.1 }, Label::Anomalous),
        ]);
        assert!(close(v, 0.3, 1e-15));
    }

    #[test]
    fn objective_rejects_mismatched_layouts() {
        let p = vec![Prediction::UNIFORM; 3];
        assert!(Objective::Pseudo.evaluate(&p, &BatchLayout::flat(2, 1)).is_err());
        assert!(Objective::Bfgpu.evaluate(&p, &BatchLayout::Labeled(vec![Label::Normal; 3])).is_err());
        assert!(Objective::Bfgpu.evaluate(&p, &BatchLayout::flat(2, 2)).is_err());
    }

    fn arb_preds(max: usize) -> impl Strategy<Value = Vec<Prediction>> {
        proptest::collection::vec(0.0f64..=1.0, 1..max).prop_map(|v| preds(&v))
    }

    proptest! {
        #[test]
        fn symmetric_condition_is_exact(g in 0.0f64..=1.0) {
            let p = pred(g);
            prop_assert_eq!(surrogate(p, Label::Normal) + surrogate(p, Label::Anomalous), 1.0);
        }

        #[test]
        fn attention_weights_normalise(bag in arb_preds(40)) {
            let w = attention_weights(&bag);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn attention_is_permutation_equivariant(bag in arb_preds(20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..bag.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Prediction> = idx.iter().map(|&i| bag[i]).collect();
            let w = attention_weights(&bag);
            let wp = attention_weights(&permuted);
            for (k, &i) in idx.iter().enumerate() {
                prop_assert!((wp[k] - w[i]).abs() < 1e-15);
            }
        }

        #[test]
        fn balanced_forms_agree_everywhere(p in arb_preds(30), u in arb_preds(30), pi in 0.001f64..0.999) {
            let a = balanced_pu_risk(&p, &u, pi, BalancedPuForm::ThreeTerm).unwrap();
            let b = balanced_pu_risk(&p, &u, pi, BalancedPuForm::Simplified).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12 * (1.0 + 1.0 / (1.0 - pi)));
        }

        #[test]
        fn nnpu_dominates_upu(p in arb_preds(20), u in arb_preds(20), pi in 0.01f64..0.99) {
            let a = upu_risk(&p, &u, pi).unwrap();
            let b = nnpu_risk(&p, &u, pi).unwrap();
            prop_assert!(b.value >= a.value);
            prop_assert!(b.value >= b.positive_term);
            if a.unlabeled_term + a.correction_term >= 0.0 {
                prop_assert!((a.value - b.value).abs() < 1e-15);
            }
        }

        #[test]
        fn breakdown_sums_to_value(p in arb_preds(20), u in arb_preds(20), pi in 0.01f64..0.99) {
            for est in [
                upu_risk(&p, &u, pi).unwrap(),
                nnpu_risk(&p, &u, pi).unwrap(),
                balanced_pu_risk(&p, &u, pi, BalancedPuForm::ThreeTerm).unwrap(),
                pn_risk(&p, &u, PnWeighting::Prior(pi)).unwrap(),
            ] {
                let sum = est.positive_term + est.unlabeled_term + est.correction_term;
                prop_assert!((sum - est.value).abs() < 1e-14);
            }
        }

        // Each term is linear in the per-instance loss values it averages.
        #[test]
        fn terms_scale_with_losses(p in arb_preds(20), u in arb_preds(20), pi in 0.01f64..0.99, c in 0.0f64..1.0) {
            let scale = |v: &[Prediction]| v.iter().map(|x| pred(c * x.g_neg)).collect::<Vec<_>>();
            let a = upu_risk(&p, &u, pi).unwrap();
            let b = upu_risk(&scale(&p), &u, pi).unwrap();
            prop_assert!((b.positive_term - c * a.positive_term).abs() < 1e-12);
            let a = balanced_pu_risk(&p, &u, pi, BalancedPuForm::Simplified).unwrap();
            let b = balanced_pu_risk(&scale(&p), &u, pi, BalancedPuForm::Simplified).unwrap();
            prop_assert!((b.positive_term - c * a.positive_term).abs() < 1e-12);
        }
    }
}
