//! Two-logit classifier `g: ℝ^d → (g₋₁, g₊₁)` with hand-written
//! backpropagation, an Adam optimizer with cosine learning-rate decay, and a
//! central-difference gradient checker.
//!
//! Architecture is `d → h → 2` with `tanh` hidden units, or a plain affine
//! `d → 2` map when `hidden == 0`. Parameters live in one flat vector:
//! `W1 (h×d, row-major) | b1 (h) | W2 (2×h) | b2 (2)`; row 0 of the output
//! layer is the anomalous logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BatchLayout, Objective, Prediction, RiskEstimate};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: usize) -> Self {
        Architecture { input_dim, hidden }
    }

    pub fn n_params(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden);
        if h == 0 {
            2 * d + 2
        } else {
            h * d + h + 2 * h + 2
        }
    }

    /// Width feeding the output layer.
    fn out_in(&self) -> usize {
        if self.hidden == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, h) = (self.input_dim, self.hidden);
        if h == 0 {
            vec![("w", vec![2, d]), ("b", vec![2])]
        } else {
            vec![("w1", vec![h, d]), ("b1", vec![h]), ("w2", vec![2, h]), ("b2", vec![2])]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    params: Vec<f64>,
}

/// Per-instance activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Vec<Vec<f64>>,
    pub predictions: Vec<Prediction>,
}

/// Loss value and gradient for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    pub estimate: RiskEstimate,
    pub gradient: Vec<f64>,
}

/// Instances plus the layout the objective needs to interpret them.
#[derive(Debug, Clone)]
pub struct InstanceBatch<'a> {
    pub features: Vec<&'a [f64]>,
    pub layout: BatchLayout,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Classifier {
    /// Hidden layer drawn from `U(-1/√d, 1/√d)`; output layer zero so every
    /// input starts at `(0.5, 0.5)`.
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let mut params = vec![0.0; arch.n_params()];
        if arch.hidden > 0 {
            let bound = 1.0 / (arch.input_dim as f64).sqrt();
            let n_first = arch.hidden * arch.input_dim + arch.hidden;
            for p in &mut params[..n_first] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Classifier { arch, params }
    }

    /// Every layer drawn from a fan-in uniform, including the output layer.
    pub fn random<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let mut c = Classifier::new(arch, rng);
        let bound = 1.0 / (arch.out_in() as f64).sqrt();
        let start = c.output_offset();
        for p in &mut c.params[start..] {
            *p = rng.random_range(-bound..bound);
        }
        c
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.n_params() {
            return Err(Error::Shape { expected: arch.n_params(), actual: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Schema("non-finite parameter".into()));
        }
        Ok(Classifier { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn output_offset(&self) -> usize {
        let (d, h) = (self.arch.input_dim, self.arch.hidden);
        if h == 0 {
            0
        } else {
            h * d + h
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::Shape { expected: self.arch.input_dim, actual: x.len() });
        }
        Ok(())
    }

    /// Returns hidden activations (empty for the linear model) and the logit
    /// difference `z₋₁ - z₊₁`.
    fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let (d, h) = (self.arch.input_dim, self.arch.hidden);
        let hidden: Vec<f64> = if h == 0 {
            Vec::new()
        } else {
            let (w1, rest) = self.params.split_at(h * d);
            let b1 = &rest[..h];
            let a: Vec<f64> = (0..h)
                .map(|k| {
                    let pre: f64 = w1[k * d..(k + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[k];
                    pre.tanh()
                })
                .collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { layer: 0 });
            }
            a
        };
        let input: &[f64] = if h == 0 { x } else { &hidden };
        let n = input.len();
        let out = &self.params[self.output_offset()..];
        let (w2, b2) = out.split_at(2 * n);
        let z_neg: f64 = w2[..n].iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + b2[0];
        let z_pos: f64 = w2[n..].iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + b2[1];
        let diff = z_neg - z_pos;
        if !diff.is_finite() {
            return Err(Error::Numeric { layer: if h == 0 { 0 } else { 1 } });
        }
        Ok((hidden, diff))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        let (_, diff) = self.forward_one(x)?;
        Ok(Prediction::from_anomaly_prob(sigmoid(diff)))
    }

    /// Anomaly probability `g₋₁` for each input.
    pub fn scores<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
        xs.into_iter().map(|x| self.forward(x).map(|p| p.g_neg)).collect()
    }

    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<ForwardCache> {
        let mut hidden = Vec::with_capacity(xs.len());
        let mut predictions = Vec::with_capacity(xs.len());
        for x in xs {
            let (a, diff) = self.forward_one(x)?;
            hidden.push(a);
            predictions.push(Prediction::from_anomaly_prob(sigmoid(diff)));
        }
        Ok(ForwardCache { hidden, predictions })
    }

    /// Gradient of `Σᵢ upstream[i] · g₋₁(xᵢ)` with respect to the parameters.
    pub fn backward_from_scores(&self, xs: &[&[f64]], cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != xs.len() || cache.predictions.len() != xs.len() {
            return Err(Error::invalid_input("batch, cache and upstream gradient lengths differ"));
        }
        let (d, h) = (self.arch.input_dim, self.arch.hidden);
        let mut grad = vec![0.0; self.params.len()];
        let off = self.output_offset();
        let n = self.arch.out_in();
        for ((x, a), (&pred, &up)) in xs.iter().zip(&cache.hidden).zip(cache.predictions.iter().zip(upstream)) {
            if up == 0.0 {
                continue;
            }
            // ∂g₋₁/∂z₋₁ = g₋₁·g₊₁ = -∂g₋₁/∂z₊₁
            let dz = up * pred.g_neg * pred.g_pos;
            let input: &[f64] = if h == 0 { x } else { a };
            for k in 0..n {
                grad[off + k] += dz * input[k];
                grad[off + n + k] -= dz * input[k];
            }
            grad[off + 2 * n] += dz;
            grad[off + 2 * n + 1] -= dz;
            if h > 0 {
                let w2 = &self.params[off..off + 2 * n];
                for k in 0..h {
                    let da = (w2[k] - w2[n + k]) * dz;
                    let dpre = da * (1.0 - a[k] * a[k]);
                    if dpre == 0.0 {
                        continue;
                    }
                    let row = &mut grad[k * d..(k + 1) * d];
                    for (g, v) in row.iter_mut().zip(x.iter()) {
                        *g += dpre * v;
                    }
                    grad[h * d + k] += dpre;
                }
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            let layer = if h > 0 && i < off {
                0
            } else if h > 0 {
                1
            } else {
                0
            };
            return Err(Error::Numeric { layer });
        }
        Ok(grad)
    }

    /// Loss and parameter gradient of `scale · objective` on a batch.
    pub fn backward(&self, batch: &InstanceBatch<'_>, objective: &Objective, scale: f64) -> Result<BatchGrad> {
        let cache = self.forward_batch(&batch.features)?;
        let (estimate, dscore) = objective.evaluate_scaled(&cache.predictions, &batch.layout, scale)?;
        let gradient = self.backward_from_scores(&batch.features, &cache, &dscore)?;
        Ok(BatchGrad { loss: estimate.value, estimate, gradient })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut start = 0;
        for (name, shape) in self.arch.tensor_shapes() {
            let len: usize = shape.iter().product();
            tensors.push(Tensor { name: name.to_string(), shape, data: self.params[start..start + len].to_vec() });
            start += len;
        }
        Checkpoint {
            architecture: ArchitectureDescriptor {
                input_dim: self.arch.input_dim,
                hidden: self.arch.hidden,
                activation: "tanh".into(),
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = Architecture::new(ckpt.architecture.input_dim, ckpt.architecture.hidden);
        let expected = arch.tensor_shapes();
        if expected.len() != ckpt.tensors.len() {
            return Err(Error::Schema("checkpoint tensor count does not match architecture".into()));
        }
        let mut params = Vec::with_capacity(arch.n_params());
        for ((name, shape), t) in expected.iter().zip(&ckpt.tensors) {
            if t.name != *name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Schema(format!("checkpoint tensor {} has unexpected shape", t.name)));
            }
            params.extend_from_slice(&t.data);
        }
        Classifier::from_params(arch, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub input_dim: usize,
    pub hidden: usize,
    pub activation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializable model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: ArchitectureDescriptor,
    pub tensors: Vec<Tensor>,
}

/// Adam with bias correction and a cosine-annealed step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Length of the cosine schedule, in calls to [`Adam::step`].
    pub total_steps: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Updates applied (drives bias correction).
    t: u64,
    /// Calls to `step`, including skipped zero-gradient calls (drives the schedule).
    calls: usize,
}

pub const DEFAULT_LR: f64 = 1e-5;

impl Adam {
    pub fn new(n_params: usize, base_lr: f64, total_steps: usize) -> Self {
        Adam {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: total_steps.max(1),
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            calls: 0,
        }
    }

    /// Learning rate used by the `k`-th call (zero-based).
    pub fn lr_at(&self, k: usize) -> f64 {
        let frac = k.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn steps_taken(&self) -> usize {
        self.calls
    }

    /// One update. An all-zero gradient leaves parameters and moments untouched.
    pub fn step_params(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape { expected: self.m.len(), actual: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid_input("non-finite gradient"));
        }
        let lr = self.lr_at(self.calls);
        self.calls += 1;
        if grad.iter().all(|&g| g == 0.0) {
            return Ok(());
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let m: Vec<f64> = self.m.iter().zip(grad).map(|(m, g)| self.beta1 * m + (1.0 - self.beta1) * g).collect();
        let v: Vec<f64> = self.v.iter().zip(grad).map(|(v, g)| self.beta2 * v + (1.0 - self.beta2) * g * g).collect();
        if v.iter().any(|x| !x.is_finite()) {
            // A squared gradient overflowed; every later update would be zero.
            return Err(Error::invalid_input("optimizer second moment overflowed"));
        }
        for (i, p) in params.iter_mut().enumerate() {
            *p -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
        }
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step(&mut self, classifier: &mut Classifier, grad: &[f64]) -> Result<()> {
        self.step_params(classifier.params_mut(), grad)
    }
}

/// Largest relative discrepancy between `analytic` and a central-difference
/// estimate of `∇loss`. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`, so
/// components that are zero to rounding are compared absolutely. A length
/// mismatch yields infinity.
pub fn gradient_check(classifier: &Classifier, loss: impl Fn(&Classifier) -> f64, analytic: &[f64], step: f64) -> f64 {
    if analytic.len() != classifier.params.len() {
        return f64::INFINITY;
    }
    let mut probe = classifier.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + step;
        let up = loss(&probe);
        probe.params[i] = orig - step;
        let down = loss(&probe);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::losses::{pseudo_loss, PnWeighting};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_points(n: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn zero_output_layer_gives_uniform() {
        let mut r = rng(0);
        let c = Classifier::new(Architecture::new(3, 8), &mut r);
        for x in random_points(10, 3, &mut r) {
            assert_eq!(c.forward(&x).unwrap(), Prediction::UNIFORM);
        }
    }

    #[test]
    fn outputs_are_normalised() {
        let mut r = rng(1);
        let c = Classifier::random(Architecture::new(4, 16), &mut r);
        for x in random_points(100, 4, &mut r) {
            let p = c.forward(&x).unwrap();
            assert!((p.g_neg + p.g_pos - 1.0).abs() <= 1e-12);
            assert!((0.0..=1.0).contains(&p.g_neg));
        }
    }

    #[test]
    fn raising_the_anomalous_logit_raises_g_neg() {
        let mut r = rng(2);
        let mut c = Classifier::random(Architecture::new(2, 4), &mut r);
        let x = [0.3, -0.7];
        let before = c.forward(&x).unwrap().g_neg;
        let b_neg = c.output_offset() + 2 * 4;
        c.params[b_neg] += 0.5;
        assert!(c.forward(&x).unwrap().g_neg > before);
    }

    #[test]
    fn dimension_mismatch() {
        let c = Classifier::new(Architecture::new(3, 4), &mut rng(0));
        assert!(matches!(c.forward(&[1.0]), Err(Error::Shape { expected: 3, actual: 1 })));
    }

    #[test]
    fn overflowing_input_reports_layer() {
        let mut c = Classifier::random(Architecture::new(1, 0), &mut rng(0));
        c.params[0] = f64::MAX;
        c.params[1] = -f64::MAX;
        assert!(matches!(c.forward(&[f64::MAX]), Err(Error::Numeric { layer: 0 })));
    }

    #[test]
    fn zero_scale_gives_zero_gradient() {
        let mut r = rng(3);
        let c = Classifier::random(Architecture::new(2, 4), &mut r);
        let pts = random_points(6, 2, &mut r);
        let batch = InstanceBatch {
            features: pts.iter().map(Vec::as_slice).collect(),
            layout: BatchLayout::Bags { positive: vec![3], unlabeled: vec![3] },
        };
        let g = c.backward(&batch, &Objective::Bfgpu, 0.0).unwrap();
        assert!(g.gradient.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pseudo_gradient_matches_linear_formula() {
        // Linear model: g₋₁ = σ(w₋·x + b₋ - w₊·x - b₊). For label +1 the loss is
        // g₋₁, so ∂/∂w₋ = g₋₁g₊₁·x, ∂/∂w₊ = -g₋₁g₊₁·x, ∂/∂b₋ = g₋₁g₊₁, ∂/∂b₊ = -g₋₁g₊₁.
        // For label -1 the loss is 1 - g₋₁ and every sign flips.
        let mut r = rng(4);
        let c = Classifier::random(Architecture::new(3, 0), &mut r);
        let x = vec![0.5, -1.0, 2.0];
        for (label, sign) in [(Label::Normal, 1.0), (Label::Anomalous, -1.0)] {
            let batch = InstanceBatch { features: vec![&x], layout: BatchLayout::Labeled(vec![label]) };
            let g = c.backward(&batch, &Objective::Pseudo, 1.0).unwrap();
            let p = c.forward(&x).unwrap();
            assert_eq!(g.loss, pseudo_loss(&[(p, label)]));
            let s = sign * p.g_neg * p.g_pos;
            let mut expected = Vec::new();
            expected.extend(x.iter().map(|v| s * v));
            expected.extend(x.iter().map(|v| -s * v));
            expected.extend([s, -s]);
            for (a, e) in g.gradient.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-15, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn finite_difference_agrees_on_pn() {
        let mut r = rng(5);
        let c = Classifier::random(Architecture::new(2, 4), &mut r);
        let pts = random_points(8, 2, &mut r);
        let batch =
            InstanceBatch { features: pts.iter().map(Vec::as_slice).collect(), layout: BatchLayout::flat(4, 4) };
        let obj = Objective::Pn(PnWeighting::Balanced);
        let g = c.backward(&batch, &obj, 1.0).unwrap();
        let err = gradient_check(&c, |m| m.backward(&batch, &obj, 1.0).unwrap().loss, &g.gradient, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_rejects_overflowing_moment() {
        let mut params = vec![1.0, 2.0];
        let mut opt = Adam::new(2, 1e-3, 10);
        assert!(opt.step_params(&mut params, &[f64::MAX, 0.0]).is_err());
        assert_eq!(params, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut r = rng(6);
        let mut c = Classifier::random(Architecture::new(2, 4), &mut r);
        let before = c.clone();
        let mut opt = Adam::new(c.params.len(), 1e-3, 10);
        opt.step(&mut c, &vec![0.0; before.params.len()]).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![0.3, -1.2, 4.0];
        let start = params.clone();
        let mut opt = Adam::new(3, 1e-3, 100);
        opt.step_params(&mut params, &[1.0, 1.0, 1.0]).unwrap();
        // m̂ = v̂ = 1 at t = 1, so the step is lr / (1 + ε).
        let expected = 1e-3 / (1.0 + 1e-8);
        for (p, s) in params.iter().zip(&start) {
            assert!((s - p - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_schedule_decays() {
        let opt = Adam::new(1, 1e-3, 100);
        assert_eq!(opt.lr_at(0), 1e-3);
        assert!((opt.lr_at(50) - 5e-4).abs() < 1e-15);
        assert!(opt.lr_at(99) <= 1e-3 * 1e-3);
        assert_eq!(opt.lr_at(100), 0.0);
        let lrs: Vec<f64> = (0..=100).map(|k| opt.lr_at(k)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Classifier::random(Architecture::new(3, 5), &mut rng(7));
        let json = serde_json::to_string(&c.checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(Classifier::from_checkpoint(&back).unwrap(), c);

        let mut bad = c.checkpoint();
        bad.tensors[0].shape = vec![5, 2];
        assert!(Classifier::from_checkpoint(&bad).is_err());
    }
}
