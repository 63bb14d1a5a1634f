//! Training pipelines: the BFGPU procedure (attention-weighted balanced PU
//! stage, per-bag pseudo-label stage, adjusted decision threshold) and the
//! comparison methods trained on the same data and seed.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split, Bag, Dataset, InstanceRef, Label, MicroSplit};
use crate::error::{Error, Result};
use crate::losses::{pn_risk_with_grad, BalancedPuForm, BatchLayout, Objective, PnWeighting, Prediction};
use crate::model::{Adam, Architecture, Checkpoint, Classifier, InstanceBatch, DEFAULT_HIDDEN, DEFAULT_LR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bfgpu,
    Upu,
    Nnpu,
    #[serde(rename = "balancedpu")]
    BalancedPu,
    MilMax,
    MilTopk,
    MilAttention,
    MacroSupervised,
    MacroUnder,
    MacroOver,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Bfgpu,
        Method::Upu,
        Method::Nnpu,
        Method::BalancedPu,
        Method::MilMax,
        Method::MilTopk,
        Method::MilAttention,
        Method::MacroSupervised,
        Method::MacroUnder,
        Method::MacroOver,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bfgpu => "bfgpu",
            Method::Upu => "upu",
            Method::Nnpu => "nnpu",
            Method::BalancedPu => "balancedpu",
            Method::MilMax => "mil_max",
            Method::MilTopk => "mil_topk",
            Method::MilAttention => "mil_attention",
            Method::MacroSupervised => "macro_supervised",
            Method::MacroUnder => "macro_under",
            Method::MacroOver => "macro_over",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid_config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda_bfgpu: f64,
    pub lambda_pse: f64,
    pub epochs: usize,
    /// Bags per side in each batch.
    pub batch_bags: usize,
    pub lr: f64,
    pub seed: u64,
    /// Class prior `π` of the normal class.
    pub prior: f64,
    pub topk: usize,
    pub hidden: usize,
    /// Calibrate the threshold from the prior instead of using 0.5.
    pub adt: bool,
}

impl TrainConfig {
    /// Defaults: `λ_bfgpu = 1/π`, `λ_pse = 1`, 5 epochs, 16 bags per batch,
    /// `k = 3`, ADT on for BFGPU only.
    pub fn new(method: Method, prior: f64) -> Self {
        TrainConfig {
            method,
            lambda_bfgpu: 1.0 / prior,
            lambda_pse: 1.0,
            epochs: 5,
            batch_bags: 16,
            lr: DEFAULT_LR,
            seed: 0,
            prior,
            topk: 3,
            hidden: DEFAULT_HIDDEN,
            adt: method == Method::Bfgpu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64, name: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid_config(format!("{name} must be finite and >= 0")))
            }
        };
        nonneg(self.lambda_bfgpu, "lambda_bfgpu")?;
        nonneg(self.lambda_pse, "lambda_pse")?;
        nonneg(self.lr, "lr")?;
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::invalid_config(format!("prior must lie in (0, 1), got {}", self.prior)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid_config("epochs must be >= 1"));
        }
        if self.batch_bags == 0 {
            return Err(Error::invalid_config("batch_bags must be >= 1"));
        }
        if self.topk == 0 {
            return Err(Error::invalid_config("topk must be >= 1"));
        }
        Ok(())
    }
}

/// How a trained model turns a bag into one anomaly score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BagScoring {
    /// Largest instance `g₋₁`.
    MaxInstance,
    /// Mean of the `k` largest instance scores.
    TopK { k: usize },
    /// Attention-weighted mean of instance scores; weights are a softmax of
    /// `w · x` over the bag.
    Attention { weights: Vec<f64> },
    /// `g₋₁` of the bag's mean feature vector.
    MeanFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Bfgpu,
    Pseudo,
    Supervised,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Bfgpu => "bfgpu",
            Stage::Pseudo => "pseudo",
            Stage::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub classifier: Classifier,
    pub threshold: f64,
    pub scoring: BagScoring,
    pub config: TrainConfig,
    pub curve: Vec<CurvePoint>,
}

#[derive(Serialize, Deserialize)]
struct TrainedModelRecord {
    model: Checkpoint,
    threshold: f64,
    scoring: BagScoring,
    config: TrainConfig,
    curve: Vec<CurvePoint>,
}

impl TrainedModel {
    /// Instance anomaly scores `g₋₁` for one bag.
    pub fn instance_scores(&self, bag: &Bag) -> Result<Vec<f64>> {
        self.classifier.scores(bag.features())
    }

    /// Bag anomaly score under this model's scoring rule.
    pub fn bag_score(&self, bag: &Bag) -> Result<f64> {
        match &self.scoring {
            BagScoring::MeanFeatures => Ok(self.classifier.forward(&bag.mean_features())?.g_neg),
            scoring => {
                let scores = self.instance_scores(bag)?;
                Ok(pool(scoring, bag, &scores)?.0)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = TrainedModelRecord {
            model: self.classifier.checkpoint(),
            threshold: self.threshold,
            scoring: self.scoring.clone(),
            config: self.config.clone(),
            curve: self.curve.clone(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: TrainedModelRecord = serde_json::from_str(text)?;
        Self::from_record(rec)
    }

    fn from_record(rec: TrainedModelRecord) -> Result<Self> {
        if !(0.0..=1.0).contains(&rec.threshold) {
            return Err(Error::Schema(format!("threshold {} outside [0, 1]", rec.threshold)));
        }
        Ok(TrainedModel {
            classifier: Classifier::from_checkpoint(&rec.model)?,
            threshold: rec.threshold,
            scoring: rec.scoring,
            config: rec.config,
            curve: rec.curve,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rec: TrainedModelRecord = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_record(rec)
    }

    /// Training curve as CSV: `epoch,stage,mean_loss`.
    pub fn write_curve_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "stage", "mean_loss"])?;
        for p in &self.curve {
            w.write_record([p.epoch.to_string(), p.stage.name().to_string(), p.mean_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pooled bag score and `∂score/∂g₋₁(x_j)` for each instance.
fn pool(scoring: &BagScoring, bag: &Bag, scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    let l = scores.len();
    match scoring {
        BagScoring::MaxInstance => {
            let j = argmax(scores);
            let mut d = vec![0.0; l];
            d[j] = 1.0;
            Ok((scores[j], d))
        }
        BagScoring::TopK { k } => {
            let k = (*k).min(l);
            let mut order: Vec<usize> = (0..l).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut d = vec![0.0; l];
            let mut s = 0.0;
            for &j in &order[..k] {
                d[j] = 1.0 / k as f64;
                s += scores[j];
            }
            Ok((s / k as f64, d))
        }
        BagScoring::Attention { weights } => {
            let a = attention_over_features(weights, bag)?;
            let s = a.iter().zip(scores).map(|(w, g)| w * g).sum();
            Ok((s, a))
        }
        BagScoring::MeanFeatures => Err(Error::invalid_input("mean-feature scoring does not pool instances")),
    }
}

fn attention_over_features(w: &[f64], bag: &Bag) -> Result<Vec<f64>> {
    let logits: Vec<f64> = bag
        .features()
        .map(|x| {
            if x.len() != w.len() {
                return Err(Error::Shape { expected: w.len(), actual: x.len() });
            }
            Ok(x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Pseudo-labelled instances from anomalous bags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoSets {
    /// Most anomalous instance of each anomalous bag, labelled `-1`.
    pub n_pse: Vec<InstanceRef>,
    /// Most normal instance of each anomalous bag, labelled `+1`.
    pub p_pse: Vec<InstanceRef>,
}

/// For every anomalous bag, labels the instance with the largest `g₋₁` as
/// anomalous and the one with the smallest as normal. Ties go to the lowest
/// index; if both picks coincide only the anomalous label is kept.
pub fn select_pseudo(dataset: &Dataset, classifier: &Classifier) -> Result<PseudoSets> {
    let mut sets = PseudoSets::default();
    for (b, bag) in dataset.bags().iter().enumerate() {
        if bag.macro_label != Label::Anomalous {
            continue;
        }
        let scores = classifier.scores(bag.features())?;
        let (hi, lo) = (argmax(&scores), argmin(&scores));
        sets.n_pse.push(InstanceRef { bag: b, instance: hi });
        if lo != hi {
            sets.p_pse.push(InstanceRef { bag: b, instance: lo });
        }
    }
    Ok(sets)
}

/// Threshold at the `π` quantile of unlabeled anomaly scores:
/// `sort(scores)[⌊|U|·π⌋]`, clamped to the last index.
pub fn adjusted_threshold(u_scores: &[f64], prior: f64) -> Result<f64> {
    if u_scores.is_empty() {
        return Err(Error::invalid_input("no unlabeled scores"));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::invalid_config(format!("prior must lie in (0, 1), got {prior}")));
    }
    let mut sorted = u_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() as f64 * prior).floor() as usize).min(sorted.len() - 1);
    Ok(sorted[idx])
}

/// Batches for one epoch. The longer list is shuffled and cut into chunks of
/// `batch`; the shorter list is cycled through fresh shuffles so every batch
/// holds items from both sides.
fn epoch_batches<R: Rng>(pos: &[usize], neg: &[usize], batch: usize, rng: &mut R) -> Vec<(Vec<usize>, Vec<usize>)> {
    let swap = pos.len() < neg.len();
    let (long, short) = if swap { (neg, pos) } else { (pos, neg) };
    let mut long = long.to_vec();
    long.shuffle(rng);
    let mut cycle: Vec<usize> = Vec::new();
    let mut next = 0;
    let take = batch.min(short.len());
    let mut out = Vec::new();
    for chunk in long.chunks(batch) {
        let mut other = Vec::with_capacity(take);
        while other.len() < take {
            if next == cycle.len() {
                cycle = short.to_vec();
                cycle.shuffle(rng);
                next = 0;
            }
            other.push(cycle[next]);
            next += 1;
        }
        out.push(if swap { (other, chunk.to_vec()) } else { (chunk.to_vec(), other) });
    }
    out
}

fn n_epoch_batches(n_pos: usize, n_neg: usize, batch: usize) -> usize {
    n_pos.max(n_neg).div_ceil(batch)
}

fn bag_batch<'a>(dataset: &'a Dataset, pos: &[usize], neg: &[usize]) -> InstanceBatch<'a> {
    let bags = dataset.bags();
    let features = pos.iter().chain(neg).flat_map(|&b| bags[b].features()).collect();
    InstanceBatch {
        features,
        layout: BatchLayout::Bags {
            positive: pos.iter().map(|&b| bags[b].len()).collect(),
            unlabeled: neg.iter().map(|&b| bags[b].len()).collect(),
        },
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn fail(epoch: usize, e: Error) -> Error {
    match e {
        Error::TrainingFailure { .. } => e,
        other => Error::TrainingFailure { epoch, message: other.to_string() },
    }
}

fn check_loss(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingFailure { epoch, message: "non-finite loss".into() })
    }
}

struct Run {
    rng: ChaCha8Rng,
    classifier: Classifier,
    curve: Vec<CurvePoint>,
}

impl Run {
    fn start(dataset: &Dataset, config: &TrainConfig) -> Result<(Self, MicroSplit)> {
        config.validate()?;
        let micro = split(dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let classifier = Classifier::new(Architecture::new(dataset.dim(), config.hidden), &mut rng);
        Ok((Run { rng, classifier, curve: Vec::new() }, micro))
    }

    fn threshold(&self, dataset: &Dataset, micro: &MicroSplit, config: &TrainConfig) -> Result<f64> {
        if !config.adt {
            return Ok(0.5);
        }
        let bags = dataset.bags();
        let scores = micro
            .u_micro
            .iter()
            .map(|r| self.classifier.forward(&bags[r.bag].instances[r.instance].features).map(|p| p.g_neg))
            .collect::<Result<Vec<_>>>()?;
        adjusted_threshold(&scores, config.prior)
    }

    fn finish(self, threshold: f64, scoring: BagScoring, config: &TrainConfig) -> TrainedModel {
        TrainedModel { classifier: self.classifier, threshold, scoring, config: config.clone(), curve: self.curve }
    }
}

/// Runs the method selected in `config`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    match config.method {
        Method::Bfgpu => train_bfgpu(dataset, config),
        _ => train_baseline(dataset, config),
    }
}

/// BFGPU training: per epoch, all attention-weighted balanced PU batches,
/// then one pseudo-label selection, then all pseudo-label batches. The
/// threshold is computed once at the end.
pub fn train_bfgpu(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    if config.method != Method::Bfgpu {
        return Err(Error::invalid_config(format!("train_bfgpu called with method {}", config.method)));
    }
    let (mut run, micro) = Run::start(dataset, config)?;
    let pos_bags = micro.positive_bag_indices();
    let neg_bags = micro.negative_bag_indices();
    let b = config.batch_bags;
    let per_epoch = n_epoch_batches(pos_bags.len(), neg_bags.len(), b) + neg_bags.len().div_ceil(b);
    let mut opt = Adam::new(run.classifier.params().len(), config.lr, per_epoch * config.epochs);

    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        for (pos, neg) in epoch_batches(&pos_bags, &neg_bags, b, &mut run.rng) {
            let batch = bag_batch(dataset, &pos, &neg);
            let g =
                run.classifier.backward(&batch, &Objective::Bfgpu, config.lambda_bfgpu).map_err(|e| fail(epoch, e))?;
            check_loss(epoch, g.loss)?;
            opt.step(&mut run.classifier, &g.gradient).map_err(|e| fail(epoch, e))?;
            losses.push(g.loss);
        }
        run.curve.push(CurvePoint { epoch, stage: Stage::Bfgpu, mean_loss: mean(&losses) });

        let sets = select_pseudo(dataset, &run.classifier).map_err(|e| fail(epoch, e))?;
        let mut pairs_by_bag: Vec<Vec<(InstanceRef, Label)>> = sets
            .n_pse
            .iter()
            .map(|&r| {
                let mut v = vec![(r, Label::Anomalous)];
                if let Some(&p) = sets.p_pse.iter().find(|p| p.bag == r.bag) {
                    v.push((p, Label::Normal));
                }
                v
            })
            .collect();
        pairs_by_bag.shuffle(&mut run.rng);
        let bags = dataset.bags();
        let mut losses = Vec::new();
        for chunk in pairs_by_bag.chunks(b) {
            let pairs: Vec<(InstanceRef, Label)> = chunk.iter().flatten().copied().collect();
            let batch = InstanceBatch {
                features: pairs.iter().map(|(r, _)| bags[r.bag].instances[r.instance].features.as_slice()).collect(),
                layout: BatchLayout::Labeled(pairs.iter().map(|&(_, y)| y).collect()),
            };
            let g =
                run.classifier.backward(&batch, &Objective::Pseudo, config.lambda_pse).map_err(|e| fail(epoch, e))?;
            check_loss(epoch, g.loss)?;
            opt.step(&mut run.classifier, &g.gradient).map_err(|e| fail(epoch, e))?;
            losses.push(g.loss);
        }
        run.curve.push(CurvePoint { epoch, stage: Stage::Pseudo, mean_loss: mean(&losses) });
    }

    let threshold = run.threshold(dataset, &micro, config)?;
    Ok(run.finish(threshold, BagScoring::MaxInstance, config))
}

/// Comparison methods:
///
/// * `upu`, `nnpu`, `balancedpu`: the named PU risk on flattened instances
///   (normal-bag instances as `P`, anomalous-bag instances as `U`).
/// * `mil_max`, `mil_topk`, `mil_attention`: pool instance scores per bag
///   and minimise the balanced PN risk on bag labels.
/// * `macro_supervised`, `macro_under`, `macro_over`: classify mean-pooled bag
///   features with the balanced PN risk, optionally after under- or
///   over-sampling bags to equal class counts each epoch.
pub fn train_baseline(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    match config.method {
        Method::Bfgpu => Err(Error::invalid_config("bfgpu is not a baseline")),
        Method::Upu | Method::Nnpu | Method::BalancedPu => train_micro_pu(dataset, config),
        Method::MilMax | Method::MilTopk | Method::MilAttention => train_mil(dataset, config),
        Method::MacroSupervised | Method::MacroUnder | Method::MacroOver => train_macro(dataset, config),
    }
}

fn train_micro_pu(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    let objective = match config.method {
        Method::Upu => Objective::Upu { prior: config.prior },
        Method::Nnpu => Objective::Nnpu { prior: config.prior },
        Method::BalancedPu => Objective::BalancedPu { prior: config.prior, form: BalancedPuForm::ThreeTerm },
        other => return Err(Error::invalid_config(format!("{other} is not a micro PU method"))),
    };
    let (mut run, micro) = Run::start(dataset, config)?;
    let pos_bags = micro.positive_bag_indices();
    let neg_bags = micro.negative_bag_indices();
    let b = config.batch_bags;
    let steps = n_epoch_batches(pos_bags.len(), neg_bags.len(), b) * config.epochs;
    let mut opt = Adam::new(run.classifier.params().len(), config.lr, steps);
    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        for (pos, neg) in epoch_batches(&pos_bags, &neg_bags, b, &mut run.rng) {
            let batch = bag_batch(dataset, &pos, &neg);
            let g = run.classifier.backward(&batch, &objective, 1.0).map_err(|e| fail(epoch, e))?;
            check_loss(epoch, g.loss)?;
            opt.step(&mut run.classifier, &g.gradient).map_err(|e| fail(epoch, e))?;
            losses.push(g.loss);
        }
        run.curve.push(CurvePoint { epoch, stage: Stage::Supervised, mean_loss: mean(&losses) });
    }
    let threshold = run.threshold(dataset, &micro, config)?;
    Ok(run.finish(threshold, BagScoring::MaxInstance, config))
}

fn train_mil(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    let (mut run, micro) = Run::start(dataset, config)?;
    let mut scoring = match config.method {
        Method::MilMax => BagScoring::MaxInstance,
        Method::MilTopk => BagScoring::TopK { k: config.topk },
        Method::MilAttention => BagScoring::Attention { weights: vec![0.0; dataset.dim()] },
        other => return Err(Error::invalid_config(format!("{other} is not a MIL method"))),
    };
    let pos_bags = micro.positive_bag_indices();
    let neg_bags = micro.negative_bag_indices();
    let b = config.batch_bags;
    let steps = n_epoch_batches(pos_bags.len(), neg_bags.len(), b) * config.epochs;
    let mut opt = Adam::new(run.classifier.params().len(), config.lr, steps);
    let mut att_opt = Adam::new(dataset.dim(), config.lr, steps);
    let bags = dataset.bags();

    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        for (pos, neg) in epoch_batches(&pos_bags, &neg_bags, b, &mut run.rng) {
            let batch = bag_batch(dataset, &pos, &neg);
            let cache = run.classifier.forward_batch(&batch.features).map_err(|e| fail(epoch, e))?;
            let scores: Vec<f64> = cache.predictions.iter().map(|p| p.g_neg).collect();

            let mut pooled = Vec::with_capacity(pos.len() + neg.len());
            let mut start = 0;
            for &bi in pos.iter().chain(&neg) {
                let l = bags[bi].len();
                let (s, d) = pool(&scoring, &bags[bi], &scores[start..start + l]).map_err(|e| fail(epoch, e))?;
                pooled.push((s, d, start));
                start += l;
            }
            let bag_preds: Vec<Prediction> = pooled.iter().map(|(s, _, _)| Prediction::from_anomaly_prob(*s)).collect();
            let (p, n) = bag_preds.split_at(pos.len());
            let (est, dbag) = pn_risk_with_grad(p, n, PnWeighting::Balanced).map_err(|e| fail(epoch, e))?;
            check_loss(epoch, est.value)?;
            let dbag: Vec<f64> = dbag.positive.into_iter().chain(dbag.unlabeled).collect();

            let mut upstream = vec![0.0; scores.len()];
            for ((_, d, start), &ds) in pooled.iter().zip(&dbag) {
                for (j, dj) in d.iter().enumerate() {
                    upstream[start + j] += ds * dj;
                }
            }
            let grad =
                run.classifier.backward_from_scores(&batch.features, &cache, &upstream).map_err(|e| fail(epoch, e))?;
            opt.step(&mut run.classifier, &grad).map_err(|e| fail(epoch, e))?;

            if let BagScoring::Attention { weights } = &mut scoring {
                // ∂s/∂w = Σ_j a_j (g_j - s) x_j for s = Σ_j a_j g_j, a = softmax(w·x).
                let mut gw = vec![0.0; weights.len()];
                for ((s, a, start), (&bi, &ds)) in pooled.iter().zip(pos.iter().chain(&neg).zip(&dbag)) {
                    for (j, x) in bags[bi].features().enumerate() {
                        let c = ds * a[j] * (scores[start + j] - s);
                        for (g, v) in gw.iter_mut().zip(x) {
                            *g += c * v;
                        }
                    }
                }
                att_opt.step_params(weights, &gw).map_err(|e| fail(epoch, e))?;
            }
            losses.push(est.value);
        }
        run.curve.push(CurvePoint { epoch, stage: Stage::Supervised, mean_loss: mean(&losses) });
    }
    let threshold = run.threshold(dataset, &micro, config)?;
    Ok(run.finish(threshold, scoring, config))
}

/// Bag index lists for one epoch of macro training, rebalanced as the method
/// requires.
fn rebalance<R: Rng>(method: Method, pos: &[usize], neg: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let (major, minor, swapped) = if pos.len() >= neg.len() { (pos, neg, false) } else { (neg, pos, true) };
    let (major, minor) = match method {
        Method::MacroUnder => {
            let picked = index::sample(rng, major.len(), minor.len());
            let mut idx: Vec<usize> = picked.into_iter().collect();
            idx.sort_unstable();
            (idx.into_iter().map(|i| major[i]).collect(), minor.to_vec())
        }
        Method::MacroOver => {
            let mut grown = minor.to_vec();
            while grown.len() < major.len() {
                grown.push(minor[rng.random_range(0..minor.len())]);
            }
            (major.to_vec(), grown)
        }
        _ => (major.to_vec(), minor.to_vec()),
    };
    if swapped {
        (minor, major)
    } else {
        (major, minor)
    }
}

fn train_macro(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    let (mut run, micro) = Run::start(dataset, config)?;
    let means: Vec<Vec<f64>> = dataset.bags().iter().map(Bag::mean_features).collect();
    let pos_bags = micro.positive_bag_indices();
    let neg_bags = micro.negative_bag_indices();
    let b = config.batch_bags;
    let epoch_len = |(p, n): (usize, usize)| n_epoch_batches(p, n, b);
    let balanced_len = match config.method {
        Method::MacroUnder => pos_bags.len().min(neg_bags.len()),
        Method::MacroOver => pos_bags.len().max(neg_bags.len()),
        _ => 0,
    };
    let steps = if balanced_len > 0 {
        epoch_len((balanced_len, balanced_len))
    } else {
        epoch_len((pos_bags.len(), neg_bags.len()))
    } * config.epochs;
    let mut opt = Adam::new(run.classifier.params().len(), config.lr, steps);
    let objective = Objective::Pn(PnWeighting::Balanced);

    for epoch in 1..=config.epochs {
        let (pos, neg) = rebalance(config.method, &pos_bags, &neg_bags, &mut run.rng);
        let mut losses = Vec::new();
        for (p, n) in epoch_batches(&pos, &neg, b, &mut run.rng) {
            let batch = InstanceBatch {
                features: p.iter().chain(&n).map(|&i| means[i].as_slice()).collect(),
                layout: BatchLayout::flat(p.len(), n.len()),
            };
            let g = run.classifier.backward(&batch, &objective, 1.0).map_err(|e| fail(epoch, e))?;
            check_loss(epoch, g.loss)?;
            opt.step(&mut run.classifier, &g.gradient).map_err(|e| fail(epoch, e))?;
            losses.push(g.loss);
        }
        run.curve.push(CurvePoint { epoch, stage: Stage::Supervised, mean_loss: mean(&losses) });
    }
    let threshold = run.threshold(dataset, &micro, config)?;
    Ok(run.finish(threshold, BagScoring::MeanFeatures, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthConfig};
    use crate::dataset::{ImbalanceSpec, Instance};
    use crate::model::Architecture;

    fn linear_scorer(weight: f64) -> Classifier {
        // 1-D linear model with g₋₁ = σ(weight · x).
        Classifier::from_params(Architecture::new(1, 0), vec![weight, 0.0, 0.0, 0.0]).unwrap()
    }

    fn scalar_bag(id: &str, xs: &[f64], label: Label) -> Bag {
        Bag::new(id, xs.iter().map(|&x| Instance::new(vec![x])).collect(), label).unwrap()
    }

    fn small_data(seed: u64) -> Dataset {
        let mut cfg = SynthConfig::new(ImbalanceSpec::new(3, 1.0).unwrap(), 6, seed);
        cfg.pool_size = 50;
        generate(&cfg).unwrap()
    }

    #[test]
    fn pseudo_selection_picks_extremes() {
        // σ is monotone, so ordering by x is ordering by g₋₁.
        let ds = Dataset::new(vec![
            scalar_bag("n", &[0.1, 0.9, 0.3], Label::Anomalous),
            scalar_bag("p", &[0.0, 0.0], Label::Normal),
        ])
        .unwrap();
        let sets = select_pseudo(&ds, &linear_scorer(5.0)).unwrap();
        assert_eq!(sets.n_pse, vec![InstanceRef { bag: 0, instance: 1 }]);
        assert_eq!(sets.p_pse, vec![InstanceRef { bag: 0, instance: 0 }]);
    }

    #[test]
    fn pseudo_selection_tie_keeps_only_anomalous_label() {
        let ds = Dataset::new(vec![
            scalar_bag("n", &[0.4, 0.4, 0.4], Label::Anomalous),
            scalar_bag("single", &[2.0], Label::Anomalous),
            scalar_bag("p", &[0.0], Label::Normal),
        ])
        .unwrap();
        let sets = select_pseudo(&ds, &linear_scorer(1.0)).unwrap();
        assert_eq!(sets.n_pse, vec![InstanceRef { bag: 0, instance: 0 }, InstanceRef { bag: 1, instance: 0 }]);
        assert!(sets.p_pse.is_empty());
    }

    #[test]
    fn pseudo_sets_are_balanced() {
        let ds = {
            let mut cfg = SynthConfig::new(ImbalanceSpec::new(4, 1.0).unwrap(), 10, 1);
            cfg.pool_size = 100;
            generate(&cfg).unwrap()
        };
        let c = Classifier::random(Architecture::new(2, 8), &mut ChaCha8Rng::seed_from_u64(0));
        let sets = select_pseudo(&ds, &c).unwrap();
        assert_eq!(sets.n_pse.len(), 10);
        assert_eq!(sets.p_pse.len(), 10);
    }

    #[test]
    fn threshold_indexing() {
        let scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
        assert_eq!(adjusted_threshold(&scores, 0.8).unwrap(), 0.9);
        assert_eq!(adjusted_threshold(&scores, 1e-9).unwrap(), 0.1);
        assert_eq!(adjusted_threshold(&scores, 0.999_999).unwrap(), 0.95);
        assert!(adjusted_threshold(&[], 0.5).is_err());
        assert!(adjusted_threshold(&scores, 1.0).is_err());
    }

    #[test]
    fn threshold_is_monotone_in_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..57).map(|_| rng.random()).collect();
        let mut last = 0.0;
        for k in 1..100 {
            let t = adjusted_threshold(&scores, k as f64 / 100.0).unwrap();
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn pooling_rules() {
        let bag = scalar_bag("b", &[0.0, 0.0, 0.0, 0.0], Label::Anomalous);
        let (s, d) = pool(&BagScoring::MaxInstance, &bag, &[0.1, 0.9]).unwrap();
        assert_eq!(s, 0.9);
        assert_eq!(d, vec![0.0, 1.0]);
        let (s, d) = pool(&BagScoring::TopK { k: 3 }, &bag, &[0.9, 0.5, 0.1, 0.1]).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        assert_eq!(d.iter().filter(|&&x| x > 0.0).count(), 3);
        // k larger than the bag is clamped.
        let (s, _) = pool(&BagScoring::TopK { k: 10 }, &bag, &[0.2, 0.4]).unwrap();
        assert!((s - 0.3).abs() < 1e-15);
        let (s, d) = pool(&BagScoring::Attention { weights: vec![0.0] }, &bag, &[0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        assert_eq!(d, vec![0.25; 4]);
    }

    #[test]
    fn batches_cover_the_longer_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..37).collect();
        let neg: Vec<usize> = (100..105).collect();
        let batches = epoch_batches(&pos, &neg, 16, &mut rng);
        assert_eq!(batches.len(), 3);
        let mut seen: Vec<usize> = batches.iter().flat_map(|(p, _)| p.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, pos);
        assert!(batches.iter().all(|(_, n)| n.len() == 5));
    }

    #[test]
    fn oversampling_equalises_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..30).collect();
        let neg: Vec<usize> = (30..36).collect();
        let (p, n) = rebalance(Method::MacroOver, &pos, &neg, &mut rng);
        assert_eq!(p.len(), n.len());
        assert!(n.iter().all(|i| neg.contains(i)));
        let (p, n) = rebalance(Method::MacroUnder, &pos, &neg, &mut rng);
        assert_eq!((p.len(), n.len()), (6, 6));
        assert!(p.iter().all(|i| pos.contains(i)));
    }

    #[test]
    fn zero_lambdas_leave_parameters_unchanged() {
        let ds = small_data(0);
        let mut cfg = TrainConfig::new(Method::Bfgpu, 0.75);
        cfg.lambda_bfgpu = 0.0;
        cfg.lambda_pse = 0.0;
        cfg.lr = 1e-2;
        let model = train_bfgpu(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = Classifier::new(Architecture::new(2, cfg.hidden), &mut rng);
        assert_eq!(model.classifier, init);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = small_data(1);
        for method in Method::ALL {
            let mut cfg = TrainConfig::new(method, 0.75);
            cfg.lr = 1e-2;
            cfg.epochs = 2;
            let a = train(&ds, &cfg).unwrap();
            let b = train(&ds, &cfg).unwrap();
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap(), "{method}");
            assert!((0.0..=1.0).contains(&a.threshold));
        }
    }

    #[test]
    fn checkpoint_json_round_trip() {
        let ds = small_data(2);
        let mut cfg = TrainConfig::new(Method::MilAttention, 0.75);
        cfg.lr = 1e-2;
        cfg.epochs = 1;
        let m = train(&ds, &cfg).unwrap();
        let back = TrainedModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_configs_and_data() {
        let ds = small_data(3);
        let mut cfg = TrainConfig::new(Method::Bfgpu, 0.75);
        cfg.epochs = 0;
        assert!(matches!(train(&ds, &cfg), Err(Error::InvalidConfig(_))));
        let cfg = TrainConfig::new(Method::Bfgpu, 1.0);
        assert!(matches!(train(&ds, &cfg), Err(Error::InvalidConfig(_))));
        let only_pos = Dataset::new(ds.positive_bags().cloned().collect()).unwrap();
        let cfg = TrainConfig::new(Method::Bfgpu, 0.75);
        assert!(matches!(train(&only_pos, &cfg), Err(Error::InsufficientData(_))));
        assert!(train_bfgpu(&ds, &TrainConfig::new(Method::Upu, 0.75)).is_err());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = small_data(4);
        let mut cfg = TrainConfig::new(Method::Bfgpu, 0.75);
        cfg.lambda_pse = f64::MAX;
        cfg.lr = 1e-2;
        let err = train(&ds, &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainingFailure { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn baselines_share_initialisation() {
        // Same seed and architecture means every method starts from the same
        // parameters; only the loss path differs.
        let ds = small_data(5);
        let mut init = None;
        for method in [Method::Bfgpu, Method::Upu, Method::MilMax] {
            let mut cfg = TrainConfig::new(method, 0.75);
            cfg.lambda_bfgpu = 0.0;
            cfg.lambda_pse = 0.0;
            cfg.lr = 0.0;
            let m = train(&ds, &cfg).unwrap();
            let params = m.classifier.params().to_vec();
            assert_eq!(init.get_or_insert(params.clone()), &params);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }
}
