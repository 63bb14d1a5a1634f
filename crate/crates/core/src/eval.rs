//! Macro inference, balanced metrics, and the σ-sweep harness.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_with_held_out, SynthConfig};
use crate::dataset::{class_prior, Bag, Dataset, ImbalanceSpec, Label, PriorLevel};
use crate::error::{Error, Result};
use crate::model::{DEFAULT_HIDDEN, DEFAULT_LR};
use crate::train::{argmax, train, BagScoring, Method, TrainConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPrediction {
    pub bag_id: String,
    pub label: Label,
    /// Largest instance `g₋₁` in the bag.
    pub max_instance_score: f64,
    /// Score compared against the threshold; equals `max_instance_score`
    /// under max-instance scoring.
    pub bag_score: f64,
    /// Instance with the largest score, reported when the bag is flagged.
    pub offending_instance: Option<usize>,
}

/// Flags a bag as anomalous iff its score exceeds the threshold strictly.
pub fn predict_macro(model: &TrainedModel, bag: &Bag) -> Result<MacroPrediction> {
    let scores = model.instance_scores(bag)?;
    let top = argmax(&scores);
    let bag_score = match model.scoring {
        BagScoring::MaxInstance => scores[top],
        _ => model.bag_score(bag)?,
    };
    let anomalous = bag_score > model.threshold;
    Ok(MacroPrediction {
        bag_id: bag.id.clone(),
        label: if anomalous { Label::Anomalous } else { Label::Normal },
        max_instance_score: scores[top],
        bag_score,
        offending_instance: anomalous.then_some(top),
    })
}

pub fn predict_dataset(model: &TrainedModel, dataset: &Dataset) -> Result<Vec<MacroPrediction>> {
    dataset.bags().par_iter().map(|b| predict_macro(model, b)).collect()
}

/// Balanced accuracy and anomalous-class F1. Counts treat the anomalous
/// class as positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub avg_acc: f64,
    pub f1_anomalous: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MetricReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self> {
        if tp + fn_ == 0 || tn + fp == 0 {
            return Err(Error::UndefinedMetric("ground truth contains a single class".into()));
        }
        let tpr = tp as f64 / (tp + fn_) as f64;
        let tnr = tn as f64 / (tn + fp) as f64;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        Ok(MetricReport { avg_acc: 0.5 * (tpr + tnr), f1_anomalous: f1, tp, fp, tn, fn_ })
    }
}

pub fn metrics(predictions: &[Label], truths: &[Label]) -> Result<MetricReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape { expected: truths.len(), actual: predictions.len() });
    }
    if truths.is_empty() {
        return Err(Error::UndefinedMetric("no predictions".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p.is_anomalous(), t.is_anomalous()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    MetricReport::from_counts(tp, fp, tn, fn_)
}

/// Predicts every bag and scores against the macro labels.
pub fn evaluate(model: &TrainedModel, dataset: &Dataset) -> Result<MetricReport> {
    let preds = predict_dataset(model, dataset)?;
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let truths: Vec<Label> = dataset.bags().iter().map(|b| b.macro_label).collect();
    metrics(&labels, &truths)
}

/// Sweep aggregate: arithmetic mean of per-σ means.
pub fn auc(per_sigma_means: &[f64]) -> Result<f64> {
    if per_sigma_means.is_empty() {
        return Err(Error::invalid_input("no σ points to aggregate"));
    }
    Ok(per_sigma_means.iter().sum::<f64>() / per_sigma_means.len() as f64)
}

/// Sample mean and standard deviation (n - 1 denominator; `None` for n = 1).
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((m, sd))
}

/// Everything a sweep needs. Cells are the product
/// `methods × sigma_micro × sigma_macro × seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub methods: Vec<Method>,
    pub sigma_micro: Vec<u32>,
    pub sigma_macro: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_negative_bags: usize,
    pub dim: usize,
    pub cluster_separation: f64,
    pub noise_scale: f64,
    pub pool_size: usize,
    pub prior_level: PriorLevel,
    pub epochs: usize,
    pub batch_bags: usize,
    pub lr: f64,
    pub lambda_pse: f64,
    /// `None` means `1/π` per cell.
    pub lambda_bfgpu: Option<f64>,
    pub topk: usize,
    pub hidden: usize,
    /// `None` keeps each method's default.
    pub adt: Option<bool>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            methods: vec![Method::Bfgpu, Method::MilMax],
            sigma_micro: vec![2, 4, 6, 8, 10],
            sigma_macro: vec![1.0],
            seeds: vec![0, 1, 2],
            n_negative_bags: 50,
            dim: 2,
            cluster_separation: 6.0,
            noise_scale: 0.5,
            pool_size: 1000,
            prior_level: PriorLevel::Micro,
            epochs: 5,
            batch_bags: 16,
            lr: DEFAULT_LR,
            lambda_pse: 1.0,
            lambda_bfgpu: None,
            topk: 3,
            hidden: DEFAULT_HIDDEN,
            adt: None,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str| Error::invalid_config(format!("sweep grid has no {name}"));
        if self.methods.is_empty() {
            return Err(empty("methods"));
        }
        if self.sigma_micro.is_empty() {
            return Err(empty("sigma_micro values"));
        }
        if self.sigma_macro.is_empty() {
            return Err(empty("sigma_macro values"));
        }
        if self.seeds.is_empty() {
            return Err(empty("seeds"));
        }
        for &sm in &self.sigma_micro {
            for &sb in &self.sigma_macro {
                let spec = ImbalanceSpec::new(sm, sb)?;
                self.synth_config(spec, 0).validate()?;
                self.train_config(Method::Bfgpu, 0.5, 0).validate()?;
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.methods.len() * self.sigma_micro.len() * self.sigma_macro.len() * self.seeds.len()
    }

    pub fn synth_config(&self, spec: ImbalanceSpec, seed: u64) -> SynthConfig {
        let mut cfg = SynthConfig::new(spec, self.n_negative_bags, seed);
        cfg.dim = self.dim;
        cfg.cluster_separation = self.cluster_separation;
        cfg.noise_scale = self.noise_scale;
        cfg.pool_size = self.pool_size;
        cfg
    }

    pub fn train_config(&self, method: Method, prior: f64, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, prior);
        cfg.epochs = self.epochs;
        cfg.batch_bags = self.batch_bags;
        cfg.lr = self.lr;
        cfg.lambda_pse = self.lambda_pse;
        if let Some(l) = self.lambda_bfgpu {
            cfg.lambda_bfgpu = l;
        }
        cfg.topk = self.topk;
        cfg.hidden = self.hidden;
        cfg.seed = seed;
        if let Some(adt) = self.adt {
            cfg.adt = adt;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok {
        avg_acc: f64,
        f1: f64,
    },
    /// Configuration is meaningless for this cell (top-k with k ≥ bag length).
    Skipped {
        reason: String,
    },
    Failed {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub sigma_micro: u32,
    pub sigma_macro: f64,
    pub seed: u64,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub sigma_micro: u32,
    pub sigma_macro: f64,
    pub n: usize,
    pub avg_acc_mean: f64,
    pub avg_acc_std: Option<f64>,
    pub f1_mean: f64,
    pub f1_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucEntry {
    pub method: Method,
    pub sigma_macro: f64,
    /// Number of σ_micro points that had at least one successful seed.
    pub n_sigma: usize,
    pub auc_avg_acc: f64,
    pub auc_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub prior_level: PriorLevel,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<Aggregate>,
    pub auc: Vec<AucEntry>,
}

/// Summary document written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub prior_level: PriorLevel,
    pub n_cells: usize,
    pub n_failed: usize,
    pub n_skipped: usize,
    pub aggregates: Vec<Aggregate>,
    pub auc: Vec<AucEntry>,
}

pub const SWEEP_COLUMNS: [&str; 6] = ["method", "sigma_micro", "sigma_macro", "seed", "avg_acc", "f1"];
pub const SKIP_MARKER: &str = "-";
pub const FAIL_MARKER: &str = "failed";

impl SweepReport {
    /// Aggregates successful rows per (method, σ_micro, σ_macro), then averages
    /// the per-σ_micro means into AUC entries per (method, σ_macro). Skipped
    /// and failed rows are excluded.
    pub fn from_rows(prior_level: PriorLevel, rows: Vec<SweepRow>) -> Self {
        type Key = (usize, u32, u64);
        let mut groups: BTreeMap<Key, (Method, f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let method_rank = |m: Method| Method::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX);
        for r in &rows {
            if let CellOutcome::Ok { avg_acc, f1 } = r.outcome {
                let e = groups
                    .entry((method_rank(r.method), r.sigma_micro, r.sigma_macro.to_bits()))
                    .or_insert_with(|| (r.method, r.sigma_macro, Vec::new(), Vec::new()));
                e.2.push(avg_acc);
                e.3.push(f1);
            }
        }
        // Order by method, then σ_macro, then σ_micro.
        let mut aggregates: Vec<Aggregate> = groups
            .into_iter()
            .map(|((_, sm, _), (method, sb, acc, f1))| {
                let (am, asd) = mean_std(&acc).expect("group is non-empty");
                let (fm, fsd) = mean_std(&f1).expect("group is non-empty");
                Aggregate {
                    method,
                    sigma_micro: sm,
                    sigma_macro: sb,
                    n: acc.len(),
                    avg_acc_mean: am,
                    avg_acc_std: asd,
                    f1_mean: fm,
                    f1_std: fsd,
                }
            })
            .collect();
        aggregates.sort_by(|a, b| {
            method_rank(a.method)
                .cmp(&method_rank(b.method))
                .then(a.sigma_macro.total_cmp(&b.sigma_macro))
                .then(a.sigma_micro.cmp(&b.sigma_micro))
        });

        let mut auc_entries = Vec::new();
        for chunk in aggregates.chunk_by(|a, b| a.method == b.method && a.sigma_macro == b.sigma_macro) {
            let acc: Vec<f64> = chunk.iter().map(|a| a.avg_acc_mean).collect();
            let f1: Vec<f64> = chunk.iter().map(|a| a.f1_mean).collect();
            auc_entries.push(AucEntry {
                method: chunk[0].method,
                sigma_macro: chunk[0].sigma_macro,
                n_sigma: chunk.len(),
                auc_avg_acc: auc(&acc).expect("chunk is non-empty"),
                auc_f1: auc(&f1).expect("chunk is non-empty"),
            });
        }
        SweepReport { prior_level, rows, aggregates, auc: auc_entries }
    }

    pub fn n_failed(&self) -> usize {
        self.rows.iter().filter(|r| matches!(r.outcome, CellOutcome::Failed { .. })).count()
    }

    pub fn n_skipped(&self) -> usize {
        self.rows.iter().filter(|r| matches!(r.outcome, CellOutcome::Skipped { .. })).count()
    }

    pub fn summary(&self) -> SweepSummary {
        SweepSummary {
            prior_level: self.prior_level,
            n_cells: self.rows.len(),
            n_failed: self.n_failed(),
            n_skipped: self.n_skipped(),
            aggregates: self.aggregates.clone(),
            auc: self.auc.clone(),
        }
    }

    /// One row per cell. Skipped cells carry `-` and failed cells `failed` in
    /// both metric columns.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SWEEP_COLUMNS)?;
        for r in &self.rows {
            let (acc, f1) = match &r.outcome {
                CellOutcome::Ok { avg_acc, f1 } => (avg_acc.to_string(), f1.to_string()),
                CellOutcome::Skipped { .. } => (SKIP_MARKER.to_string(), SKIP_MARKER.to_string()),
                CellOutcome::Failed { .. } => (FAIL_MARKER.to_string(), FAIL_MARKER.to_string()),
            };
            w.write_record([
                r.method.name().to_string(),
                r.sigma_micro.to_string(),
                r.sigma_macro.to_string(),
                r.seed.to_string(),
                acc,
                f1,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn skip_reason(method: Method, topk: usize, spec: &ImbalanceSpec) -> Option<String> {
    (method == Method::MilTopk && topk >= spec.bag_len())
        .then(|| format!("k = {topk} is not smaller than the bag length {}", spec.bag_len()))
}

fn run_cell(
    grid: &SweepGrid,
    method: Method,
    spec: ImbalanceSpec,
    seed: u64,
    data: &(Dataset, Dataset),
) -> CellOutcome {
    if let Some(reason) = skip_reason(method, grid.topk, &spec) {
        return CellOutcome::Skipped { reason };
    }
    let result = class_prior(&spec, grid.prior_level).and_then(|prior| {
        let cfg = grid.train_config(method, prior, seed);
        let model = train(&data.0, &cfg)?;
        evaluate(&model, &data.1)
    });
    match result {
        Ok(m) => CellOutcome::Ok { avg_acc: m.avg_acc, f1: m.f1_anomalous },
        Err(e) => CellOutcome::Failed { message: e.to_string() },
    }
}

/// Runs every cell on a pool of `jobs` threads (0 = rayon default). Each
/// (σ_micro, σ_macro, seed) triple gets one train/held-out draw shared by all
/// methods. Row order is the grid order regardless of scheduling.
pub fn run_sweep(grid: &SweepGrid, jobs: usize) -> Result<SweepReport> {
    grid.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid_config(format!("cannot start worker pool: {e}")))?;

    let mut draws = Vec::new();
    for &sm in &grid.sigma_micro {
        for &sb in &grid.sigma_macro {
            for &seed in &grid.seeds {
                draws.push((ImbalanceSpec::new(sm, sb)?, seed));
            }
        }
    }
    let data: Vec<(Dataset, Dataset)> = pool.install(|| {
        draws
            .par_iter()
            .map(|&(spec, seed)| generate_with_held_out(&grid.synth_config(spec, seed)))
            .collect::<Result<_>>()
    })?;

    let cells: Vec<(Method, usize)> =
        grid.methods.iter().flat_map(|&m| (0..draws.len()).map(move |d| (m, d))).collect();
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|&(method, d)| {
                let (spec, seed) = draws[d];
                SweepRow {
                    method,
                    sigma_micro: spec.sigma_micro,
                    sigma_macro: spec.sigma_macro,
                    seed,
                    outcome: run_cell(grid, method, spec, seed, &data[d]),
                }
            })
            .collect()
    });
    Ok(SweepReport::from_rows(grid.prior_level, rows))
}
