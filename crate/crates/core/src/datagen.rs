//! Synthetic dual-imbalance MIL datasets and the JSON-lines / CSV dataset
//! formats.
//!
//! The base pool is two isotropic Gaussian clusters: normal instances centred
//! at `-separation/2 · e₀`, anomalous ones at `+separation/2 · e₀`. Anomalous
//! bags mix `σ_micro` normal draws with one anomalous draw; normal bags hold
//! `σ_micro + 1` normal draws. All draws are with replacement.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Bag, Dataset, ImbalanceSpec, Instance, Label};
use crate::error::{Error, Result};

const POOL_STREAM: u64 = 0;
const BAG_STREAM: u64 = 1;
/// Offset applied to the seed when drawing a held-out set.
const HELD_OUT_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct BasePool {
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: ImbalanceSpec,
    pub n_negative_bags: usize,
    pub dim: usize,
    pub cluster_separation: f64,
    pub noise_scale: f64,
    /// Points drawn per class for the base pool.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    pub seed: u64,
}

fn default_pool_size() -> usize {
    1000
}

impl SynthConfig {
    pub fn new(spec: ImbalanceSpec, n_negative_bags: usize, seed: u64) -> Self {
        SynthConfig {
            spec,
            n_negative_bags,
            dim: 2,
            cluster_separation: 6.0,
            noise_scale: 0.5,
            pool_size: default_pool_size(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.n_negative_bags == 0 {
            return Err(Error::invalid_config("n_negative_bags must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::invalid_config("dim must be >= 1"));
        }
        if self.pool_size == 0 {
            return Err(Error::invalid_config("pool_size must be >= 1"));
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation >= 0.0) {
            return Err(Error::invalid_config("cluster_separation must be finite and >= 0"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::invalid_config("noise_scale must be finite and >= 0"));
        }
        if self.n_positive_bags() == 0 {
            return Err(Error::invalid_config("sigma_macro * n_negative_bags rounds to zero positive bags"));
        }
        Ok(())
    }

    /// `round(σ_macro · n_negative_bags)`, ties to even.
    pub fn n_positive_bags(&self) -> usize {
        (self.spec.sigma_macro * self.n_negative_bags as f64).round_ties_even() as usize
    }

    /// Same configuration with an independent seed, for a held-out draw.
    pub fn held_out(&self) -> Self {
        SynthConfig { seed: self.seed.wrapping_add(HELD_OUT_SEED_OFFSET), ..self.clone() }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn make_base_pool(config: &SynthConfig) -> Result<BasePool> {
    config.validate()?;
    let mut rng = rng_for(config.seed, POOL_STREAM);
    let half = config.cluster_separation / 2.0;
    let mut draw = |centre: f64| -> Vec<f64> {
        (0..config.dim)
            .map(|k| {
                let z: f64 = rng.sample(StandardNormal);
                let mean = if k == 0 { centre } else { 0.0 };
                mean + config.noise_scale * z
            })
            .collect()
    };
    let positives = (0..config.pool_size).map(|_| draw(-half)).collect();
    let negatives = (0..config.pool_size).map(|_| draw(half)).collect();
    Ok(BasePool { positives, negatives, dim: config.dim })
}

pub fn synthesize(pool: &BasePool, config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    if pool.positives.is_empty() || pool.negatives.is_empty() {
        return Err(Error::invalid_input("base pool has an empty class"));
    }
    if pool.dim != config.dim {
        return Err(Error::Shape { expected: config.dim, actual: pool.dim });
    }
    let mut rng = rng_for(config.seed, BAG_STREAM);
    let sigma = config.spec.sigma_micro as usize;

    let pick = |rng: &mut ChaCha8Rng, from: &[Vec<f64>], label: Label| {
        let idx = rng.random_range(0..from.len());
        Instance::with_label(from[idx].clone(), label)
    };

    let mut contents: Vec<(Vec<Instance>, Label)> = Vec::new();
    for _ in 0..config.n_negative_bags {
        let mut instances: Vec<Instance> = (0..sigma).map(|_| pick(&mut rng, &pool.positives, Label::Normal)).collect();
        instances.push(pick(&mut rng, &pool.negatives, Label::Anomalous));
        instances.shuffle(&mut rng);
        contents.push((instances, Label::Anomalous));
    }
    for _ in 0..config.n_positive_bags() {
        let instances = (0..=sigma).map(|_| pick(&mut rng, &pool.positives, Label::Normal)).collect();
        contents.push((instances, Label::Normal));
    }
    contents.shuffle(&mut rng);

    let bags = contents
        .into_iter()
        .enumerate()
        .map(|(i, (instances, label))| Bag::new(format!("bag-{i:05}"), instances, label))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(bags)
}

/// Base pool plus bags in one call.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    let pool = make_base_pool(config)?;
    synthesize(&pool, config)
}

/// A training set and an independently seeded held-out set with the same
/// imbalance ratios.
pub fn generate_with_held_out(config: &SynthConfig) -> Result<(Dataset, Dataset)> {
    Ok((generate(config)?, generate(&config.held_out())?))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    bag_id: String,
    macro_label: Label,
    instances: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    micro_labels: Option<Vec<Label>>,
}

impl BagRecord {
    fn from_bag(bag: &Bag) -> Self {
        BagRecord {
            bag_id: bag.id.clone(),
            macro_label: bag.macro_label,
            instances: bag.instances.iter().map(|i| i.features.clone()).collect(),
            micro_labels: bag.instances.iter().map(|i| i.micro_label).collect(),
        }
    }

    fn into_bag(self, line: usize) -> Result<Bag> {
        let labels = match self.micro_labels {
            Some(labels) if labels.len() != self.instances.len() => {
                return Err(Error::Schema(format!(
                    "line {line}: {} micro labels for {} instances",
                    labels.len(),
                    self.instances.len()
                )))
            }
            Some(labels) => labels.into_iter().map(Some).collect(),
            None => vec![None; self.instances.len()],
        };
        let instances = self
            .instances
            .into_iter()
            .zip(labels)
            .map(|(features, micro_label)| Instance { features, micro_label })
            .collect();
        Bag::new(self.bag_id, instances, self.macro_label).map_err(|e| match e {
            Error::InvalidInput(m) | Error::Schema(m) => Error::Schema(format!("line {line}: {m}")),
            other => other,
        })
    }
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, mut writer: W) -> Result<()> {
    for bag in dataset.bags() {
        serde_json::to_writer(&mut writer, &BagRecord::from_bag(bag))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut bags = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BagRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        for inst in &record.instances {
            let expected = *dim.get_or_insert(inst.len());
            if inst.len() != expected {
                return Err(Error::Schema(format!("line {line_no}: instance dimension {} != {expected}", inst.len())));
            }
            if inst.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("line {line_no}: non-finite feature")));
            }
        }
        bags.push(record.into_bag(line_no)?);
    }
    Dataset::new(bags)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(dataset, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// Flat instance table: `bag_id, instance_idx, f0..f{d-1}, macro_label`.
pub fn write_instance_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["bag_id".to_string(), "instance_idx".to_string()];
    header.extend((0..dataset.dim()).map(|k| format!("f{k}")));
    header.push("macro_label".into());
    w.write_record(&header)?;
    for bag in dataset.bags() {
        for (j, inst) in bag.instances.iter().enumerate() {
            let mut row = vec![bag.id.clone(), j.to_string()];
            row.extend(inst.features.iter().map(|x| x.to_string()));
            row.push(bag.macro_label.sign().to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_instance_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_instance_csv(dataset, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::macro_label_from_micro;

    fn config(sigma_micro: u32, sigma_macro: f64, n_neg: usize) -> SynthConfig {
        SynthConfig::new(ImbalanceSpec::new(sigma_micro, sigma_macro).unwrap(), n_neg, 0)
    }

    fn class_means(pool: &BasePool) -> (Vec<f64>, Vec<f64>) {
        let mean = |v: &[Vec<f64>]| {
            let mut m = vec![0.0; pool.dim];
            for x in v {
                for (a, b) in m.iter_mut().zip(x) {
                    *a += b / v.len() as f64;
                }
            }
            m
        };
        (mean(&pool.positives), mean(&pool.negatives))
    }

    fn distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn pool_means_are_separated() {
        let mut cfg = config(5, 1.0, 10);
        cfg.cluster_separation = 4.0;
        cfg.noise_scale = 1.0;
        let pool = make_base_pool(&cfg).unwrap();
        let (mp, mn) = class_means(&pool);
        assert!((distance(&mp, &mn) - 4.0).abs() < 0.2);
    }

    #[test]
    fn zero_noise_pool_is_degenerate() {
        let mut cfg = config(5, 1.0, 10);
        cfg.noise_scale = 0.0;
        let pool = make_base_pool(&cfg).unwrap();
        assert!(pool.positives.iter().all(|x| x == &vec![-3.0, 0.0]));
        assert!(pool.negatives.iter().all(|x| x == &vec![3.0, 0.0]));
    }

    #[test]
    fn zero_separation_is_indistinguishable() {
        let mut cfg = config(5, 1.0, 10);
        cfg.cluster_separation = 0.0;
        cfg.pool_size = 20_000;
        let pool = make_base_pool(&cfg).unwrap();
        let (mp, mn) = class_means(&pool);
        assert!(distance(&mp, &mn) < 0.05);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = config(5, 1.0, 10);
        cfg.noise_scale = -1.0;
        assert!(matches!(make_base_pool(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = config(5, 1.0, 10);
        cfg.dim = 0;
        assert!(matches!(make_base_pool(&cfg), Err(Error::InvalidConfig(_))));
        let cfg = config(5, 0.01, 10);
        assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn synthesize_counts_and_composition() {
        let ds = generate(&config(5, 1.0, 10)).unwrap();
        assert_eq!(ds.negative_bags().count(), 10);
        assert_eq!(ds.positive_bags().count(), 10);
        for bag in ds.bags() {
            assert_eq!(bag.len(), 6);
            let labels: Vec<Label> = bag.instances.iter().map(|i| i.micro_label.unwrap()).collect();
            assert_eq!(macro_label_from_micro(&labels).unwrap(), bag.macro_label);
            let n_anom = labels.iter().filter(|l| l.is_anomalous()).count();
            match bag.macro_label {
                Label::Anomalous => assert_eq!(n_anom, 1),
                Label::Normal => assert_eq!(n_anom, 0),
            }
        }

        let ds = generate(&config(2, 5.0, 2)).unwrap();
        assert_eq!(ds.negative_bags().count(), 2);
        assert_eq!(ds.positive_bags().count(), 10);
        assert!(ds.bags().iter().all(|b| b.len() == 3));
    }

    #[test]
    fn positive_bag_count_rounds_ties_to_even() {
        assert_eq!(config(2, 0.5, 5).n_positive_bags(), 2);
        assert_eq!(config(2, 0.5, 7).n_positive_bags(), 4);
        assert_eq!(config(2, 1.5, 3).n_positive_bags(), 4);
    }

    #[test]
    fn anomaly_position_varies() {
        let ds = generate(&config(5, 1.0, 200)).unwrap();
        let mut seen = [false; 6];
        for bag in ds.negative_bags() {
            let pos = bag.instances.iter().position(|i| i.micro_label == Some(Label::Anomalous));
            seen[pos.unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = config(4, 2.0, 8);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_jsonl(&generate(&cfg).unwrap(), &mut a).unwrap();
        write_jsonl(&generate(&cfg).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_jsonl(&generate(&cfg.held_out()).unwrap(), &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let ds = generate(&config(2, 1.0, 3)).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn jsonl_errors() {
        let missing = r#"{"bag_id":"a","instances":[[1.0]]}"#;
        let err = read_jsonl(missing.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");

        let dims = "{\"bag_id\":\"a\",\"macro_label\":1,\"instances\":[[1.0,2.0]]}\n\
                    {\"bag_id\":\"b\",\"macro_label\":-1,\"instances\":[[1.0]]}";
        assert!(matches!(read_jsonl(dims.as_bytes()), Err(Error::Schema(_))));

        let nan = r#"{"bag_id":"a","macro_label":1,"instances":[[NaN]]}"#;
        assert!(read_jsonl(nan.as_bytes()).is_err());

        let bad_label = r#"{"bag_id":"a","macro_label":0,"instances":[[1.0]]}"#;
        assert!(matches!(read_jsonl(bad_label.as_bytes()), Err(Error::Parse { .. })));

        let inconsistent = r#"{"bag_id":"a","macro_label":1,"instances":[[1.0]],"micro_labels":[-1]}"#;
        assert!(matches!(read_jsonl(inconsistent.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_export_layout() {
        let ds = generate(&config(2, 1.0, 1)).unwrap();
        let mut buf = Vec::new();
        write_instance_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "bag_id,instance_idx,f0,f1,macro_label");
        assert_eq!(lines.count(), ds.n_instances());
    }
}
