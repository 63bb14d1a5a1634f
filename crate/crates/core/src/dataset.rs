//! Domain types shared across the crate: labels, instances, bags, datasets,
//! imbalance specifications and the micro-level split of a macro dataset.
//!
//! Sign convention throughout: `+1` is the normal class (the "positive" class
//! of PU learning) and `-1` is the anomalous class. A bag is normal iff every
//! instance in it is normal.

use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Binary label in `{-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// `-1`
    Anomalous,
    /// `+1`
    Normal,
}

impl Label {
    pub fn from_sign(value: i64) -> Result<Self> {
        match value {
            1 => Ok(Label::Normal),
            -1 => Ok(Label::Anomalous),
            other => Err(Error::invalid_input(format!("label must be +1 or -1, got {other}"))),
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Label::Normal => 1,
            Label::Anomalous => -1,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_i8(self.sign())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(deserializer)?;
        Label::from_sign(v).map_err(serde::de::Error::custom)
    }
}

/// One micro sample. `micro_label` is ground truth kept for diagnostics only;
/// no training path reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub micro_label: Option<Label>,
}

impl Instance {
    pub fn new(features: Vec<f64>) -> Self {
        Instance { features, micro_label: None }
    }

    pub fn with_label(features: Vec<f64>, label: Label) -> Self {
        Instance { features, micro_label: Some(label) }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// A macro sample: ordered instances plus one macro label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub instances: Vec<Instance>,
    pub macro_label: Label,
}

impl Bag {
    /// Builds a bag, checking `l >= 1` and, when every instance carries a
    /// ground-truth label, that the macro label agrees with them.
    pub fn new(id: impl Into<String>, instances: Vec<Instance>, macro_label: Label) -> Result<Self> {
        let id = id.into();
        if instances.is_empty() {
            return Err(Error::invalid_input(format!("bag {id} has no instances")));
        }
        if let Some(labels) = instances.iter().map(|i| i.micro_label).collect::<Option<Vec<_>>>() {
            let implied = macro_label_from_micro(&labels)?;
            if implied != macro_label {
                return Err(Error::Schema(format!(
                    "bag {id}: macro label {} disagrees with micro labels",
                    macro_label.sign()
                )));
            }
        }
        Ok(Bag { id, instances, macro_label })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Feature vectors in instance order.
    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.instances.iter().map(|i| i.features.as_slice())
    }

    /// Component-wise mean of the instance features.
    pub fn mean_features(&self) -> Vec<f64> {
        let dim = self.instances[0].dim();
        let mut mean = vec![0.0; dim];
        for inst in &self.instances {
            for (m, x) in mean.iter_mut().zip(&inst.features) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// A macro dataset `D_macro`. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    bags: Vec<Bag>,
    dim: usize,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>) -> Result<Self> {
        let first = bags.first().ok_or_else(|| Error::invalid_input("dataset has no bags"))?;
        let dim = first.instances[0].dim();
        if dim == 0 {
            return Err(Error::Schema("instance dimension must be positive".into()));
        }
        for bag in &bags {
            for (j, inst) in bag.instances.iter().enumerate() {
                if inst.dim() != dim {
                    return Err(Error::Schema(format!(
                        "bag {} instance {j}: dimension {} != {dim}",
                        bag.id,
                        inst.dim()
                    )));
                }
                if inst.features.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Schema(format!("bag {} instance {j}: non-finite feature", bag.id)));
                }
            }
        }
        Ok(Dataset { bags, dim })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn positive_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| b.macro_label == Label::Normal)
    }

    pub fn negative_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| b.macro_label == Label::Anomalous)
    }

    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    /// Mean of `l - 1` over negative bags. Bags may differ in length, so this
    /// is a summary statistic rather than a fixed ratio.
    pub fn sigma_micro(&self) -> Option<f64> {
        let lens: Vec<usize> = self.negative_bags().map(Bag::len).collect();
        if lens.is_empty() {
            return None;
        }
        Some(lens.iter().map(|&l| (l - 1) as f64).sum::<f64>() / lens.len() as f64)
    }

    /// `|P_macro| / |N_macro|`.
    pub fn sigma_macro(&self) -> Option<f64> {
        let n_neg = self.negative_bags().count();
        if n_neg == 0 {
            return None;
        }
        Some(self.positive_bags().count() as f64 / n_neg as f64)
    }
}

/// Normal:anomalous ratios at the instance and bag levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub sigma_micro: u32,
    pub sigma_macro: f64,
}

impl ImbalanceSpec {
    pub fn new(sigma_micro: u32, sigma_macro: f64) -> Result<Self> {
        let spec = ImbalanceSpec { sigma_micro, sigma_macro };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_micro < 1 {
            return Err(Error::invalid_config("sigma_micro must be >= 1"));
        }
        if !(self.sigma_macro.is_finite() && self.sigma_macro > 0.0) {
            return Err(Error::invalid_config("sigma_macro must be a positive finite number"));
        }
        Ok(())
    }

    /// Length of every synthetic bag.
    pub fn bag_len(&self) -> usize {
        self.sigma_micro as usize + 1
    }
}

/// Which class-prior formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorLevel {
    /// `σ_micro / (σ_micro + 1)`: fraction of normal instances in `U_micro`.
    #[default]
    Micro,
    /// `1 - 1 / ((σ_micro + 1)(σ_macro + 1))`: fraction of normal instances overall.
    Dual,
}

impl std::str::FromStr for PriorLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(PriorLevel::Micro),
            "dual" => Ok(PriorLevel::Dual),
            other => Err(Error::invalid_config(format!("unknown prior level {other:?}"))),
        }
    }
}

/// Class prior `π` from real-valued imbalance ratios.
pub fn prior_from_ratios(sigma_micro: f64, sigma_macro: f64, level: PriorLevel) -> Result<f64> {
    if !(sigma_micro.is_finite() && sigma_micro > 0.0) {
        return Err(Error::invalid_config("sigma_micro must be positive"));
    }
    match level {
        PriorLevel::Micro => Ok(sigma_micro / (sigma_micro + 1.0)),
        PriorLevel::Dual => {
            if !(sigma_macro.is_finite() && sigma_macro > 0.0) {
                return Err(Error::invalid_config("sigma_macro must be positive"));
            }
            Ok(1.0 - 1.0 / ((sigma_micro + 1.0) * (sigma_macro + 1.0)))
        }
    }
}

pub fn class_prior(spec: &ImbalanceSpec, level: PriorLevel) -> Result<f64> {
    spec.validate()?;
    prior_from_ratios(spec.sigma_micro as f64, spec.sigma_macro, level)
}

/// The MIL labelling rule: a bag is normal iff all of its instances are.
pub fn macro_label_from_micro(micro_labels: &[Label]) -> Result<Label> {
    if micro_labels.is_empty() {
        return Err(Error::invalid_input("cannot derive a macro label from zero instances"));
    }
    Ok(if micro_labels.iter().all(|&l| l == Label::Normal) { Label::Normal } else { Label::Anomalous })
}

/// Position of one instance inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub bag: usize,
    pub instance: usize,
}

/// `P_micro` (instances of normal bags) and `U_micro` (instances of anomalous
/// bags), flattened in dataset order with per-bag ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroSplit {
    pub p_micro: Vec<InstanceRef>,
    pub u_micro: Vec<InstanceRef>,
    /// Ranges into `p_micro`, one per positive bag.
    pub p_groups: Vec<Range<usize>>,
    /// Ranges into `u_micro`, one per negative bag.
    pub u_groups: Vec<Range<usize>>,
}

impl MicroSplit {
    /// Dataset bag indices of the positive bags, in group order.
    pub fn positive_bag_indices(&self) -> Vec<usize> {
        self.p_groups.iter().map(|r| self.p_micro[r.start].bag).collect()
    }

    pub fn negative_bag_indices(&self) -> Vec<usize> {
        self.u_groups.iter().map(|r| self.u_micro[r.start].bag).collect()
    }
}

pub fn split(dataset: &Dataset) -> Result<MicroSplit> {
    let mut out = MicroSplit { p_micro: Vec::new(), u_micro: Vec::new(), p_groups: Vec::new(), u_groups: Vec::new() };
    for (b, bag) in dataset.bags().iter().enumerate() {
        let (refs, groups) = match bag.macro_label {
            Label::Normal => (&mut out.p_micro, &mut out.p_groups),
            Label::Anomalous => (&mut out.u_micro, &mut out.u_groups),
        };
        let start = refs.len();
        refs.extend((0..bag.len()).map(|j| InstanceRef { bag: b, instance: j }));
        groups.push(start..refs.len());
    }
    if out.p_groups.is_empty() || out.u_groups.is_empty() {
        return Err(Error::InsufficientData(format!(
            "need at least one positive and one negative bag (got {} / {})",
            out.p_groups.len(),
            out.u_groups.len()
        )));
    }
    Ok(out)
}
