//! Percentile-based design thresholds and reward weights.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::composition::{Property, PropertyVector};
use super::load::RegressionRow;
use crate::error::{invalid, Error, Result};

pub const THRESHOLD_SCHEMA_VERSION: u32 = 1;

/// Minimum non-missing values for a property to receive a threshold.
pub const MIN_VALUES_FOR_THRESHOLD: usize = 10;

/// A quantity that thresholds and rewards are defined over: one of the seven
/// properties, or the reduced glass-transition ratio Tg/Tl.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Target {
    Property(Property),
    TgTlRatio,
}

impl Target {
    /// Targets used by the default reward and by the SR_80 metric.
    pub const DESIGN: [Target; 5] = [
        Target::Property(Property::Dmax),
        Target::TgTlRatio,
        Target::Property(Property::SigmaY),
        Target::Property(Property::YoungsModulus),
        Target::Property(Property::Elongation),
    ];

    pub fn unit(self) -> &'static str {
        match self {
            Target::Property(p) => p.unit(),
            Target::TgTlRatio => "1",
        }
    }

    /// Extracts the target value from a property vector, if present.
    pub fn value(self, props: &PropertyVector) -> Option<f64> {
        match self {
            Target::Property(p) => props.get(p),
            Target::TgTlRatio => match (props.get(Property::Tg), props.get(Property::Tl)) {
                (Some(tg), Some(tl)) if tl > 0.0 => Some(tg / tl),
                _ => None,
            },
        }
    }

    pub fn from_name(name: &str) -> Option<Target> {
        if name == "Tg/Tl" {
            Some(Target::TgTlRatio)
        } else {
            Property::from_column(name).map(Target::Property)
        }
    }
}

impl TryFrom<String> for Target {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Target::from_name(&s).ok_or_else(|| Error::Config(format!("unknown target `{s}`")))
    }
}

impl From<Target> for String {
    fn from(t: Target) -> Self {
        t.to_string()
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Property(p) => write!(f, "{p}"),
            Target::TgTlRatio => f.write_str("Tg/Tl"),
        }
    }
}

/// Sample-quantile conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PercentileMethod {
    /// Linear interpolation between closest ranks at `h = (n-1)p`.
    Linear,
    /// Value at rank `ceil(n p)` (1-based).
    NearestRank,
    Lower,
    Higher,
    Midpoint,
}

impl PercentileMethod {
    pub const ALL: [PercentileMethod; 5] = [
        PercentileMethod::Linear,
        PercentileMethod::NearestRank,
        PercentileMethod::Lower,
        PercentileMethod::Higher,
        PercentileMethod::Midpoint,
    ];
}

/// Percentile of `values` at fraction `p` in [0, 1].
pub fn percentile(values: &[f64], p: f64, method: PercentileMethod) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("percentile fraction {p} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(match method {
        PercentileMethod::Linear => v[lo] + (h - lo as f64) * (v[hi] - v[lo]),
        PercentileMethod::NearestRank => {
            let rank = ((n as f64) * p).ceil().max(1.0) as usize;
            v[rank.min(n) - 1]
        }
        PercentileMethod::Lower => v[lo],
        PercentileMethod::Higher => v[hi],
        PercentileMethod::Midpoint => 0.5 * (v[lo] + v[hi]),
    })
}

/// Thresholds τ per target plus reward weights w over the reward's target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub schema_version: u32,
    pub percentile: f64,
    pub method: PercentileMethod,
    pub tau: BTreeMap<Target, f64>,
    pub weights: BTreeMap<Target, f64>,
    /// Targets skipped for lack of data.
    pub excluded: Vec<Target>,
}

impl ThresholdSet {
    /// Builds a set from explicit values; weights are made uniform over `tau`.
    pub fn uniform(tau: BTreeMap<Target, f64>) -> Result<Self> {
        let w = 1.0 / tau.len() as f64;
        let weights = tau.keys().map(|&t| (t, w)).collect();
        let set = ThresholdSet {
            schema_version: THRESHOLD_SCHEMA_VERSION,
            percentile: 0.0,
            method: PercentileMethod::Linear,
            tau,
            weights,
            excluded: Vec::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Config("threshold set has no weighted targets".into()));
        }
        for (t, &w) in &self.weights {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("weight for {t} is negative")));
            }
            match self.tau.get(t) {
                Some(&tau) if tau > 0.0 && tau.is_finite() => {}
                _ => return Err(Error::Config(format!("weighted target {t} needs a positive threshold"))),
            }
        }
        let sum: f64 = self.weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Weighted targets in a stable order.
    pub fn targets(&self) -> impl Iterator<Item = (Target, f64, f64)> + '_ {
        self.weights.iter().map(|(&t, &w)| (t, self.tau[&t], w))
    }

    pub fn with_weights(mut self, weights: BTreeMap<Target, f64>) -> Result<Self> {
        self.weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn to_document(&self) -> ThresholdDocument {
        ThresholdDocument {
            schema_version: self.schema_version,
            percentile: self.percentile,
            method: self.method,
            entries: self
                .tau
                .iter()
                .map(|(&t, &tau)| ThresholdEntry {
                    target: t.to_string(),
                    unit: t.unit().to_string(),
                    tau,
                    weight: self.weights.get(&t).copied().unwrap_or(0.0),
                })
                .collect(),
            excluded: self.excluded.iter().map(ToString::to_string).collect(),
        }
    }

    pub fn from_document(doc: &ThresholdDocument) -> Result<Self> {
        if doc.schema_version != THRESHOLD_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "threshold schema_version {} unsupported (expected {THRESHOLD_SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let mut tau = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for e in &doc.entries {
            let t =
                Target::from_name(&e.target).ok_or_else(|| Error::Config(format!("unknown target `{}`", e.target)))?;
            if e.unit != t.unit() {
                return Err(Error::Config(format!(
                    "{} must be given in {}, got {}",
                    t,
                    t.unit(),
                    e.unit
                )));
            }
            tau.insert(t, e.tau);
            if e.weight > 0.0 {
                weights.insert(t, e.weight);
            }
        }
        let excluded = doc
            .excluded
            .iter()
            .map(|n| Target::from_name(n).ok_or_else(|| Error::Config(format!("unknown target `{n}`"))))
            .collect::<Result<_>>()?;
        let set = ThresholdSet {
            schema_version: doc.schema_version,
            percentile: doc.percentile,
            method: doc.method,
            tau,
            weights,
            excluded,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(&serde_json::from_str(&text)?)
    }
}

/// On-disk form with explicit units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDocument {
    pub schema_version: u32,
    pub percentile: f64,
    pub method: PercentileMethod,
    pub entries: Vec<ThresholdEntry>,
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub target: String,
    pub unit: String,
    pub tau: f64,
    pub weight: f64,
}

/// Per-target values over rows where the target is present.
pub fn target_values(rows: &[RegressionRow], target: Target) -> Vec<f64> {
    rows.iter().filter_map(|r| target.value(&r.properties)).collect()
}

/// Percentile thresholds for all seven properties and Tg/Tl, with uniform
/// weights over the design targets that received a threshold.
pub fn compute_thresholds(
    rows: &[RegressionRow],
    percentile_fraction: f64,
    method: PercentileMethod,
) -> Result<ThresholdSet> {
    if !(percentile_fraction > 0.0 && percentile_fraction < 1.0) {
        return Err(invalid(format!("percentile {percentile_fraction} must lie in (0, 1)")));
    }
    let mut tau = BTreeMap::new();
    let mut excluded = Vec::new();
    let all = Property::ALL
        .into_iter()
        .map(Target::Property)
        .chain(std::iter::once(Target::TgTlRatio));
    for t in all {
        let values = target_values(rows, t);
        if values.len() < MIN_VALUES_FOR_THRESHOLD {
            log::warn!("target {t}: only {} values, excluded from thresholds", values.len());
            excluded.push(t);
            continue;
        }
        tau.insert(t, percentile(&values, percentile_fraction, method)?);
    }
    let design: Vec<Target> = Target::DESIGN
        .into_iter()
        .filter(|t| tau.get(t).is_some_and(|&v| v > 0.0))
        .collect();
    if design.is_empty() {
        return Err(Error::Data("no design target has enough data for a threshold".into()));
    }
    let w = 1.0 / design.len() as f64;
    let set = ThresholdSet {
        schema_version: THRESHOLD_SCHEMA_VERSION,
        percentile: percentile_fraction,
        method,
        tau,
        weights: design.into_iter().map(|t| (t, w)).collect(),
        excluded,
    };
    set.validate()?;
    Ok(set)
}
