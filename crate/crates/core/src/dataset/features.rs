//! Element descriptor table and composition-level candidate features.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::composition::{element_index, Composition, ELEMENTS, N_ELEMENTS};
use crate::error::{Error, Result};

const BUNDLED_TABLE: &str = include_str!("../../data/elements.csv");

/// Per-element physical descriptors keyed by the canonical element order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementDescriptorTable {
    names: Vec<String>,
    /// `values[descriptor][element]`
    values: Vec<Vec<f64>>,
}

impl ElementDescriptorTable {
    /// The table shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_csv_str(BUNDLED_TABLE).expect("bundled descriptor table is valid")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    /// Parses a `symbol,<descriptor>...` table. Every canonical element must
    /// appear with a value for every descriptor.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("symbol") {
            return Err(Error::Data("descriptor table must start with a `symbol` column".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::Data(format!("duplicate descriptor `{n}`")));
            }
        }
        let mut values = vec![vec![f64::NAN; N_ELEMENTS]; names.len()];
        for rec in rdr.records() {
            let rec = rec?;
            let sym = rec.get(0).unwrap_or_default().trim();
            let Some(idx) = element_index(sym) else {
                continue;
            };
            for (d, field) in rec.iter().skip(1).enumerate().take(names.len()) {
                values[d][idx] = field.trim().parse().map_err(|_| {
                    Error::Data(format!("descriptor {} for {sym}: `{field}` is not a number", names[d]))
                })?;
            }
        }
        for (d, col) in values.iter().enumerate() {
            if let Some(e) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "element {} has no value for descriptor {}",
                    ELEMENTS[e], names[d]
                )));
            }
        }
        Ok(ElementDescriptorTable { names, values })
    }

    pub fn descriptor_names(&self) -> &[String] {
        &self.names
    }

    pub fn descriptor_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, descriptor: usize, element: usize) -> f64 {
        self.values[descriptor][element]
    }

    pub fn column(&self, descriptor: usize) -> &[f64] {
        &self.values[descriptor]
    }

    /// Adds (or replaces) a descriptor column.
    pub fn with_descriptor(mut self, name: &str, column: Vec<f64>) -> Result<Self> {
        if column.len() != N_ELEMENTS || column.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "descriptor `{name}` must have {N_ELEMENTS} finite values"
            )));
        }
        match self.descriptor_index(name) {
            Some(i) => self.values[i] = column,
            None => {
                self.names.push(name.to_string());
                self.values.push(column);
            }
        }
        Ok(self)
    }

    /// Every descriptor crossed with every aggregation.
    pub fn vocabulary(&self) -> Vec<CandidateFeature> {
        self.names
            .iter()
            .flat_map(|n| {
                Aggregation::ALL
                    .into_iter()
                    .map(move |agg| CandidateFeature::new(n.clone(), agg))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    WeightedMean,
    WeightedStd,
    Min,
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::WeightedMean,
        Aggregation::WeightedStd,
        Aggregation::Min,
        Aggregation::Max,
    ];

    fn suffix(self) -> &'static str {
        match self {
            Aggregation::WeightedMean => "mean",
            Aggregation::WeightedStd => "std",
            Aggregation::Min => "min",
            Aggregation::Max => "max",
        }
    }
}

/// A descriptor aggregated over a composition, named `<descriptor>:<agg>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CandidateFeature {
    pub descriptor: String,
    pub aggregation: Aggregation,
}

impl CandidateFeature {
    pub fn new(descriptor: impl Into<String>, aggregation: Aggregation) -> Self {
        CandidateFeature {
            descriptor: descriptor.into(),
            aggregation,
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CandidateFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.descriptor, self.aggregation.suffix())
    }
}

impl FromStr for CandidateFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (desc, agg) = s
            .trim()
            .rsplit_once(':')
            .ok_or_else(|| Error::UnknownFeature(s.to_string()))?;
        let aggregation = Aggregation::ALL
            .into_iter()
            .find(|a| a.suffix() == agg)
            .ok_or_else(|| Error::UnknownFeature(s.to_string()))?;
        Ok(CandidateFeature::new(desc, aggregation))
    }
}

impl TryFrom<String> for CandidateFeature {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CandidateFeature> for String {
    fn from(f: CandidateFeature) -> Self {
        f.to_string()
    }
}

/// Computes the requested features for one composition.
pub fn featurize(c: &Composition, features: &[CandidateFeature], table: &ElementDescriptorTable) -> Result<Vec<f64>> {
    let present: Vec<usize> = c.present().collect();
    if present.is_empty() {
        return Err(Error::Data("cannot featurize an empty composition".into()));
    }
    let mut cache: HashMap<&str, (f64, f64)> = HashMap::new();
    let mut out = Vec::with_capacity(features.len());
    for feat in features {
        let d = table
            .descriptor_index(&feat.descriptor)
            .ok_or_else(|| Error::UnknownFeature(feat.name()))?;
        let col = table.column(d);
        let value = match feat.aggregation {
            Aggregation::WeightedMean | Aggregation::WeightedStd => {
                let (mean, std) = *cache.entry(feat.descriptor.as_str()).or_insert_with(|| {
                    let mean: f64 = present.iter().map(|&i| c.get(i) / 100.0 * col[i]).sum();
                    let var: f64 = present
                        .iter()
                        .map(|&i| c.get(i) / 100.0 * (col[i] - mean).powi(2))
                        .sum();
                    (mean, var.max(0.0).sqrt())
                });
                if feat.aggregation == Aggregation::WeightedMean {
                    mean
                } else {
                    std
                }
            }
            Aggregation::Min => present.iter().map(|&i| col[i]).fold(f64::INFINITY, f64::min),
            Aggregation::Max => present.iter().map(|&i| col[i]).fold(f64::NEG_INFINITY, f64::max),
        };
        out.push(value);
    }
    Ok(out)
}

/// Resolves names against the table's vocabulary.
pub fn parse_features(names: &[String], table: &ElementDescriptorTable) -> Result<Vec<CandidateFeature>> {
    names
        .iter()
        .map(|n| {
            let f: CandidateFeature = n.parse()?;
            if table.descriptor_index(&f.descriptor).is_none() {
                return Err(Error::UnknownFeature(n.clone()));
            }
            Ok(f)
        })
        .collect()
}
