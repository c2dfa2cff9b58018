//! Core domain values: the canonical element order, compositions, properties
//! and class labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of composition slots.
pub const N_ELEMENTS: usize = 52;

/// Canonical element order. Composition indices refer to this list.
pub const ELEMENTS: [&str; N_ELEMENTS] = [
    "Zr", "Cu", "Ni", "Al", "Ti", "Fe", "Co", "Pd", "Pt", "Mg", "Ca", "La", "Ce", "Nd", "Pr", "Y", "Hf", "Nb", "Ta",
    "Be", "B", "C", "Si", "P", "Ag", "Au", "Zn", "Sn", "Ga", "Ge", "Mo", "Cr", "Mn", "V", "W", "Er", "Gd", "Dy", "Ho",
    "Tb", "Sm", "Yb", "Li", "Sc", "In", "Sb", "Bi", "Pb", "Ru", "Rh", "Ir", "Re",
];

/// Tolerance on the 100 at.% sum of a composition.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Entries with magnitude below this are snapped to exactly zero.
pub const ZERO_SNAP: f64 = 1e-9;

pub fn element_index(symbol: &str) -> Option<usize> {
    ELEMENTS.iter().position(|&e| e == symbol)
}

/// Atomic-percent vector over the canonical elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Composition {
    fractions: Vec<f64>,
}

impl Composition {
    /// Validates range and sum; does not check the element count.
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        if fractions.len() != N_ELEMENTS {
            return Err(Error::Data(format!(
                "composition has {} slots, expected {N_ELEMENTS}",
                fractions.len()
            )));
        }
        for (i, &f) in fractions.iter().enumerate() {
            if !f.is_finite() || !(0.0..=100.0).contains(&f) {
                return Err(Error::Data(format!(
                    "composition entry {} = {f} outside [0, 100]",
                    ELEMENTS[i]
                )));
            }
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 100.0).abs() > SUM_TOLERANCE {
            return Err(Error::Data(format!("composition sums to {sum}, expected 100")));
        }
        Ok(Composition { fractions })
    }

    /// Scales non-negative entries to sum to exactly 100.
    pub fn normalized(mut fractions: Vec<f64>) -> Result<Self> {
        if fractions.len() != N_ELEMENTS {
            return Err(Error::Data(format!(
                "composition has {} slots, expected {N_ELEMENTS}",
                fractions.len()
            )));
        }
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Data("composition has a negative or non-finite entry".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Data("composition is empty".into()));
        }
        for f in fractions.iter_mut() {
            *f *= 100.0 / sum;
            if *f < ZERO_SNAP {
                *f = 0.0;
            }
        }
        Composition::new(fractions)
    }

    /// Builds a composition from `(symbol, at.%)` pairs and renormalizes.
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Result<Self> {
        let mut fractions = vec![0.0; N_ELEMENTS];
        for &(sym, v) in pairs {
            let idx = element_index(sym).ok_or_else(|| Error::Data(format!("unknown element symbol `{sym}`")))?;
            fractions[idx] += v;
        }
        Composition::normalized(fractions)
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.fractions[idx]
    }

    /// Indices of elements with a strictly positive fraction.
    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.fractions
            .iter()
            .enumerate()
            .filter(|(_, &f)| f > 0.0)
            .map(|(i, _)| i)
    }

    pub fn n_present(&self) -> usize {
        self.present().count()
    }

    pub fn max_abs_diff(&self, other: &Composition) -> f64 {
        self.fractions
            .iter()
            .zip(&other.fractions)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn euclidean(&self, other: &Composition) -> f64 {
        self.fractions
            .iter()
            .zip(&other.fractions)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Index of the element with the largest fraction (first on ties).
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (i, &f) in self.fractions.iter().enumerate() {
            if f > self.fractions[best] {
                best = i;
            }
        }
        best
    }

    /// Compact formula such as `Zr55Cu30Al10Ni5`, elements in descending fraction.
    pub fn formula(&self) -> String {
        let mut parts: Vec<(usize, f64)> = self.present().map(|i| (i, self.fractions[i])).collect();
        parts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        parts
            .iter()
            .map(|(i, f)| {
                let rounded = (f * 100.0).round() / 100.0;
                format!("{}{}", ELEMENTS[*i], rounded)
            })
            .collect()
    }
}

impl TryFrom<Vec<f64>> for Composition {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Composition::new(v)
    }
}

impl From<Composition> for Vec<f64> {
    fn from(c: Composition) -> Self {
        c.fractions
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.formula())
    }
}

/// The seven regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Property {
    #[serde(rename = "Dmax")]
    Dmax,
    #[serde(rename = "Tg")]
    Tg,
    #[serde(rename = "Tl")]
    Tl,
    #[serde(rename = "Tx")]
    Tx,
    #[serde(rename = "sigma_Y")]
    SigmaY,
    #[serde(rename = "E")]
    YoungsModulus,
    #[serde(rename = "epsilon")]
    Elongation,
}

pub const N_PROPERTIES: usize = 7;

impl Property {
    pub const ALL: [Property; N_PROPERTIES] = [
        Property::Dmax,
        Property::Tg,
        Property::Tl,
        Property::Tx,
        Property::SigmaY,
        Property::YoungsModulus,
        Property::Elongation,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn column(self) -> &'static str {
        match self {
            Property::Dmax => "Dmax",
            Property::Tg => "Tg",
            Property::Tl => "Tl",
            Property::Tx => "Tx",
            Property::SigmaY => "sigma_Y",
            Property::YoungsModulus => "E",
            Property::Elongation => "epsilon",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Property::Dmax => "mm",
            Property::Tg | Property::Tl | Property::Tx => "K",
            Property::SigmaY => "MPa",
            Property::YoungsModulus => "GPa",
            Property::Elongation => "%",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Property::Dmax => "maximum casting diameter",
            Property::Tg => "glass transition temperature",
            Property::Tl => "liquidus temperature",
            Property::Tx => "crystallization temperature",
            Property::SigmaY => "yield strength",
            Property::YoungsModulus => "Young's modulus",
            Property::Elongation => "elongation",
        }
    }

    /// Accepts the canonical column name and a few common spellings.
    pub fn from_column(name: &str) -> Option<Property> {
        let n = name.trim();
        Property::ALL.into_iter().find(|p| p.column() == n).or(match n {
            "D_max" | "dmax" | "Dmax_mm" => Some(Property::Dmax),
            "sigma_y" | "sigmaY" | "σY" => Some(Property::SigmaY),
            "e_mod" | "E_GPa" => Some(Property::YoungsModulus),
            "elongation" | "ε" => Some(Property::Elongation),
            _ => None,
        })
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// Measured properties; any entry may be missing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertyVector(pub [Option<f64>; N_PROPERTIES]);

impl PropertyVector {
    pub fn get(&self, p: Property) -> Option<f64> {
        self.0[p.index()]
    }

    pub fn set(&mut self, p: Property, v: Option<f64>) {
        self.0[p.index()] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }

    /// Predicted vectors carry every entry.
    pub fn from_full(values: [f64; N_PROPERTIES]) -> Self {
        PropertyVector(values.map(Some))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "RMG")]
    Rmg,
    #[serde(rename = "CRA")]
    Cra,
    #[serde(rename = "BMG")]
    Bmg,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Rmg, ClassLabel::Cra, ClassLabel::Bmg];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Rmg => "RMG",
            ClassLabel::Cra => "CRA",
            ClassLabel::Bmg => "BMG",
        }
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "RMG" => Ok(ClassLabel::Rmg),
            "CRA" => Ok(ClassLabel::Cra),
            "BMG" => Ok(ClassLabel::Bmg),
            other => Err(Error::Data(format!("unknown class label `{other}`"))),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
