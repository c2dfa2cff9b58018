//! The virtual design environment: exploration bases, episode resets and
//! composition transitions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{element_index, Composition, ELEMENTS, N_ELEMENTS, SUM_TOLERANCE, ZERO_SNAP};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_DELTA_MAX: f64 = 5.0;
pub const DEFAULT_T_EP: usize = 128;
pub const DEFAULT_BASE_COUNT: usize = 35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRange {
    pub element: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BaseManifestEntry", into = "BaseManifestEntry")]
pub struct ExplorationBase {
    base: usize,
    /// Allowed element indices, ascending, with their `[min, max]` ranges.
    allowed: Vec<usize>,
    ranges: Vec<(f64, f64)>,
    /// Rows whose dominant element is the base.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseManifestEntry {
    pub base: String,
    pub support: usize,
    pub ranges: Vec<ElementRange>,
}

impl From<ExplorationBase> for BaseManifestEntry {
    fn from(b: ExplorationBase) -> Self {
        BaseManifestEntry {
            base: ELEMENTS[b.base].to_string(),
            support: b.support,
            ranges: b
                .allowed
                .iter()
                .zip(&b.ranges)
                .map(|(&i, &(min, max))| ElementRange {
                    element: ELEMENTS[i].to_string(),
                    min,
                    max,
                })
                .collect(),
        }
    }
}

impl TryFrom<BaseManifestEntry> for ExplorationBase {
    type Error = Error;

    fn try_from(e: BaseManifestEntry) -> Result<Self> {
        let base = element_index(&e.base).ok_or_else(|| Error::Data(format!("unknown base element {}", e.base)))?;
        let mut pairs = Vec::with_capacity(e.ranges.len());
        for r in &e.ranges {
            let i = element_index(&r.element)
                .ok_or_else(|| Error::Data(format!("unknown element {} in base {}", r.element, e.base)))?;
            pairs.push((i, (r.min, r.max)));
        }
        pairs.sort_by_key(|p| p.0);
        ExplorationBase::new(base, pairs, e.support)
    }
}

impl ExplorationBase {
    pub fn new(base: usize, mut ranges: Vec<(usize, (f64, f64))>, support: usize) -> Result<Self> {
        ranges.sort_by_key(|p| p.0);
        ranges.dedup_by_key(|p| p.0);
        if !ranges.iter().any(|p| p.0 == base) {
            return Err(Error::Data(format!(
                "base {} missing from its allowed set",
                ELEMENTS[base]
            )));
        }
        for &(i, (lo, hi)) in &ranges {
            if !(0.0 <= lo && lo <= hi && hi <= 100.0) {
                return Err(Error::Data(format!("range [{lo}, {hi}] for {} invalid", ELEMENTS[i])));
            }
        }
        Ok(ExplorationBase {
            base,
            allowed: ranges.iter().map(|p| p.0).collect(),
            ranges: ranges.iter().map(|p| p.1).collect(),
            support,
        })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn symbol(&self) -> &'static str {
        ELEMENTS[self.base]
    }

    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    pub fn is_allowed(&self, i: usize) -> bool {
        self.allowed.binary_search(&i).is_ok()
    }

    pub fn range_of(&self, i: usize) -> Option<(f64, f64)> {
        self.allowed.binary_search(&i).ok().map(|k| self.ranges[k])
    }

    pub fn ranges(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.allowed.iter().zip(&self.ranges).map(|(&i, &(lo, hi))| (i, lo, hi))
    }
}

/// Top-`count` dominant elements, with element ranges over the rows that
/// contain each base.
pub fn derive_bases(compositions: &[Composition], count: usize) -> Result<Vec<ExplorationBase>> {
    if compositions.is_empty() {
        return Err(Error::Data(
            "cannot derive exploration bases from an empty dataset".into(),
        ));
    }
    let mut freq = [0usize; N_ELEMENTS];
    for c in compositions {
        freq[c.dominant()] += 1;
    }
    let mut order: Vec<usize> = (0..N_ELEMENTS).filter(|&i| freq[i] > 0).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    if count > order.len() {
        log::warn!(
            "requested {count} exploration bases but only {} elements are ever dominant",
            order.len()
        );
    }
    order.truncate(count);

    order
        .into_iter()
        .map(|base| {
            let rows: Vec<&Composition> = compositions.iter().filter(|c| c.get(base) > 0.0).collect();
            let mut ranges: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for c in &rows {
                for i in c.present() {
                    ranges.entry(i).or_insert((f64::INFINITY, f64::NEG_INFINITY));
                }
            }
            for (&i, r) in ranges.iter_mut() {
                for c in &rows {
                    let v = c.get(i);
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                }
            }
            ExplorationBase::new(base, ranges.into_iter().collect(), freq[base])
        })
        .collect()
}

pub fn save_bases(bases: &[ExplorationBase], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(bases)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_bases(path: &Path) -> Result<Vec<ExplorationBase>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeContext {
    /// 1-based step within the episode.
    pub k: usize,
    pub t_ep: usize,
    /// Global step counter, 0-based.
    pub t: usize,
    pub t_max: usize,
}

impl EpisodeContext {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.t_ep {
            return Err(invalid(format!("step index {} outside 1..={}", self.k, self.t_ep)));
        }
        if self.t > self.t_max {
            return Err(invalid(format!("global step {} beyond T_max {}", self.t, self.t_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `None` marks an illegal transition.
    pub next: Option<Composition>,
    /// Masked, clipped, zero-sum delta actually applied.
    pub delta: Vec<f64>,
    pub magnitude_violation: bool,
}

impl StepOutcome {
    pub fn is_legal(&self) -> bool {
        self.next.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Environment {
    pub delta_max: f64,
    pub t_ep: usize,
}

impl Default for Environment {
    fn default() -> Self {
        Environment {
            delta_max: DEFAULT_DELTA_MAX,
            t_ep: DEFAULT_T_EP,
        }
    }
}

impl Environment {
    /// Uniform draw inside each allowed element's range, renormalized.
    pub fn reset<R: Rng + ?Sized>(&self, base: &ExplorationBase, rng: &mut R) -> Result<Composition> {
        let mut f = vec![0.0; N_ELEMENTS];
        for (i, lo, hi) in base.ranges() {
            f[i] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        }
        if f.iter().all(|&v| v == 0.0) {
            return Err(Error::Data(format!("base {} has all-zero ranges", base.symbol())));
        }
        Composition::normalized(f)
    }

    /// Mask to the base's elements, clip to `±delta_max`, and shift the active
    /// entries by a common offset so they sum to zero while staying clipped.
    pub fn project(&self, raw: &[f64], base: &ExplorationBase) -> Vec<f64> {
        project_zero_sum(raw, base.allowed(), self.delta_max)
    }

    pub fn step(
        &self,
        s: &Composition,
        raw: &[f64],
        base: &ExplorationBase,
        ctx: &EpisodeContext,
    ) -> Result<StepOutcome> {
        if raw.len() != N_ELEMENTS {
            return Err(invalid(format!(
                "action has {} entries, expected {N_ELEMENTS}",
                raw.len()
            )));
        }
        ctx.validate()?;
        let magnitude_violation = base
            .allowed()
            .iter()
            .any(|&i| !raw[i].is_finite() || raw[i].abs() > self.delta_max + 1e-12);
        let delta = self.project(raw, base);
        let mut next: Vec<f64> = s.fractions().iter().zip(&delta).map(|(a, d)| a + d).collect();
        for v in next.iter_mut() {
            if v.abs() < ZERO_SNAP {
                *v = 0.0;
            }
        }
        let out_of_range = next.iter().any(|&v| !(0.0..=100.0).contains(&v));
        let next = if magnitude_violation || out_of_range {
            None
        } else {
            let sum: f64 = next.iter().sum();
            if (sum - 100.0).abs() > SUM_TOLERANCE * 1e-2 {
                Some(Composition::normalized(next)?)
            } else {
                Some(Composition::new(next)?)
            }
        };
        Ok(StepOutcome {
            next,
            delta,
            magnitude_violation,
        })
    }

    pub fn is_terminal(&self, reward_done: bool, ctx: &EpisodeContext) -> bool {
        reward_done || ctx.k >= ctx.t_ep
    }
}

/// Euclidean projection of the masked, clipped action onto
/// `{d : sum d = 0, |d_i| <= bound}`: `d_i = clip(a_i - c)` with the shift
/// `c` found by bisection. When no clipping binds this is plain mean removal.
pub fn project_zero_sum(raw: &[f64], active: &[usize], bound: f64) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    if active.is_empty() {
        return out;
    }
    let a: Vec<f64> = active
        .iter()
        .map(|&i| {
            if raw[i].is_finite() {
                raw[i].clamp(-bound, bound)
            } else {
                0.0
            }
        })
        .collect();
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let shifted: Vec<f64> = a.iter().map(|v| v - mean).collect();
    let result = if shifted.iter().all(|v| v.abs() <= bound) {
        shifted
    } else {
        let g = |c: f64| a.iter().map(|v| (v - c).clamp(-bound, bound)).sum::<f64>();
        let (mut lo, mut hi) = (-2.0 * bound, 2.0 * bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = 0.5 * (lo + hi);
        let mut d: Vec<f64> = a.iter().map(|v| (v - c).clamp(-bound, bound)).collect();
        // spread the bisection residual over the entries with slack
        let resid: f64 = d.iter().sum();
        let free: Vec<usize> = (0..d.len()).filter(|&k| d[k].abs() < bound).collect();
        if !free.is_empty() {
            for &k in &free {
                d[k] -= resid / free.len() as f64;
            }
        }
        d
    };
    for (&i, v) in active.iter().zip(result) {
        out[i] = v;
    }
    out
}
