//! Hierarchical reward: illegal-state penalty, classification reward,
//! regression improvement and threshold terms, novelty/UCB completion reward
//! and the optional knowledge-based blend.

use std::collections::{BTreeSet, HashMap};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::dataset::{Composition, PropertyVector, Target, ThresholdSet};
use crate::environment::EpisodeContext;
use crate::error::{invalid, Error, Result};
use crate::guidance::{Guidance, Prediction};

pub const DENOMINATOR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub thresholds: ThresholdSet,
    pub alpha: f64,
    pub beta: f64,
    /// Class probability above which the knowledge blend may fire.
    pub cls_gate: f64,
    /// Fraction of `T_max` after which the knowledge blend may fire.
    pub kbr_phase_gate: f64,
    /// Max-norm distance (at.%) under which a composition counts as known.
    pub match_tolerance: f64,
    /// Grid (at.%) for visit counting.
    pub visit_grid: f64,
    /// Targets where smaller values are better; empty by default.
    #[serde(default)]
    pub lower_is_better: BTreeSet<Target>,
}

impl RewardConfig {
    pub fn new(thresholds: ThresholdSet) -> Self {
        RewardConfig {
            thresholds,
            alpha: 0.5,
            beta: 0.2,
            cls_gate: 0.8,
            kbr_phase_gate: 0.8,
            match_tolerance: 0.5,
            visit_grid: 0.5,
            lower_is_better: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(self.match_tolerance >= 0.0) || !(self.visit_grid > 0.0) {
            return Err(Error::Config("match tolerance and visit grid must be positive".into()));
        }
        Ok(())
    }
}

/// `ln(k) / (2 ln(T_ep)) - 1`, with `k` 1-based.
pub fn illegal_reward(k: usize, t_ep: usize) -> Result<f64> {
    if k == 0 {
        return Err(invalid("step index k is 1-based"));
    }
    if t_ep < 2 {
        return Err(invalid("T_ep must be at least 2"));
    }
    Ok((k as f64).ln() / (2.0 * (t_ep as f64).ln()) - 1.0)
}

pub fn classification_reward(p: f64) -> f64 {
    p - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTerms {
    pub r_i: f64,
    pub r_t: f64,
    /// Every configured target reached its threshold.
    pub all_met: bool,
    pub denominator_floored: bool,
}

/// Weighted improvement `Σ w tanh((ŷ(s') - ŷ(s)) / max(τ, ŷ(s)))` and
/// weighted threshold count `Σ w 1[ŷ(s') >= τ]`.
pub fn regression_reward(
    pred_s: &PropertyVector,
    pred_next: &PropertyVector,
    config: &RewardConfig,
) -> Result<RegressionTerms> {
    let mut out = RegressionTerms {
        r_i: 0.0,
        r_t: 0.0,
        all_met: true,
        denominator_floored: false,
    };
    for (target, tau, w) in config.thresholds.targets() {
        let before = target
            .value(pred_s)
            .ok_or_else(|| Error::Model(format!("no prediction for {target} at s")))?;
        let after = target
            .value(pred_next)
            .ok_or_else(|| Error::Model(format!("no prediction for {target} at s'")))?;
        let lower = config.lower_is_better.contains(&target);
        let mut denom = tau.max(before);
        if denom <= 0.0 {
            denom = DENOMINATOR_FLOOR;
            out.denominator_floored = true;
        }
        let gain = if lower { before - after } else { after - before };
        out.r_i += w * (gain / denom).tanh();
        let met = if lower { after <= tau } else { after >= tau };
        if met {
            out.r_t += w;
        } else {
            out.all_met = false;
        }
    }
    Ok(out)
}

/// `α sqrt(2 ln(T_ep) / n)`.
pub fn ucb_reward(alpha: f64, t_ep: usize, n: u64) -> f64 {
    alpha * (2.0 * (t_ep as f64).ln() / n.max(1) as f64).sqrt()
}

/// Convex blend; `r_llm` is clamped to `[-1, 1]` first. Returns the blended
/// value and whether clamping happened.
pub fn blend_kbr(r_base: f64, r_llm: f64, beta: f64) -> (f64, bool) {
    let clamped = r_llm.clamp(-1.0, 1.0);
    ((1.0 - beta) * r_base + beta * clamped, clamped != r_llm)
}

/// Known compositions for novelty checks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CompositionDatabase {
    entries: Vec<Composition>,
}

impl CompositionDatabase {
    pub fn new(entries: Vec<Composition>) -> Self {
        CompositionDatabase { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Composition] {
        &self.entries
    }

    pub fn contains_within(&self, c: &Composition, tol: f64) -> bool {
        self.entries.iter().any(|e| e.max_abs_diff(c) <= tol)
    }

    /// The `k` nearest entries by max-norm distance.
    pub fn nearest(&self, c: &Composition, k: usize) -> Vec<&Composition> {
        let mut d: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.max_abs_diff(c), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, i)| &self.entries[i]).collect()
    }
}

/// Visit counts per grid cell; safe to share between threads.
#[derive(Debug, Default)]
pub struct VisitCounter {
    grid: f64,
    counts: Mutex<HashMap<Vec<i64>, u64>>,
}

#[derive(Serialize, Deserialize)]
struct VisitSnapshot {
    grid: f64,
    counts: Vec<(Vec<i64>, u64)>,
}

impl VisitCounter {
    pub fn new(grid: f64) -> Self {
        VisitCounter {
            grid,
            counts: Mutex::new(HashMap::new()),
        }
    }

    pub fn key(&self, c: &Composition) -> Vec<i64> {
        c.fractions().iter().map(|f| (f / self.grid).round() as i64).collect()
    }

    /// Increments and returns the new count.
    pub fn visit(&self, c: &Composition) -> u64 {
        let key = self.key(c);
        let mut m = self.counts.lock();
        let n = m.entry(key).or_insert(0);
        *n += 1;
        *n
    }

    pub fn count(&self, c: &Composition) -> u64 {
        self.counts.lock().get(&self.key(c)).copied().unwrap_or(0)
    }

    pub fn cells(&self) -> usize {
        self.counts.lock().len()
    }
}

impl Clone for VisitCounter {
    fn clone(&self) -> Self {
        VisitCounter {
            grid: self.grid,
            counts: Mutex::new(self.counts.lock().clone()),
        }
    }
}

impl Serialize for VisitCounter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut counts: Vec<(Vec<i64>, u64)> = self.counts.lock().iter().map(|(k, v)| (k.clone(), *v)).collect();
        counts.sort();
        VisitSnapshot {
            grid: self.grid,
            counts,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VisitCounter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let snap = VisitSnapshot::deserialize(d)?;
        Ok(VisitCounter {
            grid: snap.grid,
            counts: Mutex::new(snap.counts.into_iter().collect()),
        })
    }
}

/// `(r_done, novel, n)`; `n` is the visit count after this evaluation, or 0
/// for a novel composition.
pub fn done_reward(
    next: &Composition,
    database: &CompositionDatabase,
    visits: &VisitCounter,
    t_ep: usize,
    config: &RewardConfig,
) -> (f64, bool, u64) {
    if !database.contains_within(next, config.match_tolerance) {
        return (1.0, true, 0);
    }
    let n = visits.visit(next);
    (ucb_reward(config.alpha, t_ep, n), false, n)
}

/// Scores a legal, confidently classified composition in `[-1, 1]`.
pub trait KnowledgeScorer: Send + Sync {
    fn score(&self, next: &Composition, prediction: &Prediction) -> Result<f64>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub legal: bool,
    pub r_illegal: Option<f64>,
    pub r_cls: Option<f64>,
    pub r_i: Option<f64>,
    pub r_t: Option<f64>,
    pub r_done: Option<f64>,
    pub r_llm: Option<f64>,
    pub cls_prob: Option<f64>,
    /// Predicted properties of `s'` when the regression branch ran.
    pub predicted: Option<PropertyVector>,
    pub all_thresholds_met: bool,
    /// Sum of the present terms before any knowledge blend.
    pub base_total: f64,
    pub total: f64,
    pub done: bool,
    pub novel: bool,
    pub visit_count: Option<u64>,
    pub kbr_applied: bool,
    pub llm_clamped: bool,
    pub denominator_floored: bool,
}

/// Reward evaluation with run-scoped visit counts.
pub struct RewardEngine {
    pub config: RewardConfig,
    pub database: CompositionDatabase,
    pub visits: VisitCounter,
}

impl RewardEngine {
    pub fn new(config: RewardConfig, database: CompositionDatabase) -> Result<Self> {
        config.validate()?;
        let visits = VisitCounter::new(config.visit_grid);
        Ok(RewardEngine {
            config,
            database,
            visits,
        })
    }

    pub fn kbr_gate(&self, ctx: &EpisodeContext, cls_prob: f64) -> bool {
        ctx.t as f64 >= self.config.kbr_phase_gate * ctx.t_max as f64 && cls_prob > self.config.cls_gate
    }

    /// Full pipeline with guidance calls. `pred_s` is the cached prediction of
    /// the current state if the caller has one.
    pub fn evaluate(
        &self,
        s: &Composition,
        next: Option<&Composition>,
        pred_s: Option<&Prediction>,
        ctx: &EpisodeContext,
        guidance: &dyn Guidance,
        kbr: Option<&dyn KnowledgeScorer>,
    ) -> Result<(RewardBreakdown, Option<Prediction>)> {
        let Some(next) = next else {
            return Ok((self.evaluate_predicted(None, None, ctx, None)?, None));
        };
        let p_next = guidance.predict(next)?;
        let p_s = if p_next.class_prob > 0.5 {
            Some(match pred_s {
                Some(p) => *p,
                None => guidance.predict(s)?,
            })
        } else {
            None
        };
        let b = self.evaluate_predicted(Some((next, &p_next)), p_s.as_ref().map(|p| &p.properties), ctx, kbr)?;
        Ok((b, Some(p_next)))
    }

    /// Pipeline on precomputed predictions. `pred_s` must be present when the
    /// regression branch is reached.
    pub fn evaluate_predicted(
        &self,
        next: Option<(&Composition, &Prediction)>,
        pred_s: Option<&PropertyVector>,
        ctx: &EpisodeContext,
        kbr: Option<&dyn KnowledgeScorer>,
    ) -> Result<RewardBreakdown> {
        ctx.validate()?;
        let mut b = RewardBreakdown::default();
        let Some((next, p_next)) = next else {
            let r = illegal_reward(ctx.k, ctx.t_ep)?;
            b.r_illegal = Some(r);
            b.base_total = r;
            b.total = r;
            return Ok(b);
        };
        b.legal = true;
        let p = p_next.class_prob;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Model(format!("class probability {p} outside [0, 1]")));
        }
        b.cls_prob = Some(p);
        let r_cls = classification_reward(p);
        b.r_cls = Some(r_cls);
        let mut total = r_cls;
        if p > 0.5 {
            let pred_s = pred_s.ok_or_else(|| Error::Model("regression branch needs a prediction of s".into()))?;
            let terms = regression_reward(pred_s, &p_next.properties, &self.config)?;
            b.r_i = Some(terms.r_i);
            b.r_t = Some(terms.r_t);
            b.predicted = Some(p_next.properties);
            b.denominator_floored = terms.denominator_floored;
            b.all_thresholds_met = terms.all_met;
            total += terms.r_i + terms.r_t;
            if terms.all_met {
                let (r_done, novel, n) = done_reward(next, &self.database, &self.visits, ctx.t_ep, &self.config);
                b.r_done = Some(r_done);
                b.novel = novel;
                b.visit_count = (!novel).then_some(n);
                b.done = novel;
                total += r_done;
            }
        }
        b.base_total = total;
        b.total = total;
        if let Some(scorer) = kbr {
            if self.kbr_gate(ctx, p) {
                let r_llm = scorer.score(next, p_next)?;
                let (blended, clamped) = blend_kbr(total, r_llm, self.config.beta);
                b.r_llm = Some(r_llm.clamp(-1.0, 1.0));
                b.llm_clamped = clamped;
                b.kbr_applied = true;
                b.total = blended;
            }
        }
        Ok(b)
    }
}
