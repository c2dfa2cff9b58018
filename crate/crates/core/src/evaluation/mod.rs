//! Success-rate metrics over trajectory logs, equal-budget random and grid
//! baselines, and table output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Composition, Target, ThresholdSet, N_ELEMENTS};
use crate::environment::{Environment, EpisodeContext, ExplorationBase};
use crate::error::{Error, Result};
use crate::guidance::{BudgetedGuidance, Guidance, Prediction};
use crate::reward::RewardEngine;
use crate::trainer::StepRecord;

pub const DEFAULT_BUDGET: u64 = 128 * 1000;

/// Grid spacings (at.%) tried from fine to coarse when none is configured.
pub const RESOLUTION_LADDER: [f64; 12] = [0.1, 0.2, 0.25, 0.5, 1.0, 2.0, 2.5, 5.0, 10.0, 20.0, 25.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub count: u64,
    pub denominator: u64,
    /// `None` when the denominator is zero.
    pub percent: Option<f64>,
}

impl Rate {
    pub fn new(count: u64, denominator: u64) -> Self {
        Rate {
            count,
            denominator,
            percent: (denominator > 0).then(|| 100.0 * count as f64 / denominator as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    /// Legal steps over all steps.
    pub legal: Rate,
    /// BMG-classified steps over legal steps.
    pub cls: Rate,
    /// Per design target: classified steps whose prediction reaches the
    /// threshold, over classified steps.
    pub sr80: BTreeMap<Target, Rate>,
    /// Episodes ending in a new-material event over episodes.
    pub done: Rate,
}

pub fn success_rates(records: &[StepRecord], thresholds: &ThresholdSet) -> Result<SuccessRates> {
    if records.is_empty() {
        return Err(Error::Data("trajectory log is empty".into()));
    }
    let targets: Vec<(Target, f64)> = Target::DESIGN
        .iter()
        .filter_map(|&t| thresholds.tau.get(&t).map(|&tau| (t, tau)))
        .collect();
    let mut legal = 0;
    let mut cls = 0;
    let mut hits: BTreeMap<Target, u64> = targets.iter().map(|&(t, _)| (t, 0)).collect();
    let mut episodes = BTreeSet::new();
    let mut successes = BTreeSet::new();
    for r in records {
        episodes.insert(r.episode);
        if r.reward.done {
            successes.insert(r.episode);
        }
        if !r.reward.legal {
            continue;
        }
        legal += 1;
        if !r.reward.cls_prob.is_some_and(|p| p > 0.5) {
            continue;
        }
        cls += 1;
        if let Some(pred) = &r.reward.predicted {
            for &(t, tau) in &targets {
                if t.value(pred).is_some_and(|y| y >= tau) {
                    *hits.get_mut(&t).expect("seeded") += 1;
                }
            }
        }
    }
    Ok(SuccessRates {
        legal: Rate::new(legal, records.len() as u64),
        cls: Rate::new(cls, legal),
        sr80: hits.into_iter().map(|(t, n)| (t, Rate::new(n, cls))).collect(),
        done: Rate::new(successes.len() as u64, episodes.len() as u64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetedSearchConfig {
    /// Total guidance predictions allowed.
    pub budget: u64,
    /// Steps per random episode, and lattice points per grid chunk.
    pub t_ep: usize,
    pub seed: u64,
    /// Fixed lattice spacing; `None` picks one per base from the budget.
    pub grid_resolution: Option<f64>,
}

impl Default for BudgetedSearchConfig {
    fn default() -> Self {
        BudgetedSearchConfig {
            budget: DEFAULT_BUDGET,
            t_ep: crate::environment::DEFAULT_T_EP,
            seed: 0,
            grid_resolution: None,
        }
    }
}

fn is_exhausted<G: Guidance>(g: &BudgetedGuidance<G>) -> bool {
    g.remaining() == 0
}

/// Rolls episodes with `policy`, drawing a base per episode, until `episodes`
/// are done or the guidance budget runs out. A step whose evaluation hits the
/// budget is dropped.
#[allow(clippy::too_many_arguments)]
pub fn rollout<G: Guidance>(
    policy: &mut dyn FnMut(&Composition, &ExplorationBase, &mut ChaCha8Rng) -> Vec<f64>,
    env: &Environment,
    bases: &[ExplorationBase],
    engine: &RewardEngine,
    guidance: &BudgetedGuidance<G>,
    episodes: Option<usize>,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    if bases.is_empty() {
        return Err(Error::Config("no exploration bases".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = 0;
    let mut episode = 0u64;
    'episodes: while episodes.map_or(true, |n| (episode as usize) < n) {
        if is_exhausted(guidance) {
            break;
        }
        let base = &bases[rng.gen_range(0..bases.len())];
        let mut s = env.reset(base, &mut rng)?;
        let mut pred_s: Option<Prediction> = None;
        for k in 1..=env.t_ep {
            let ctx = EpisodeContext {
                k,
                t_ep: env.t_ep,
                t,
                t_max: usize::MAX,
            };
            let a = policy(&s, base, &mut rng);
            let step = env.step(&s, &a, base, &ctx)?;
            let (b, p_next) = match engine.evaluate(&s, step.next.as_ref(), pred_s.as_ref(), &ctx, guidance, None) {
                Ok(v) => v,
                Err(_) if is_exhausted(guidance) => break 'episodes,
                Err(e) => return Err(e),
            };
            let terminal = env.is_terminal(b.done, &ctx);
            out.push(StepRecord {
                episode,
                k,
                t,
                base: base.symbol().to_string(),
                bundle_version: guidance.version(),
                s: s.fractions().to_vec(),
                a: step.delta,
                s_next: step.next.as_ref().map(|c| c.fractions().to_vec()),
                reward: b,
                terminal,
            });
            t += 1;
            if let Some(next) = step.next {
                s = next;
                pred_s = p_next;
            }
            if terminal {
                break;
            }
        }
        episode += 1;
    }
    Ok(out)
}

/// Uniform draw in `[-delta_max, delta_max]` on the base's elements.
pub fn random_action(base: &ExplorationBase, delta_max: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a = vec![0.0; N_ELEMENTS];
    for &i in base.allowed() {
        a[i] = rng.gen_range(-delta_max..=delta_max);
    }
    a
}

/// Uniform random actions until the budget is spent.
pub fn random_baseline<G: Guidance>(
    config: &BudgetedSearchConfig,
    env: &Environment,
    bases: &[ExplorationBase],
    engine: &RewardEngine,
    guidance: &BudgetedGuidance<G>,
) -> Result<Vec<StepRecord>> {
    let env = Environment {
        t_ep: config.t_ep,
        ..*env
    };
    let dm = env.delta_max;
    let mut policy = |_: &Composition, b: &ExplorationBase, rng: &mut ChaCha8Rng| random_action(b, dm, rng);
    rollout(&mut policy, &env, bases, engine, guidance, None, config.seed)
}

/// Lattice over a base: every non-base element takes multiples of
/// `resolution` inside its range and the base element takes the remainder to
/// 100, which must fall inside its own range.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub resolution: f64,
    base: usize,
    others: Vec<(usize, i64, i64)>,
    /// Feasible range of the summed grid units of the non-base elements.
    lo: i64,
    hi: i64,
}

const GRID_EPS: f64 = 1e-9;

impl Lattice {
    pub fn new(base: &ExplorationBase, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::Config(format!("grid resolution {resolution} must be positive")));
        }
        let b = base.base();
        let (bmin, bmax) = base.range_of(b).expect("base element is allowed");
        let others = base
            .ranges()
            .filter(|&(i, _, _)| i != b)
            .map(|(i, lo, hi)| {
                (
                    i,
                    (lo / resolution - GRID_EPS).ceil() as i64,
                    (hi / resolution + GRID_EPS).floor() as i64,
                )
            })
            .collect::<Vec<_>>();
        if others.iter().any(|&(_, lo, hi)| lo > hi) {
            return Err(Error::Data(format!(
                "resolution {resolution} leaves an element of base {} without grid values",
                base.symbol()
            )));
        }
        Ok(Lattice {
            resolution,
            base: b,
            others,
            lo: (((100.0 - bmax) / resolution) - GRID_EPS).ceil().max(0.0) as i64,
            hi: (((100.0 - bmin.max(0.0)) / resolution) + GRID_EPS).floor() as i64,
        })
    }

    /// Number of points, counted by convolution over grid sums.
    pub fn count(&self) -> f64 {
        if self.lo > self.hi {
            return 0.0;
        }
        let mut ways = vec![1.0f64];
        for &(_, lo, hi) in &self.others {
            let mut next = vec![0.0; ways.len() + hi as usize];
            for (s, &w) in ways.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for m in lo..=hi {
                    next[s + m as usize] += w;
                }
            }
            ways = next;
        }
        ways.iter()
            .enumerate()
            .filter(|&(s, _)| (s as i64) >= self.lo && (s as i64) <= self.hi)
            .map(|(_, w)| w)
            .sum()
    }

    /// Up to `limit` points in lexicographic order of the non-base units.
    pub fn points(&self, limit: usize) -> Result<Vec<Composition>> {
        let n = self.others.len();
        let mut suffix_min = vec![0i64; n + 1];
        let mut suffix_max = vec![0i64; n + 1];
        for j in (0..n).rev() {
            suffix_min[j] = suffix_min[j + 1] + self.others[j].1;
            suffix_max[j] = suffix_max[j + 1] + self.others[j].2;
        }
        let mut out = Vec::new();
        let mut units = vec![0i64; n];
        self.descend(0, 0, &mut units, &suffix_min, &suffix_max, limit, &mut out)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn descend(
        &self,
        j: usize,
        partial: i64,
        units: &mut Vec<i64>,
        smin: &[i64],
        smax: &[i64],
        limit: usize,
        out: &mut Vec<Composition>,
    ) -> Result<()> {
        if out.len() >= limit {
            return Ok(());
        }
        if j == self.others.len() {
            if partial < self.lo || partial > self.hi {
                return Ok(());
            }
            let mut f = vec![0.0; N_ELEMENTS];
            for (&(i, _, _), &u) in self.others.iter().zip(units.iter()) {
                f[i] = u as f64 * self.resolution;
            }
            f[self.base] = (100.0 - partial as f64 * self.resolution).max(0.0);
            out.push(Composition::normalized(f)?);
            return Ok(());
        }
        let (_, lo, hi) = self.others[j];
        for m in lo..=hi {
            let p = partial + m;
            if p + smin[j + 1] > self.hi {
                break;
            }
            if p + smax[j + 1] < self.lo {
                continue;
            }
            units[j] = m;
            self.descend(j + 1, p, units, smin, smax, limit, out)?;
            if out.len() >= limit {
                break;
            }
        }
        Ok(())
    }
}

/// Finest ladder spacing whose lattice fits in `target` points, or the
/// coarsest spacing with any points when none fits.
pub fn choose_resolution(base: &ExplorationBase, target: u64) -> Result<Lattice> {
    let mut coarsest = None;
    for &r in &RESOLUTION_LADDER {
        let Ok(l) = Lattice::new(base, r) else {
            continue;
        };
        let c = l.count();
        if c == 0.0 {
            continue;
        }
        if c <= target as f64 {
            return Ok(l);
        }
        coarsest = Some(l);
    }
    coarsest.ok_or_else(|| {
        Error::Data(format!(
            "no grid resolution gives lattice points for base {}",
            base.symbol()
        ))
    })
}

/// Evaluates lattice points of every base in order, one prediction each, with
/// the budget split evenly over bases. Consecutive points form steps; every
/// `t_ep` points start a new chunk reported as an episode.
pub fn grid_baseline<G: Guidance>(
    config: &BudgetedSearchConfig,
    bases: &[ExplorationBase],
    engine: &RewardEngine,
    guidance: &BudgetedGuidance<G>,
) -> Result<Vec<StepRecord>> {
    if bases.is_empty() {
        return Err(Error::Config("no exploration bases".into()));
    }
    let t_ep = config.t_ep.max(1);
    let share = config.budget / bases.len() as u64;
    let extra = config.budget % bases.len() as u64;
    let mut out = Vec::new();
    let mut t = 0;
    let mut episode = 0u64;
    'bases: for (bi, base) in bases.iter().enumerate() {
        let quota = share + u64::from((bi as u64) < extra);
        if quota == 0 {
            continue;
        }
        let lattice = match config.grid_resolution {
            Some(r) => Lattice::new(base, r)?,
            None => choose_resolution(base, quota)?,
        };
        let points = lattice.points(quota as usize)?;
        if points.is_empty() {
            return Err(Error::Data(format!(
                "resolution {} gives no lattice points for base {}",
                lattice.resolution,
                base.symbol()
            )));
        }
        log::info!(
            "grid base {}: resolution {} at.%, {} points",
            base.symbol(),
            lattice.resolution,
            points.len()
        );
        for chunk in points.chunks(t_ep) {
            let mut prev: Option<(Composition, Prediction)> = None;
            for (j, c) in chunk.iter().enumerate() {
                let p = match guidance.predict(c) {
                    Ok(p) => p,
                    Err(_) if is_exhausted(guidance) => break 'bases,
                    Err(e) => return Err(e),
                };
                let (s, ps) = prev.clone().unwrap_or_else(|| (c.clone(), p));
                let ctx = EpisodeContext {
                    k: j + 1,
                    t_ep,
                    t,
                    t_max: usize::MAX,
                };
                let b = engine.evaluate_predicted(Some((c, &p)), Some(&ps.properties), &ctx, None)?;
                out.push(StepRecord {
                    episode,
                    k: j + 1,
                    t,
                    base: base.symbol().to_string(),
                    bundle_version: guidance.version(),
                    s: s.fractions().to_vec(),
                    a: c.fractions().iter().zip(s.fractions()).map(|(x, y)| x - y).collect(),
                    s_next: Some(c.fractions().to_vec()),
                    reward: b,
                    terminal: j + 1 == chunk.len(),
                });
                t += 1;
                prev = Some((c.clone(), p));
            }
            episode += 1;
        }
    }
    Ok(out)
}

/// Mean over episodes of the per-step mean reward.
pub fn mean_episode_reward(records: &[StepRecord]) -> Option<f64> {
    let eps = crate::trainer::summarize(records);
    (!eps.is_empty()).then(|| eps.iter().map(|e| e.mean_reward).sum::<f64>() / eps.len() as f64)
}

const TABLE_LABELS: [&str; 5] = ["Dmax", "Tg/Tl", "sigma_Y", "E", "epsilon"];

fn cell(r: Option<&Rate>) -> String {
    match r.and_then(|r| r.percent) {
        Some(p) => format!("{p:.2}"),
        None => "n/a".into(),
    }
}

fn row_cells(rates: &SuccessRates) -> Vec<String> {
    let mut cells = vec![cell(Some(&rates.legal)), cell(Some(&rates.cls))];
    for t in Target::DESIGN {
        cells.push(cell(rates.sr80.get(&t)));
    }
    cells.push(cell(Some(&rates.done)));
    cells
}

fn header() -> Vec<String> {
    let mut h = vec!["method".to_string(), "SR_legal".into(), "SR_cls".into()];
    h.extend(TABLE_LABELS.iter().map(|n| format!("SR80_{n}")));
    h.push("SR_done".into());
    h
}

/// Aligned plain-text table, one row per method, percentages.
pub fn render_table(rows: &[(String, SuccessRates)]) -> String {
    let mut grid = vec![header()];
    for (name, r) in rows {
        let mut line = vec![name.clone()];
        line.extend(row_cells(r));
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|j| grid.iter().map(|l| l[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in grid.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(
                |(j, (c, w))| {
                    if j == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                },
            )
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(
                out,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            );
        }
    }
    out
}

/// Tab-separated version of [`render_table`] with counts and denominators.
pub fn render_tsv(rows: &[(String, SuccessRates)]) -> String {
    let mut out = header().join("\t");
    out.push_str("\tlegal_n\tsteps\tcls_n\tepisodes\n");
    for (name, r) in rows {
        let mut line = vec![name.clone()];
        line.extend(row_cells(r));
        line.push(r.legal.count.to_string());
        line.push(r.legal.denominator.to_string());
        line.push(r.cls.count.to_string());
        line.push(r.done.denominator.to_string());
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    out
}
