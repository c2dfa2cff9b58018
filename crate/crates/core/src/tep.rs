//! Trustworthy experience pool: transitions between every ordered pair of
//! known compositions, scored by the reward engine, plus the reward-aware
//! batch replacement used during training.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{percentile, Composition, PercentileMethod};
use crate::environment::{Environment, EpisodeContext};
use crate::error::{Error, Result};
use crate::guidance::Guidance;
use crate::reward::{illegal_reward, CompositionDatabase, RewardConfig, RewardEngine};

pub const POOL_FORMAT_VERSION: u32 = 1;
pub const HISTOGRAM_RANGE: (f64, f64) = (-1.0, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Live,
    Tep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
    pub done: bool,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TepConfig {
    /// Step index used for pool rewards; `None` means `ceil(T_ep / 2)`.
    pub k: Option<usize>,
    pub phi_hi: f64,
    pub phi_lo: f64,
    pub margin: f64,
    /// Score pairs whose delta exceeds `delta_max` with the illegal reward.
    pub gate_action_magnitude: bool,
    pub histogram_bins: usize,
}

impl Default for TepConfig {
    fn default() -> Self {
        TepConfig {
            k: None,
            phi_hi: 0.25,
            phi_lo: 0.05,
            margin: 0.2,
            gate_action_magnitude: false,
            histogram_bins: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TepEntry {
    pub from: u32,
    pub to: u32,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolKey {
    pub dataset_hash: String,
    pub bundle_version: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperiencePool {
    pub format_version: u32,
    pub key: PoolKey,
    compositions: Vec<Composition>,
    entries: Vec<TepEntry>,
    mean: f64,
    /// Entry indices in ascending reward order.
    by_reward: Vec<u32>,
}

/// Drops exact duplicates, keeping first occurrences.
pub fn dedup_compositions(compositions: &[Composition]) -> Vec<Composition> {
    let mut seen = std::collections::HashSet::new();
    compositions
        .iter()
        .filter(|c| seen.insert(c.fractions().iter().map(|f| f.to_bits()).collect::<Vec<u64>>()))
        .cloned()
        .collect()
}

fn config_hash(reward: &RewardConfig, tep: &TepConfig, env: &Environment) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(reward, tep, env)).expect("configs serialize"));
    hex::encode(h.finalize())
}

impl ExperiencePool {
    pub fn build(
        compositions: &[Composition],
        reward: &RewardConfig,
        database: &CompositionDatabase,
        guidance: &dyn Guidance,
        env: &Environment,
        config: &TepConfig,
        dataset_hash: &str,
    ) -> Result<Self> {
        let comps = dedup_compositions(compositions);
        let n = comps.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "experience pool needs at least 2 distinct compositions, got {n}"
            )));
        }
        let k = config.k.unwrap_or(env.t_ep.div_ceil(2));
        let ctx = EpisodeContext {
            k,
            t_ep: env.t_ep,
            t: 0,
            t_max: usize::MAX,
        };
        // pool rewards get their own visit counts
        let engine = RewardEngine::new(reward.clone(), database.clone())?;
        let preds = guidance.predict_many(&comps)?;
        let r_illegal = illegal_reward(k, env.t_ep)?;

        let mut entries = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let oversized = config.gate_action_magnitude
                    && comps[i]
                        .fractions()
                        .iter()
                        .zip(comps[j].fractions())
                        .any(|(a, b)| (b - a).abs() > env.delta_max);
                let (r, done) = if oversized {
                    (r_illegal, false)
                } else {
                    let b = engine.evaluate_predicted(
                        Some((&comps[j], &preds[j])),
                        Some(&preds[i].properties),
                        &ctx,
                        None,
                    )?;
                    (b.total, b.done)
                };
                entries.push(TepEntry {
                    from: i as u32,
                    to: j as u32,
                    reward: r,
                    done,
                });
            }
        }
        Ok(Self::from_parts(
            comps,
            entries,
            PoolKey {
                dataset_hash: dataset_hash.to_string(),
                bundle_version: guidance.version(),
                config_hash: config_hash(reward, config, env),
            },
        ))
    }

    fn from_parts(compositions: Vec<Composition>, entries: Vec<TepEntry>, key: PoolKey) -> Self {
        let mean = entries.iter().map(|e| e.reward).sum::<f64>() / entries.len().max(1) as f64;
        let mut by_reward: Vec<u32> = (0..entries.len() as u32).collect();
        by_reward.sort_by(|&a, &b| {
            entries[a as usize]
                .reward
                .total_cmp(&entries[b as usize].reward)
                .then(a.cmp(&b))
        });
        ExperiencePool {
            format_version: POOL_FORMAT_VERSION,
            key,
            compositions,
            entries,
            mean,
            by_reward,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn compositions(&self) -> &[Composition] {
        &self.compositions
    }

    pub fn entries(&self) -> &[TepEntry] {
        &self.entries
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.reward)
    }

    pub fn experience(&self, idx: usize) -> Experience {
        let e = &self.entries[idx];
        let s = self.compositions[e.from as usize].fractions().to_vec();
        let s_next = self.compositions[e.to as usize].fractions().to_vec();
        let a = s.iter().zip(&s_next).map(|(x, y)| y - x).collect();
        Experience {
            s,
            a,
            s_next,
            r: e.reward,
            done: e.done,
            source: Source::Tep,
        }
    }

    /// Entries with reward strictly above `threshold`, as indices.
    pub fn above(&self, threshold: f64) -> &[u32] {
        let start = self
            .by_reward
            .partition_point(|&i| self.entries[i as usize].reward <= threshold);
        &self.by_reward[start..]
    }

    /// Replaces a fraction of `batch` with high-reward pool entries
    /// (`r > mean + margin`): `phi_hi` when the episode mean reward is below
    /// the pool mean, `phi_lo` otherwise. Returns the replaced positions.
    pub fn replace_batch<R: Rng + ?Sized>(
        &self,
        batch: &mut [Experience],
        rho_ep: f64,
        config: &TepConfig,
        rng: &mut R,
    ) -> Vec<usize> {
        let phi = if rho_ep < self.mean {
            config.phi_hi
        } else {
            config.phi_lo
        };
        let count = ((phi * batch.len() as f64).round() as usize).min(batch.len());
        if count == 0 {
            return Vec::new();
        }
        let qualifying = self.above(self.mean + config.margin);
        if qualifying.is_empty() {
            log::warn!(
                "no pool entries exceed the pool mean {:.4} by {}; batch left unchanged",
                self.mean,
                config.margin
            );
            return Vec::new();
        }
        let mut positions = sample(rng, batch.len(), count).into_vec();
        positions.sort_unstable();
        for &p in &positions {
            let pick = qualifying[rng.gen_range(0..qualifying.len())] as usize;
            batch[p] = self.experience(pick);
        }
        positions
    }

    pub fn stats(&self, bins: usize) -> Result<PoolStats> {
        if self.entries.is_empty() {
            return Err(Error::Data("pool is empty".into()));
        }
        let rewards: Vec<f64> = self.rewards().collect();
        pool_stats(&rewards, bins)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pool: ExperiencePool = serde_json::from_str(&text)?;
        if pool.format_version != POOL_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported pool format {}", pool.format_version)));
        }
        Ok(pool)
    }

    /// Reuses the archive at `path` when its key matches, otherwise builds and
    /// writes a new pool.
    #[allow(clippy::too_many_arguments)]
    pub fn load_or_build(
        path: &Path,
        compositions: &[Composition],
        reward: &RewardConfig,
        database: &CompositionDatabase,
        guidance: &dyn Guidance,
        env: &Environment,
        config: &TepConfig,
        dataset_hash: &str,
    ) -> Result<(Self, bool)> {
        let key = PoolKey {
            dataset_hash: dataset_hash.to_string(),
            bundle_version: guidance.version(),
            config_hash: config_hash(reward, config, env),
        };
        if path.exists() {
            match Self::load(path) {
                Ok(pool) if pool.key == key => return Ok((pool, true)),
                Ok(_) => log::info!("pool archive {} is stale; rebuilding", path.display()),
                Err(e) => log::warn!("ignoring unreadable pool archive {}: {e}", path.display()),
            }
        }
        let pool = Self::build(compositions, reward, database, guidance, env, config, dataset_hash)?;
        pool.save(path)?;
        Ok((pool, false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Bin edges span the fixed histogram range; out-of-range values are
    /// counted in the edge bins and in `out_of_range`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub out_of_range: usize,
    pub quantiles: Vec<(f64, f64)>,
    pub fraction_in_04_06: f64,
}

pub fn pool_stats(rewards: &[f64], bins: usize) -> Result<PoolStats> {
    if rewards.is_empty() || bins == 0 {
        return Err(Error::Data("histogram needs values and at least one bin".into()));
    }
    let (lo, hi) = HISTOGRAM_RANGE;
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    let mut out_of_range = 0;
    for &r in rewards {
        if !(lo..=hi).contains(&r) {
            out_of_range += 1;
        }
        let b = (((r - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let quantiles = [0.05, 0.25, 0.5, 0.75, 0.95]
        .iter()
        .map(|&q| Ok((q, percentile(rewards, q, PercentileMethod::Linear)?)))
        .collect::<Result<Vec<_>>>()?;
    let inside = rewards.iter().filter(|r| (0.4..=0.6).contains(*r)).count();
    Ok(PoolStats {
        count: rewards.len(),
        mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
        min: rewards.iter().copied().fold(f64::INFINITY, f64::min),
        max: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        edges,
        counts,
        out_of_range,
        quantiles,
        fraction_in_04_06: inside as f64 / rewards.len() as f64,
    })
}
