use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Td3Agent;
use crate::dataset::{Composition, PropertyVector};
use crate::environment::{Environment, EpisodeContext, ExplorationBase};
use crate::error::Result;
use crate::guidance::{Guidance, Prediction};
use crate::reward::{CompositionDatabase, RewardConfig, RewardEngine};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub formula: String,
    pub composition: Composition,
    pub class_prob: f64,
    pub predicted: PropertyVector,
    /// Weighted mean of prediction over threshold across the reward targets.
    pub score: f64,
    /// Not within the match tolerance of any dataset composition.
    pub novel: bool,
    pub episode: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub base: String,
    pub episodes: usize,
    pub steps: usize,
    pub legal_steps: usize,
    pub classified_steps: usize,
    /// Qualifying steps before deduplication.
    pub hits: usize,
    pub candidates: Vec<Candidate>,
}

/// Score of a property vector against the thresholds: `sum w * y / tau`.
pub fn threshold_score(props: &PropertyVector, config: &RewardConfig) -> f64 {
    config
        .thresholds
        .targets()
        .map(|(t, tau, w)| t.value(props).map_or(0.0, |y| w * y / tau))
        .sum()
}

/// Rolls noise-free episodes from random starts in `base` and keeps the
/// legal, BMG-classified steps that meet every threshold, collapsing entries
/// within the match tolerance onto the best-scoring one.
#[allow(clippy::too_many_arguments)]
pub fn design(
    agent: &Td3Agent,
    guidance: &dyn Guidance,
    base: &ExplorationBase,
    env: &Environment,
    reward: &RewardConfig,
    database: &CompositionDatabase,
    episodes: usize,
    seed: u64,
) -> Result<DesignReport> {
    let engine = RewardEngine::new(reward.clone(), database.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DesignReport {
        base: base.symbol().to_string(),
        episodes,
        ..Default::default()
    };
    let mut found: Vec<Candidate> = Vec::new();
    for ep in 0..episodes {
        let mut s = env.reset(base, &mut rng)?;
        let mut pred_s: Option<Prediction> = None;
        for k in 1..=env.t_ep {
            let ctx = EpisodeContext {
                k,
                t_ep: env.t_ep,
                t: 0,
                t_max: usize::MAX,
            };
            let a = agent.policy(s.fractions());
            let out = env.step(&s, &a, base, &ctx)?;
            let (b, p_next) = engine.evaluate(&s, out.next.as_ref(), pred_s.as_ref(), &ctx, guidance, None)?;
            report.steps += 1;
            let Some(next) = out.next else {
                continue;
            };
            report.legal_steps += 1;
            let p = p_next.expect("legal steps are predicted");
            if p.class_prob > 0.5 {
                report.classified_steps += 1;
                if b.all_thresholds_met {
                    report.hits += 1;
                    let cand = Candidate {
                        formula: next.formula(),
                        class_prob: p.class_prob,
                        predicted: p.properties,
                        score: threshold_score(&p.properties, reward),
                        novel: !database.contains_within(&next, reward.match_tolerance),
                        composition: next.clone(),
                        episode: ep,
                        k,
                    };
                    merge(&mut found, cand, reward.match_tolerance);
                }
            }
            let done = env.is_terminal(b.done, &ctx);
            s = next;
            pred_s = Some(p);
            if done {
                break;
            }
        }
    }
    found.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.formula.cmp(&b.formula)));
    report.candidates = found;
    Ok(report)
}

fn merge(found: &mut Vec<Candidate>, cand: Candidate, tol: f64) {
    match found
        .iter_mut()
        .find(|c| c.composition.max_abs_diff(&cand.composition) <= tol)
    {
        Some(existing) if cand.score > existing.score => *existing = cand,
        Some(_) => {}
        None => found.push(cand),
    }
}
