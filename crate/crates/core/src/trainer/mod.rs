//! The training loop: episodes with reward gating, prioritized replay with
//! pool replacement, refinement checks at episode boundaries and TD3 updates.

mod design;
pub mod runlog;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{PerConfig, PrioritizedReplay, Td3Agent, Td3Config};
use crate::amr::{AmrConfig, AmrController, BundleHandle, Window};
use crate::dataset::{ClassLabel, Composition, ElementDescriptorTable, LoadedDataset, Target, ThresholdSet};
use crate::environment::{Environment, EpisodeContext, ExplorationBase};
use crate::error::{Error, Result};
use crate::guidance::{BudgetedGuidance, Guidance, GuidanceBundle, Prediction};
use crate::llm::{KbrEvaluator, LlmClient};
use crate::reward::{CompositionDatabase, KnowledgeScorer, RewardConfig, RewardEngine, VisitCounter};
use crate::tep::{Experience, ExperiencePool, PoolKey, Source, TepConfig};

pub use design::{design, Candidate, DesignReport};
pub use runlog::{read_jsonl, summarize, EpisodeSummary, JsonlWriter, RunEvent, StepRecord};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
const CHECKPOINT_VERSION: u32 = 1;

/// Reward settings other than the thresholds, which come from their own file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    pub alpha: f64,
    pub beta: f64,
    pub cls_gate: f64,
    pub kbr_phase_gate: f64,
    pub match_tolerance: f64,
    pub visit_grid: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        let d = RewardConfig::new(ThresholdSet::uniform([(Target::DESIGN[0], 1.0)].into()).expect("valid"));
        RewardParams {
            alpha: d.alpha,
            beta: d.beta,
            cls_gate: d.cls_gate,
            kbr_phase_gate: d.kbr_phase_gate,
            match_tolerance: d.match_tolerance,
            visit_grid: d.visit_grid,
        }
    }
}

impl RewardParams {
    pub fn with_thresholds(&self, thresholds: ThresholdSet) -> RewardConfig {
        RewardConfig {
            alpha: self.alpha,
            beta: self.beta,
            cls_gate: self.cls_gate,
            kbr_phase_gate: self.kbr_phase_gate,
            match_tolerance: self.match_tolerance,
            visit_grid: self.visit_grid,
            ..RewardConfig::new(thresholds)
        }
    }
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    pub tep: bool,
    pub amr: bool,
    pub kbr: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            tep: true,
            amr: true,
            kbr: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_max: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Gaussian exploration noise in action units.
    pub exploration_noise: f64,
    /// Replay size before updates begin.
    pub learning_starts: usize,
    /// `None` runs one update per step taken in the episode.
    pub updates_per_episode: Option<usize>,
    /// Episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Restrict every episode to one base element; `None` draws uniformly.
    pub base: Option<String>,
    pub components: Components,
    /// Text for the knowledge-reward `{rule}` slot.
    pub kbr_rule: String,
    pub env: Environment,
    pub reward: RewardParams,
    pub agent: Td3Config,
    pub replay: PerConfig,
    pub tep: TepConfig,
    pub amr: AmrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_max: 100_000,
            epochs: 1000,
            batch: 512,
            seed: 0,
            exploration_noise: 0.1,
            learning_starts: 512,
            updates_per_episode: None,
            checkpoint_every: 50,
            base: None,
            components: Components::default(),
            kbr_rule: DEFAULT_KBR_RULE.into(),
            env: Environment::default(),
            reward: RewardParams::default(),
            agent: Td3Config::default(),
            replay: PerConfig::default(),
            tep: TepConfig::default(),
            amr: AmrConfig::default(),
        }
    }
}

pub const DEFAULT_KBR_RULE: &str = "Favour compositions near known bulk metallic glasses, with at least three \
elements of atomic size mismatch above 12% and negative heats of mixing between the main constituents; \
penalize compositions dominated by a single element beyond 80 at.% or containing elements rarely seen in glass formers.";

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.env.t_ep == 0 || self.t_max < self.env.t_ep {
            return Err(Error::Config(format!(
                "T_max ({}) must be at least T_ep ({}) and T_ep positive",
                self.t_max, self.env.t_ep
            )));
        }
        if self.batch == 0 || self.batch > self.replay.capacity {
            return Err(Error::Config(format!(
                "batch {} must be positive and at most the replay capacity {}",
                self.batch, self.replay.capacity
            )));
        }
        if self.agent.action_bound > self.env.delta_max {
            return Err(Error::Config(format!(
                "actor bound {} exceeds delta_max {}",
                self.agent.action_bound, self.env.delta_max
            )));
        }
        if self.epochs == 0 || !(self.exploration_noise >= 0.0) || !(self.env.delta_max > 0.0) {
            return Err(Error::Config(
                "epochs, exploration noise and delta_max must be positive".into(),
            ));
        }
        self.amr.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Counters that place the run within the schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub episode: u64,
    pub t: usize,
    pub predictions: u64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: TrainConfig,
    reward: RewardConfig,
    bases: Vec<ExplorationBase>,
    progress: Progress,
    agent: Td3Agent,
    replay: PrioritizedReplay,
    rng: ChaCha8Rng,
    visits: VisitCounter,
    bundle: GuidanceBundle,
    pool_key: Option<PoolKey>,
    /// Byte lengths of the trajectory, episode and event logs.
    log_lengths: [u64; 3],
}

fn read_checkpoint(out_dir: &Path) -> Result<Checkpoint> {
    let path = out_dir.join(CHECKPOINT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {}",
            ck.format_version
        )));
    }
    Ok(ck)
}

/// The parts of a checkpoint needed to use a trained agent.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub config: TrainConfig,
    pub reward: RewardConfig,
    pub bases: Vec<ExplorationBase>,
    pub progress: Progress,
    pub agent: Td3Agent,
    pub bundle: GuidanceBundle,
}

/// Reads the checkpoint in `out_dir` without touching the run's logs.
pub fn load_trained(out_dir: &Path) -> Result<TrainedRun> {
    let ck = read_checkpoint(out_dir)?;
    Ok(TrainedRun {
        config: ck.config,
        reward: ck.reward,
        bases: ck.bases,
        progress: ck.progress,
        agent: ck.agent,
        bundle: ck.bundle,
    })
}

struct RunLogs {
    trajectory: JsonlWriter,
    episodes: JsonlWriter,
    events: JsonlWriter,
}

impl RunLogs {
    fn open(dir: &Path, lengths: Option<[u64; 3]>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let len = |i: usize| lengths.map(|l| l[i]).or(Some(0));
        Ok(RunLogs {
            trajectory: JsonlWriter::open(&dir.join(TRAJECTORY_FILE), len(0))?,
            episodes: JsonlWriter::open(&dir.join(EPISODES_FILE), len(1))?,
            events: JsonlWriter::open(&dir.join(EVENTS_FILE), len(2))?,
        })
    }

    fn flush(&mut self) -> Result<[u64; 3]> {
        Ok([self.trajectory.flush()?, self.episodes.flush()?, self.events.flush()?])
    }
}

/// The step inputs needed to rescore an episode under another model.
struct Transition {
    s: Composition,
    next: Option<Composition>,
    ctx: EpisodeContext,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    data: &'a LoadedDataset,
    bases: Vec<ExplorationBase>,
    engine: RewardEngine,
    handle: BundleHandle,
    pool: Option<ExperiencePool>,
    pool_source: Vec<Composition>,
    pub agent: Td3Agent,
    replay: PrioritizedReplay,
    rng: ChaCha8Rng,
    kbr: Option<KbrEvaluator>,
    amr: Option<AmrController<'a>>,
    progress: Progress,
    out_dir: Option<PathBuf>,
    logs: Option<RunLogs>,
}

impl<'a> Trainer<'a> {
    /// Fresh run. `out_dir` receives logs and checkpoints; without one the
    /// run keeps nothing on disk.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: TrainConfig,
        data: &'a LoadedDataset,
        table: &'a ElementDescriptorTable,
        thresholds: ThresholdSet,
        bundle: GuidanceBundle,
        bases: Vec<ExplorationBase>,
        llm: Arc<dyn LlmClient>,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let agent = Td3Agent::new(config.agent.clone())?;
        let reward = config.reward.with_thresholds(thresholds);
        let mut trainer = Self::assemble(
            config, reward, data, table, bundle, bases, llm, agent, None, None, out_dir, None,
        )?;
        let hash = trainer.agent.state_hash();
        trainer.log_event(&RunEvent::Start {
            episode: 0,
            t: 0,
            state_hash: hash,
            resumed: false,
        })?;
        if trainer.out_dir.is_some() {
            trainer.checkpoint()?;
        }
        Ok(trainer)
    }

    /// Continues a run from the checkpoint in `out_dir`; logs are cut back to
    /// the checkpoint's position.
    pub fn resume(
        out_dir: &Path,
        data: &'a LoadedDataset,
        table: &'a ElementDescriptorTable,
        llm: Arc<dyn LlmClient>,
    ) -> Result<Self> {
        let ck = read_checkpoint(out_dir)?;
        if ck.bundle.dataset_hash != data.content_hash {
            return Err(Error::Data("checkpoint was trained on a different dataset".into()));
        }
        let mut trainer = Self::assemble(
            ck.config,
            ck.reward,
            data,
            table,
            ck.bundle,
            ck.bases,
            llm,
            ck.agent,
            Some((ck.replay, ck.rng, ck.visits, ck.progress)),
            ck.pool_key,
            Some(out_dir),
            Some(ck.log_lengths),
        )?;
        let hash = trainer.agent.state_hash();
        let p = trainer.progress;
        trainer.log_event(&RunEvent::Start {
            episode: p.episode,
            t: p.t,
            state_hash: hash,
            resumed: true,
        })?;
        Ok(trainer)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        reward: RewardConfig,
        data: &'a LoadedDataset,
        table: &'a ElementDescriptorTable,
        bundle: GuidanceBundle,
        mut bases: Vec<ExplorationBase>,
        llm: Arc<dyn LlmClient>,
        agent: Td3Agent,
        state: Option<(PrioritizedReplay, ChaCha8Rng, VisitCounter, Progress)>,
        pool_key: Option<PoolKey>,
        out_dir: Option<&Path>,
        log_lengths: Option<[u64; 3]>,
    ) -> Result<Self> {
        if let Some(sym) = &config.base {
            bases.retain(|b| b.symbol() == sym);
            if bases.is_empty() {
                return Err(Error::Config(format!("no exploration base for element {sym}")));
            }
        }
        if bases.is_empty() {
            return Err(Error::Config("no exploration bases".into()));
        }
        let database = CompositionDatabase::new(data.all_compositions());
        let mut engine = RewardEngine::new(reward, database)?;
        let (replay, rng, progress) = match state {
            Some((replay, rng, visits, progress)) => {
                engine.visits = visits;
                (replay, rng, progress)
            }
            None => (
                PrioritizedReplay::new(config.replay.clone()),
                ChaCha8Rng::seed_from_u64(config.seed),
                Progress::default(),
            ),
        };
        let mut pool_source = data.compositions_with_label(ClassLabel::Bmg);
        if pool_source.len() < 2 {
            pool_source = data.regression.iter().map(|r| r.composition.clone()).collect();
        }
        let handle = BundleHandle::new(bundle);
        let kbr = config
            .components
            .kbr
            .then(|| KbrEvaluator::new(llm.clone(), config.kbr_rule.clone(), data.regression.clone()));
        let amr = if config.components.amr {
            Some(AmrController::new(
                config.amr.clone(),
                handle.clone(),
                &data.regression,
                table,
                llm,
            )?)
        } else {
            None
        };
        let logs = out_dir.map(|d| RunLogs::open(d, log_lengths)).transpose()?;
        let mut trainer = Trainer {
            config,
            data,
            bases,
            engine,
            handle,
            pool: None,
            pool_source,
            agent,
            replay,
            rng,
            kbr,
            amr,
            progress,
            out_dir: out_dir.map(Path::to_path_buf),
            logs,
        };
        if trainer.config.components.tep {
            trainer.rebuild_pool()?;
            if let (Some(key), Some(pool)) = (pool_key, &trainer.pool) {
                if key != pool.key {
                    return Err(Error::Data(
                        "rebuilt experience pool does not match the checkpoint".into(),
                    ));
                }
            }
        }
        Ok(trainer)
    }

    pub fn agent(&self) -> &Td3Agent {
        &self.agent
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn bundle(&self) -> Arc<GuidanceBundle> {
        self.handle.current()
    }

    pub fn handle(&self) -> &BundleHandle {
        &self.handle
    }

    pub fn pool(&self) -> Option<&ExperiencePool> {
        self.pool.as_ref()
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.engine.config
    }

    pub fn bases(&self) -> &[ExplorationBase] {
        &self.bases
    }

    pub fn finished(&self) -> bool {
        self.progress.episode as usize >= self.config.epochs || self.progress.t >= self.config.t_max
    }

    fn rebuild_pool(&mut self) -> Result<()> {
        let bundle = self.handle.current();
        let pool = ExperiencePool::build(
            &self.pool_source,
            &self.engine.config,
            &self.engine.database,
            bundle.as_ref(),
            &self.config.env,
            &self.config.tep,
            &self.data.content_hash,
        )?;
        let event = RunEvent::PoolBuilt {
            episode: self.progress.episode,
            bundle_version: bundle.version,
            size: pool.len(),
            mean: pool.mean(),
        };
        self.pool = Some(pool);
        self.log_event(&event)
    }

    fn log_event(&mut self, event: &RunEvent) -> Result<()> {
        if let Some(logs) = self.logs.as_mut() {
            logs.events.append(event)?;
        }
        Ok(())
    }

    /// Runs episodes until the epoch or step budget is spent.
    pub fn run(&mut self) -> Result<Vec<EpisodeSummary>> {
        self.run_episodes(usize::MAX)
    }

    /// Runs at most `n` more episodes.
    pub fn run_episodes(&mut self, n: usize) -> Result<Vec<EpisodeSummary>> {
        let mut out = Vec::new();
        while out.len() < n && !self.finished() {
            let summary = self.run_episode()?;
            log::info!(
                "episode {} [{}]: {} steps, mean reward {:.4}, t = {}",
                summary.episode,
                summary.base,
                summary.steps,
                summary.mean_reward,
                summary.t_end
            );
            out.push(summary);
            let every = self.config.checkpoint_every;
            if self.out_dir.is_some() && (self.finished() || (every > 0 && self.progress.episode % every as u64 == 0)) {
                self.checkpoint()?;
            }
        }
        Ok(out)
    }

    pub fn run_episode(&mut self) -> Result<EpisodeSummary> {
        let cfg = self.config.clone();
        let env = cfg.env;
        let episode = self.progress.episode;
        let bundle = self.handle.current();
        let guidance = BudgetedGuidance::new(bundle.clone(), u64::MAX);
        let base = self.bases[self.rng.gen_range(0..self.bases.len())].clone();

        let mut s = env.reset(&base, &mut self.rng)?;
        let mut pred_s: Option<Prediction> = None;
        let mut transitions: Vec<Transition> = Vec::new();
        let mut rewards: Vec<f64> = Vec::new();
        let mut summary = EpisodeSummary {
            episode,
            base: base.symbol().to_string(),
            bundle_version: bundle.version,
            ..Default::default()
        };

        for k in 1..=env.t_ep {
            if self.progress.t >= cfg.t_max {
                break;
            }
            let ctx = EpisodeContext {
                k,
                t_ep: env.t_ep,
                t: self.progress.t,
                t_max: cfg.t_max,
            };
            let a = self.agent.act(s.fractions(), cfg.exploration_noise, &mut self.rng);
            let out = env.step(&s, &a, &base, &ctx)?;
            let kbr = self.kbr.as_ref().map(|k| k as &dyn KnowledgeScorer);
            let (b, p_next) = self
                .engine
                .evaluate(&s, out.next.as_ref(), pred_s.as_ref(), &ctx, &guidance, kbr)?;
            let terminal = env.is_terminal(b.done, &ctx);
            let s_next = out.next.clone().unwrap_or_else(|| s.clone());

            self.replay.push(Experience {
                s: s.fractions().to_vec(),
                a,
                s_next: s_next.fractions().to_vec(),
                r: b.total,
                done: b.done,
                source: Source::Live,
            });
            rewards.push(b.total);
            summary.steps += 1;
            summary.total_reward += b.total;
            summary.legal_steps += b.legal as usize;
            summary.classified_steps += b.cls_prob.is_some_and(|p| p > 0.5) as usize;
            summary.kbr_steps += b.kbr_applied as usize;
            summary.success |= b.done;
            if let Some(logs) = self.logs.as_mut() {
                logs.trajectory.append(&StepRecord {
                    episode,
                    k,
                    t: ctx.t,
                    base: summary.base.clone(),
                    bundle_version: bundle.version,
                    s: s.fractions().to_vec(),
                    a: out.delta.clone(),
                    s_next: out.next.as_ref().map(|c| c.fractions().to_vec()),
                    reward: b.clone(),
                    terminal,
                })?;
            }
            transitions.push(Transition {
                s: s.clone(),
                next: out.next.clone(),
                ctx,
            });
            self.progress.t += 1;
            if out.next.is_some() {
                s = s_next;
                pred_s = p_next;
            }
            if terminal {
                break;
            }
        }
        summary.t_end = self.progress.t;
        if summary.steps == 0 {
            return Err(Error::InvalidArgument(
                "episode started with no step budget left".into(),
            ));
        }
        summary.mean_reward = summary.total_reward / summary.steps as f64;

        let states: Vec<&[f64]> = transitions.iter().map(|tr| tr.s.fractions()).collect();
        let values = self.agent.values(&states);
        summary.mean_value = values.iter().sum::<f64>() / values.len() as f64;
        let window = Window {
            states: transitions.iter().map(|tr| tr.s.clone()).collect(),
            rewards,
            values,
            label: format!("{}-based", base.symbol()),
        };
        summary.predictions = guidance.used();
        self.progress.predictions += guidance.used();

        if let Some(amr) = &self.amr {
            let engine = &self.engine;
            let rescore = |g: &dyn Guidance| -> Result<Vec<f64>> {
                let fresh = RewardEngine::new(engine.config.clone(), engine.database.clone())?;
                transitions
                    .iter()
                    .map(|tr| Ok(fresh.evaluate(&tr.s, tr.next.as_ref(), None, &tr.ctx, g, None)?.0.total))
                    .collect()
            };
            let event = amr.on_episode_end(episode, self.progress.t as u64, cfg.t_max as u64, &window, &rescore)?;
            if let Some(event) = event {
                let accepted = event.accepted;
                self.log_event(&RunEvent::Refinement(Box::new(event)))?;
                if accepted && cfg.components.tep {
                    self.rebuild_pool()?;
                }
            }
        }

        let rho_ep = summary.mean_reward;
        let n_updates = cfg.updates_per_episode.unwrap_or(summary.steps);
        let mut losses = Vec::new();
        if self.replay.len() >= cfg.learning_starts.max(1) {
            for _ in 0..n_updates {
                let mut sampled = self.replay.sample(cfg.batch, &mut self.rng)?;
                let mut replaced = Vec::new();
                if let (true, Some(pool)) = (cfg.components.tep, &self.pool) {
                    replaced = pool.replace_batch(&mut sampled.experiences, rho_ep, &cfg.tep, &mut self.rng);
                    for &p in &replaced {
                        sampled.weights[p] = 1.0;
                    }
                }
                let (report, td) = self.agent.update(&sampled.experiences, &sampled.weights)?;
                losses.push(0.5 * (report.critic1_loss + report.critic2_loss));
                let (idx, td): (Vec<usize>, Vec<f64>) = sampled
                    .indices
                    .iter()
                    .zip(&td)
                    .enumerate()
                    .filter(|(j, _)| replaced.binary_search(j).is_err())
                    .map(|(_, (&i, &d))| (i, d))
                    .unzip();
                self.replay.update_priorities(&idx, &td);
                summary.tep_replaced += replaced.len();
            }
        }
        summary.updates = losses.len();
        summary.mean_critic_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);

        if let Some(logs) = self.logs.as_mut() {
            logs.episodes.append(&summary)?;
        }
        self.progress.episode += 1;
        Ok(summary)
    }

    pub fn checkpoint(&mut self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .ok_or_else(|| Error::Config("run has no output directory".into()))?;
        let state_hash = self.agent.state_hash();
        let event = RunEvent::Checkpoint {
            episode: self.progress.episode,
            t: self.progress.t,
            state_hash,
        };
        self.log_event(&event)?;
        let log_lengths = self.logs.as_mut().expect("logs open with out_dir").flush()?;
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            reward: self.engine.config.clone(),
            bases: self.bases.clone(),
            progress: self.progress,
            agent: self.agent.clone(),
            replay: self.replay.clone(),
            rng: self.rng.clone(),
            visits: self.engine.visits.clone(),
            bundle: (*self.handle.current()).clone(),
            pool_key: self.pool.as_ref().map(|p| p.key.clone()),
            log_lengths,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string(&ck)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
