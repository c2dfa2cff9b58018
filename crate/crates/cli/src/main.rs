mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use glassrl::dataset::{
    bundled_mini_dataset, compute_thresholds, load_dataset, ClassLabel, Composition, DatasetSchema,
    ElementDescriptorTable, LoadedDataset, ThresholdSet,
};
use glassrl::environment::{derive_bases, load_bases, save_bases, ExplorationBase};
use glassrl::evaluation::{
    grid_baseline, random_baseline, render_table, render_tsv, rollout, success_rates, SuccessRates,
};
use glassrl::guidance::{BudgetedGuidance, GuidanceBundle};
use glassrl::llm::LlmError;
use glassrl::reward::{CompositionDatabase, RewardEngine};
use glassrl::tep::ExperiencePool;
use glassrl::trainer::{
    design, load_trained, read_jsonl, EpisodeSummary, RunEvent, StepRecord, Trainer, CHECKPOINT_FILE, EPISODES_FILE,
    EVENTS_FILE, TRAJECTORY_FILE,
};
use glassrl::Error;
use rand_chacha::ChaCha8Rng;

use crate::config::{CliConfig, LlmMode};

const DATASET_FILE: &str = "dataset.json";
const THRESHOLDS_FILE: &str = "thresholds.json";
const BASES_FILE: &str = "bases.json";
const GUIDANCE_FILE: &str = "guidance.json";
const POOL_FILE: &str = "pool.json";
const RUN_DIR: &str = "run";
const DESIGN_FILE: &str = "design.json";
const EVALUATION_FILE: &str = "evaluation.tsv";

const EXIT_DATA: u8 = 65;
const EXIT_RUNTIME: u8 = 70;
const EXIT_CONFIG: u8 = 78;

#[derive(Parser, Debug)]
#[command(
    name = "glassrl",
    version,
    about = "Reinforcement-learning design of metallic glass compositions"
)]
struct Cli {
    /// Directory holding every artifact of a study.
    #[arg(long, global = true, default_value = "glassrl-work")]
    work: PathBuf,

    /// TOML file with `[train]`, `[guidance]`, `[thresholds]`, `[baseline]` and `[llm]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `live` reads the endpoint from GLASSRL_LLM_URL and GLASSRL_LLM_API_KEY.
    #[arg(long, global = true, value_enum)]
    llm: Option<LlmMode>,

    #[arg(long, global = true)]
    no_tep: bool,
    #[arg(long, global = true)]
    no_amr: bool,
    #[arg(long, global = true)]
    no_kbr: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a dataset and derive thresholds and exploration bases.
    Ingest {
        /// CSV file; the bundled synthetic mini dataset when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "label")]
        label_column: String,
    },
    /// Train the classifier and the property regressor.
    TrainGuidance,
    /// Build (or reuse) the trusted experience pool and print its statistics.
    BuildTep {
        #[arg(long, default_value_t = 25)]
        bins: usize,
    },
    /// Run the training loop; `--resume` continues from the last checkpoint.
    Train {
        #[arg(long)]
        resume: bool,
        /// Stop after this many episodes instead of the configured schedule.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Propose candidate compositions with the trained agent.
    Design {
        /// Base element; every base when omitted.
        #[arg(long)]
        base: Option<String>,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Success rates of the training log, baselines and optional greedy rollouts.
    Evaluate {
        /// Noise-free episodes of the trained agent to add as a row.
        #[arg(long, default_value_t = 0)]
        greedy: usize,
    },
    /// Equal-budget random or grid search.
    Baseline {
        #[arg(long, value_enum, default_value = "random")]
        kind: BaselineKind,
        /// Total guidance predictions.
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Summarize the run: reward progression, refinements, pool and success rates.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    Random,
    Grid,
}

impl BaselineKind {
    fn file(self) -> &'static str {
        match self {
            BaselineKind::Random => "baseline-random.jsonl",
            BaselineKind::Grid => "baseline-grid.jsonl",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Llm(LlmError::Config(_) | LlmError::MissingEndpoint(_)) => EXIT_CONFIG,
        Error::Data(_) | Error::Csv(_) | Error::Json(_) | Error::UnknownFeature(_) => EXIT_DATA,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("glassrl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn settings(cli: &Cli) -> glassrl::Result<CliConfig> {
    let mut c = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        c.train.seed = seed;
        c.guidance.seed = seed;
        c.baseline.seed = seed;
    }
    if let Some(mode) = cli.llm {
        c.llm.mode = mode;
    }
    c.train.components.tep &= !cli.no_tep;
    c.train.components.amr &= !cli.no_amr;
    c.train.components.kbr &= !cli.no_kbr;
    c.validate()?;
    Ok(c)
}

fn run(cli: &Cli) -> glassrl::Result<()> {
    let cfg = settings(cli)?;
    let work = cli.work.as_path();
    match &cli.command {
        Command::Ingest { data, label_column } => ingest(work, &cfg, data.as_deref(), label_column),
        Command::TrainGuidance => train_guidance(work, &cfg),
        Command::BuildTep { bins } => build_tep(work, &cfg, *bins),
        Command::Train { resume, episodes } => train(work, &cfg, *resume, *episodes),
        Command::Design { base, episodes, top } => design_cmd(work, base.as_deref(), *episodes, *top),
        Command::Evaluate { greedy } => evaluate(work, *greedy),
        Command::Baseline { kind, budget } => baseline(work, &cfg, *kind, *budget),
        Command::Report => report(work),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> glassrl::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> glassrl::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl(path: &Path, records: &[StepRecord]) -> glassrl::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Work-directory inputs a later stage depends on, with a hint naming the
/// stage that produces them.
struct Study {
    data: LoadedDataset,
    thresholds: ThresholdSet,
    bases: Vec<ExplorationBase>,
}

fn require(work: &Path, file: &str, stage: &str) -> glassrl::Result<PathBuf> {
    let path = work.join(file);
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} is missing; run `glassrl {stage}` first",
            path.display()
        )));
    }
    Ok(path)
}

fn study(work: &Path) -> glassrl::Result<Study> {
    Ok(Study {
        data: read_json(&require(work, DATASET_FILE, "ingest")?)?,
        thresholds: ThresholdSet::load(&require(work, THRESHOLDS_FILE, "ingest")?)?,
        bases: load_bases(&require(work, BASES_FILE, "ingest")?)?,
    })
}

fn guidance(work: &Path) -> glassrl::Result<GuidanceBundle> {
    GuidanceBundle::load(&require(work, GUIDANCE_FILE, "train-guidance")?)
}

fn ingest(work: &Path, cfg: &CliConfig, data: Option<&Path>, label_column: &str) -> glassrl::Result<()> {
    let dataset = match data {
        Some(p) => {
            let schema = DatasetSchema {
                label_column: label_column.to_string(),
                ..DatasetSchema::default()
            };
            load_dataset(p, &schema)?
        }
        None => {
            log::info!("no --data given; using the bundled synthetic mini dataset");
            bundled_mini_dataset()
        }
    };
    let r = &dataset.report;
    println!(
        "rows read {}, accepted {}, rejected {}",
        r.rows_read,
        r.rows_accepted,
        r.rejected.len()
    );
    for d in r.rejected.iter().take(10) {
        println!("  row {}: {}", d.row, d.message);
    }
    for (label, n) in &r.class_counts {
        println!("class {label}: {n}");
    }
    for (p, n) in &r.property_counts {
        println!("property {p}: {n} values");
    }
    let thresholds = compute_thresholds(&dataset.regression, cfg.thresholds.percentile, cfg.thresholds.method)?;
    println!("thresholds at p = {}:", cfg.thresholds.percentile);
    for (t, tau, w) in thresholds.targets() {
        println!("  {:<10} {tau:>10.3} {:<4} weight {w:.3}", t.to_string(), t.unit());
    }
    let bases = derive_bases(&dataset.all_compositions(), cfg.bases)?;
    let symbols: Vec<&str> = bases.iter().map(|b| b.symbol()).collect();
    println!("{} exploration bases: {}", bases.len(), symbols.join(" "));

    std::fs::create_dir_all(work).map_err(|e| Error::io(work, e))?;
    write_json(&work.join(DATASET_FILE), &dataset)?;
    thresholds.save(&work.join(THRESHOLDS_FILE))?;
    save_bases(&bases, &work.join(BASES_FILE))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn train_guidance(work: &Path, cfg: &CliConfig) -> glassrl::Result<()> {
    let s = study(work)?;
    let table = ElementDescriptorTable::bundled();
    let bundle = GuidanceBundle::train(&s.data, &table, &cfg.guidance)?;
    if let Some(c) = bundle.cv.classifier.as_ref().and_then(|m| m.classification.as_ref()) {
        println!(
            "classifier {}-fold CV: AUC {} precision {} recall {} F1 {}",
            cfg.guidance.classifier_folds,
            fmt_opt(c.auc),
            fmt_opt(c.precision),
            fmt_opt(c.recall),
            fmt_opt(c.f1)
        );
    }
    if let Some(m) = &bundle.cv.regressor {
        println!("regressor {}-fold CV:", m.folds);
        for (p, r) in &m.regression {
            println!(
                "  {:<8} R² {:>7} RMSE {:>9} MAPE {:>7} (n = {})",
                p.to_string(),
                fmt_opt(r.r2),
                fmt_opt(r.rmse),
                fmt_opt(r.mape),
                r.n
            );
        }
    }
    bundle.save(&work.join(GUIDANCE_FILE))?;
    println!("saved guidance bundle version {}", bundle.version);
    Ok(())
}

fn build_tep(work: &Path, cfg: &CliConfig, bins: usize) -> glassrl::Result<()> {
    let s = study(work)?;
    let bundle = guidance(work)?;
    let reward = cfg.train.reward.with_thresholds(s.thresholds.clone());
    let database = CompositionDatabase::new(s.data.all_compositions());
    let mut source = s.data.compositions_with_label(ClassLabel::Bmg);
    if source.len() < 2 {
        source = s.data.regression.iter().map(|r| r.composition.clone()).collect();
    }
    let (pool, reused) = ExperiencePool::load_or_build(
        &work.join(POOL_FILE),
        &source,
        &reward,
        &database,
        &bundle,
        &cfg.train.env,
        &cfg.train.tep,
        &s.data.content_hash,
    )?;
    let st = pool.stats(bins)?;
    println!(
        "{} pool: {} experiences from {} compositions",
        if reused { "reused" } else { "built" },
        st.count,
        pool.compositions().len()
    );
    println!(
        "reward mean {:.4}, min {:.4}, max {:.4}, {:.1}% in [0.4, 0.6], {} outside the histogram range",
        st.mean,
        st.min,
        st.max,
        100.0 * st.fraction_in_04_06,
        st.out_of_range
    );
    let peak = st.counts.iter().copied().max().unwrap_or(0).max(1);
    for (i, n) in st.counts.iter().enumerate() {
        let bar = "#".repeat(n * 50 / peak);
        println!("  [{:>5.2}, {:>5.2}) {n:>8} {bar}", st.edges[i], st.edges[i + 1]);
    }
    Ok(())
}

fn train(work: &Path, cfg: &CliConfig, resume: bool, episodes: Option<usize>) -> glassrl::Result<()> {
    let s = study(work)?;
    let table = ElementDescriptorTable::bundled();
    let llm = cfg.llm_client()?;
    let out = work.join(RUN_DIR);
    let mut trainer = if resume {
        Trainer::resume(&out, &s.data, &table, llm)?
    } else {
        if out.join(CHECKPOINT_FILE).exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or remove it",
                out.display()
            )));
        }
        let bundle = guidance(work)?;
        Trainer::new(
            cfg.train.clone(),
            &s.data,
            &table,
            s.thresholds,
            bundle,
            s.bases,
            llm,
            Some(&out),
        )?
    };
    let p = trainer.progress();
    log::info!("starting at episode {} (t = {})", p.episode, p.t);
    let summaries = match episodes {
        Some(n) => {
            let done = trainer.run_episodes(n)?;
            trainer.checkpoint()?;
            done
        }
        None => trainer.run()?,
    };
    if let Some(last) = summaries.last() {
        let legal: usize = summaries.iter().map(|e| e.legal_steps).sum();
        let steps: usize = summaries.iter().map(|e| e.steps).sum();
        let mean = summaries.iter().map(|e| e.mean_reward).sum::<f64>() / summaries.len() as f64;
        println!(
            "ran {} episodes to t = {}: mean episode reward {mean:.4}, {:.1}% legal steps, guidance version {}",
            summaries.len(),
            last.t_end,
            100.0 * legal as f64 / steps.max(1) as f64,
            last.bundle_version
        );
    }
    println!("finished: {}", trainer.finished());
    Ok(())
}

fn design_cmd(work: &Path, base: Option<&str>, episodes: usize, top: usize) -> glassrl::Result<()> {
    let s = study(work)?;
    let run = load_trained(&require(work, RUN_DIR, "train")?)?;
    let database = CompositionDatabase::new(s.data.all_compositions());
    let bases: Vec<&ExplorationBase> = match base {
        Some(sym) => {
            let b = run
                .bases
                .iter()
                .find(|b| b.symbol() == sym)
                .ok_or_else(|| Error::Config(format!("no exploration base for element {sym}")))?;
            vec![b]
        }
        None => run.bases.iter().collect(),
    };
    let mut reports = Vec::new();
    for (i, b) in bases.into_iter().enumerate() {
        let seed = run.config.seed.wrapping_add(i as u64);
        let r = design(
            &run.agent,
            &run.bundle,
            b,
            &run.config.env,
            &run.reward,
            &database,
            episodes,
            seed,
        )?;
        println!(
            "base {:<3} steps {:>6} legal {:>6} BMG {:>6} hits {:>5} candidates {:>4}",
            r.base,
            r.steps,
            r.legal_steps,
            r.classified_steps,
            r.hits,
            r.candidates.len()
        );
        for c in r.candidates.iter().take(top) {
            println!(
                "    {:<32} score {:.3} p(BMG) {:.3}{}",
                c.formula,
                c.score,
                c.class_prob,
                if c.novel { " new" } else { "" }
            );
        }
        reports.push(r);
    }
    write_json(&work.join(DESIGN_FILE), &reports)
}

fn rates_row(
    label: &str,
    records: &[StepRecord],
    thresholds: &ThresholdSet,
) -> glassrl::Result<(String, SuccessRates)> {
    Ok((label.to_string(), success_rates(records, thresholds)?))
}

fn evaluate(work: &Path, greedy: usize) -> glassrl::Result<()> {
    let s = study(work)?;
    let out = require(work, RUN_DIR, "train")?;
    let run = load_trained(&out)?;
    let thresholds = &run.reward.thresholds;
    let mut rows = vec![rates_row(
        "training",
        &read_jsonl(&out.join(TRAJECTORY_FILE))?,
        thresholds,
    )?];
    if greedy > 0 {
        let database = CompositionDatabase::new(s.data.all_compositions());
        let engine = RewardEngine::new(run.reward.clone(), database)?;
        let g = BudgetedGuidance::new(run.bundle.clone(), u64::MAX);
        let agent = &run.agent;
        let mut policy = |c: &Composition, _: &ExplorationBase, _: &mut ChaCha8Rng| agent.policy(c.fractions());
        let records = rollout(
            &mut policy,
            &run.config.env,
            &run.bases,
            &engine,
            &g,
            Some(greedy),
            run.config.seed,
        )?;
        rows.push(rates_row("greedy", &records, thresholds)?);
    }
    for kind in [BaselineKind::Random, BaselineKind::Grid] {
        let path = work.join(kind.file());
        if path.exists() {
            rows.push(rates_row(
                &format!("{kind:?}").to_lowercase(),
                &read_jsonl(&path)?,
                thresholds,
            )?);
        }
    }
    print!("{}", render_table(&rows));
    let path = work.join(EVALUATION_FILE);
    std::fs::write(&path, render_tsv(&rows)).map_err(|e| Error::io(&path, e))
}

fn baseline(work: &Path, cfg: &CliConfig, kind: BaselineKind, budget: Option<u64>) -> glassrl::Result<()> {
    let s = study(work)?;
    let bundle = guidance(work)?;
    let mut search = cfg.baseline.clone();
    if let Some(b) = budget {
        search.budget = b;
    }
    let reward = cfg.train.reward.with_thresholds(s.thresholds.clone());
    let engine = RewardEngine::new(reward, CompositionDatabase::new(s.data.all_compositions()))?;
    let g = BudgetedGuidance::new(bundle, search.budget);
    let records = match kind {
        BaselineKind::Random => random_baseline(&search, &cfg.train.env, &s.bases, &engine, &g)?,
        BaselineKind::Grid => grid_baseline(&search, &s.bases, &engine, &g)?,
    };
    println!(
        "{kind:?} search: {} steps, {} of {} predictions used",
        records.len(),
        g.used(),
        g.budget()
    );
    if !records.is_empty() {
        print!(
            "{}",
            render_table(&[rates_row(&format!("{kind:?}").to_lowercase(), &records, &s.thresholds)?])
        );
    }
    write_jsonl(&work.join(kind.file()), &records)
}

fn report(work: &Path) -> glassrl::Result<()> {
    let out = require(work, RUN_DIR, "train")?;
    let run = load_trained(&out)?;
    let episodes: Vec<EpisodeSummary> = read_jsonl(&out.join(EPISODES_FILE))?;
    let events: Vec<RunEvent> = read_jsonl(&out.join(EVENTS_FILE))?;
    let mut text = String::new();
    let p = run.progress;
    let _ = writeln!(
        text,
        "run at episode {} of {}, t = {} of {}",
        p.episode, run.config.epochs, p.t, run.config.t_max
    );
    let c = run.config.components;
    let _ = writeln!(text, "components: TEP {} AMR {} KBR {}", c.tep, c.amr, c.kbr);

    if !episodes.is_empty() {
        let _ = writeln!(text, "\nreward progression (episode blocks):");
        let chunk = episodes.len().div_ceil(10);
        for block in episodes.chunks(chunk) {
            let n = block.len() as f64;
            let mean = block.iter().map(|e| e.mean_reward).sum::<f64>() / n;
            let legal: usize = block.iter().map(|e| e.legal_steps).sum();
            let steps: usize = block.iter().map(|e| e.steps).sum();
            let wins = block.iter().filter(|e| e.success).count();
            let _ = writeln!(
                text,
                "  episodes {:>5}-{:<5} mean reward {mean:>8.4}  legal {:>5.1}%  new materials {wins}",
                block[0].episode,
                block[block.len() - 1].episode,
                100.0 * legal as f64 / steps.max(1) as f64
            );
        }
    }

    let _ = writeln!(text, "\nevents:");
    for e in &events {
        match e {
            RunEvent::PoolBuilt {
                episode,
                bundle_version,
                size,
                mean,
            } => {
                let _ = writeln!(
                    text,
                    "  episode {episode}: pool of {size} built for guidance v{bundle_version}, mean reward {mean:.4}"
                );
            }
            RunEvent::Refinement(r) => {
                let features: Vec<String> = r.iterations.iter().map(|i| i.selected.join(",")).collect();
                let _ = writeln!(
                    text,
                    "  t {}: {:?} refinement {} after {} iteration(s), v{} -> v{} [{}]",
                    r.t,
                    r.trigger,
                    if r.accepted { "accepted" } else { "rejected" },
                    r.iterations.len(),
                    r.version_before,
                    r.version_after,
                    features.join(" | ")
                );
            }
            RunEvent::Start { episode, resumed, .. } => {
                let _ = writeln!(
                    text,
                    "  episode {episode}: {}",
                    if *resumed { "resumed" } else { "started" }
                );
            }
            RunEvent::Checkpoint { .. } => {}
        }
    }

    let thresholds = &run.reward.thresholds;
    let mut rows = vec![rates_row(
        "training",
        &read_jsonl(&out.join(TRAJECTORY_FILE))?,
        thresholds,
    )?];
    for kind in [BaselineKind::Random, BaselineKind::Grid] {
        let path = work.join(kind.file());
        if path.exists() {
            rows.push(rates_row(
                &format!("{kind:?}").to_lowercase(),
                &read_jsonl(&path)?,
                thresholds,
            )?);
        }
    }
    let _ = writeln!(text, "\nsuccess rates (%):");
    text.push_str(&render_table(&rows));
    print!("{text}");
    Ok(())
}
