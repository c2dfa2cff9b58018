//! Automatic model refinement: variance and correlation triggers, the
//! LLM-driven feature selection loop and the acceptance gates.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{CandidateFeature, Composition, ElementDescriptorTable, Property, RegressionRow, N_PROPERTIES};
use crate::error::{invalid, Error, Result};
use crate::guidance::metrics::{pearson, variance};
use crate::guidance::{cross_validate_regressor, Guidance, GuidanceBundle, RegressorModel};
use crate::llm::{parse_refine, render, LlmClient, TemplateKind};

pub const DEFAULT_VOCABULARY_CAP: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    VarianceWindow,
    CorrelationWindow,
    KbrWindow,
}

/// Left-closed phases split at `variance_end * t_max` and `kbr_start * t_max`.
pub fn phase_of(t: u64, t_max: u64, variance_end: f64, kbr_start: f64) -> Phase {
    let t = t as f64;
    let t_max = t_max as f64;
    if t < variance_end * t_max {
        Phase::VarianceWindow
    } else if t < kbr_start * t_max {
        Phase::CorrelationWindow
    } else {
        Phase::KbrWindow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmrConfig {
    /// Per-target variance thresholds; `None` derives `(0.1 std)^2` from the
    /// training targets.
    pub tau_var: Option<[f64; N_PROPERTIES]>,
    pub tau_var_std_fraction: f64,
    pub monitored: Vec<Property>,
    pub rho_min: f64,
    pub variance_end: f64,
    pub kbr_start: f64,
    pub max_iterations: usize,
    pub min_window: usize,
    pub vocabulary_cap: usize,
    pub cv_folds: usize,
    /// Text for the `{knowledge}` slot.
    pub knowledge: String,
}

impl Default for AmrConfig {
    fn default() -> Self {
        AmrConfig {
            tau_var: None,
            tau_var_std_fraction: 0.1,
            monitored: Property::ALL.to_vec(),
            rho_min: 0.6,
            variance_end: 0.2,
            kbr_start: 0.8,
            max_iterations: 3,
            min_window: 8,
            vocabulary_cap: DEFAULT_VOCABULARY_CAP,
            cv_folds: 10,
            knowledge: String::new(),
        }
    }
}

impl AmrConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho_min > -1.0
            && self.rho_min < 1.0
            && 0.0 <= self.variance_end
            && self.variance_end <= self.kbr_start
            && self.kbr_start <= 1.0
            && self.max_iterations >= 1
            && self.cv_folds >= 2
            && self
                .tau_var
                .map_or(true, |t| t.iter().all(|v| v.is_finite() && *v >= 0.0));
        if !ok {
            return Err(Error::Config(
                "amr: need rho_min in (-1, 1), ordered phases in [0, 1], at least one iteration, cv_folds >= 2 and finite tau_var"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn resolve_tau_var(&self, rows: &[RegressionRow]) -> [f64; N_PROPERTIES] {
        self.tau_var
            .unwrap_or_else(|| default_tau_var(rows, self.tau_var_std_fraction))
    }
}

/// `(fraction * population std)^2` of each observed target; infinite when a
/// target has no observations, so it never triggers.
pub fn default_tau_var(rows: &[RegressionRow], fraction: f64) -> [f64; N_PROPERTIES] {
    let mut out = [f64::INFINITY; N_PROPERTIES];
    for p in Property::ALL {
        let ys: Vec<f64> = rows.iter().filter_map(|r| r.properties.get(p)).collect();
        if let Some(v) = variance(&ys) {
            out[p.index()] = fraction * fraction * v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Variance,
    Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    /// Population variance per target over the window.
    pub variances: [f64; N_PROPERTIES],
    /// Monitored targets whose variance exceeds the threshold.
    pub exceeded: Vec<Property>,
    pub fires: bool,
    /// Why the check was skipped, if it was.
    pub skipped: Option<String>,
}

pub fn window_variances(predictions: &[[f64; N_PROPERTIES]]) -> [f64; N_PROPERTIES] {
    let mut out = [0.0; N_PROPERTIES];
    for (j, o) in out.iter_mut().enumerate() {
        let col: Vec<f64> = predictions.iter().map(|p| p[j]).collect();
        *o = variance(&col).unwrap_or(0.0);
    }
    out
}

pub fn check_variance_trigger(
    predictions: &[[f64; N_PROPERTIES]],
    tau_var: &[f64; N_PROPERTIES],
    config: &AmrConfig,
    t: u64,
    t_max: u64,
) -> VarianceCheck {
    let variances = window_variances(predictions);
    let skip = |why: String| VarianceCheck {
        variances,
        exceeded: Vec::new(),
        fires: false,
        skipped: Some(why),
    };
    if phase_of(t, t_max, config.variance_end, config.kbr_start) != Phase::VarianceWindow {
        return skip(format!("t = {t} is outside the variance window"));
    }
    if predictions.len() < config.min_window.max(1) {
        return skip(format!(
            "window of {} states is below {}",
            predictions.len(),
            config.min_window
        ));
    }
    let exceeded: Vec<Property> = config
        .monitored
        .iter()
        .copied()
        .filter(|p| variances[p.index()] > tau_var[p.index()])
        .collect();
    VarianceCheck {
        variances,
        fires: !exceeded.is_empty(),
        exceeded,
        skipped: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCheck {
    pub pearson: Option<f64>,
    /// A series was constant, so the correlation is undefined.
    pub degenerate: bool,
    pub fires: bool,
    pub skipped: Option<String>,
}

pub fn check_correlation_trigger(
    rewards: &[f64],
    values: &[f64],
    config: &AmrConfig,
    t: u64,
    t_max: u64,
) -> Result<CorrelationCheck> {
    if rewards.len() != values.len() {
        return Err(invalid(format!(
            "reward and value series differ in length ({} vs {})",
            rewards.len(),
            values.len()
        )));
    }
    let skip = |why: String| CorrelationCheck {
        pearson: None,
        degenerate: false,
        fires: false,
        skipped: Some(why),
    };
    let (tf, tm) = (t as f64, t_max as f64);
    if tf < config.variance_end * tm || tf > config.kbr_start * tm {
        return Ok(skip(format!("t = {t} is outside the correlation window")));
    }
    if rewards.len() < config.min_window.max(2) {
        return Ok(skip(format!(
            "series of {} points is below {}",
            rewards.len(),
            config.min_window
        )));
    }
    let r = pearson(rewards, values)?;
    Ok(CorrelationCheck {
        pearson: r,
        degenerate: r.is_none(),
        fires: r.map_or(true, |r| r < config.rho_min),
        skipped: None,
    })
}

/// The recent states and curves of one episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub states: Vec<Composition>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Text for the `{composition}` slot, such as `Zr-based`.
    pub label: String,
}

/// Produces a candidate guidance model for a feature set along with its
/// cross-validated mean R².
pub trait Retrainer {
    type Model: Guidance;

    fn retrain(&self, features: &[CandidateFeature]) -> Result<(Self::Model, Option<f64>)>;
}

/// Retrains the bundle's regressor on the dataset and scores it by k-fold CV.
pub struct BundleRetrainer<'a> {
    pub bundle: &'a GuidanceBundle,
    pub rows: &'a [RegressionRow],
    pub table: &'a ElementDescriptorTable,
    pub folds: usize,
}

impl Retrainer for BundleRetrainer<'_> {
    type Model = GuidanceBundle;

    fn retrain(&self, features: &[CandidateFeature]) -> Result<(GuidanceBundle, Option<f64>)> {
        let cfg = &self.bundle.config;
        let reg = RegressorModel::train(self.rows, features, &cfg.regressor, self.table, cfg.seed)?;
        let cv = cross_validate_regressor(self.rows, features, &cfg.regressor, self.table, self.folds, cfg.seed)?;
        let r2 = cv.mean_r2();
        Ok((self.bundle.with_regressor(reg, Some(cv)), r2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub prompt_sha256: String,
    pub response: Option<String>,
    pub selected: Vec<String>,
    pub cv_r2: Option<f64>,
    /// Post-retrain variance of the worst exceeded target, or the recomputed
    /// Pearson coefficient.
    pub recheck: Option<f64>,
    pub accepted: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementEvent {
    pub trigger: TriggerKind,
    pub episode: u64,
    pub t: u64,
    pub window_size: usize,
    /// Window variances or Pearson coefficient at trigger time.
    pub variances: Option<[f64; N_PROPERTIES]>,
    pub exceeded: Vec<Property>,
    pub pearson: Option<f64>,
    pub baseline_r2: f64,
    pub version_before: u64,
    pub version_after: u64,
    pub features_before: Vec<String>,
    pub features_after: Vec<String>,
    pub iterations: Vec<IterationRecord>,
    pub accepted: bool,
}

/// Everything `refine` needs apart from the model factory.
pub struct RefineInput<'a> {
    pub trigger: TriggerKind,
    pub episode: u64,
    pub t: u64,
    pub window: &'a Window,
    pub variance_check: Option<&'a VarianceCheck>,
    pub correlation_check: Option<&'a CorrelationCheck>,
    pub tau_var: [f64; N_PROPERTIES],
    pub baseline_r2: f64,
    pub version: u64,
    pub current_features: &'a [CandidateFeature],
    pub model_status: String,
    pub vocabulary: &'a [CandidateFeature],
    pub llm: &'a dyn LlmClient,
    /// Recomputes the window's reward series under a candidate model; needed
    /// on the correlation path.
    pub rescore: Option<&'a dyn Fn(&dyn Guidance) -> Result<Vec<f64>>>,
}

/// Candidate vocabulary shown to the LLM: unused features, capped.
pub fn offered_vocabulary(vocabulary: &[CandidateFeature], current: &[CandidateFeature], cap: usize) -> Vec<String> {
    vocabulary
        .iter()
        .filter(|f| !current.contains(f))
        .take(cap)
        .map(CandidateFeature::name)
        .collect()
}

fn prompt_for(input: &RefineInput<'_>, config: &AmrConfig) -> Result<String> {
    let mut b = BTreeMap::new();
    b.insert(
        "knowledge".to_string(),
        if config.knowledge.trim().is_empty() {
            "(none supplied)".to_string()
        } else {
            config.knowledge.clone()
        },
    );
    b.insert("model_status".to_string(), input.model_status.clone());
    b.insert(
        "candidate_features".to_string(),
        offered_vocabulary(input.vocabulary, input.current_features, config.vocabulary_cap).join(", "),
    );
    b.insert("composition".to_string(), input.window.label.clone());
    let kind = match input.trigger {
        TriggerKind::Variance => {
            let check = input
                .variance_check
                .ok_or_else(|| invalid("variance refinement needs the variance check"))?;
            let worst = worst_target(check, &input.tau_var)
                .ok_or_else(|| invalid("variance refinement needs an exceeded target"))?;
            b.insert("pred_var".to_string(), format!("{:.4}", check.variances[worst.index()]));
            b.insert(
                "performance".to_string(),
                format!("{} ({}, {})", worst.description(), worst.column(), worst.unit()),
            );
            TemplateKind::VarianceRefine
        }
        TriggerKind::Correlation => {
            let r = input.correlation_check.and_then(|c| c.pearson);
            b.insert(
                "person_cor".to_string(),
                r.map_or_else(|| "undefined (constant series)".to_string(), |r| format!("{r:.4}")),
            );
            TemplateKind::CorrelationRefine
        }
    };
    Ok(render(kind, &b)?)
}

/// Exceeded target with the largest variance-to-threshold ratio.
fn worst_target(check: &VarianceCheck, tau: &[f64; N_PROPERTIES]) -> Option<Property> {
    check.exceeded.iter().copied().max_by(|a, b| {
        let ra = check.variances[a.index()] / tau[a.index()].max(f64::MIN_POSITIVE);
        let rb = check.variances[b.index()] / tau[b.index()].max(f64::MIN_POSITIVE);
        ra.total_cmp(&rb)
    })
}

pub fn model_status(bundle: &GuidanceBundle) -> String {
    let extras: Vec<String> = bundle.regressor.features().iter().map(CandidateFeature::name).collect();
    let p = &bundle.config.regressor;
    let mut s = format!(
        "edRVFL regressor (layers={}, hidden={}, lambda={}), version {}.\nInputs: 52 element fractions{}.\n",
        p.layers,
        p.hidden,
        p.lambda,
        bundle.version,
        if extras.is_empty() {
            String::new()
        } else {
            format!(" plus {}", extras.join(", "))
        }
    );
    if let Some(cv) = &bundle.cv.regressor {
        s.push_str(&format!("{}-fold CV R2 per target:", cv.folds));
        for prop in Property::ALL {
            if let Some(r2) = cv.r2_of(prop) {
                s.push_str(&format!(" {}={:.3}", prop.column(), r2));
            }
        }
        if let Some(m) = cv.mean_r2() {
            s.push_str(&format!("; mean {m:.3}"));
        }
    } else {
        s.push_str("No cross-validation record.");
    }
    s
}

/// Runs up to `max_iterations` selection rounds; the returned model is
/// present only when a candidate passed every gate.
pub fn refine<R: Retrainer>(
    input: &RefineInput<'_>,
    retrainer: &R,
    config: &AmrConfig,
) -> Result<(RefinementEvent, Option<R::Model>)> {
    let mut event = RefinementEvent {
        trigger: input.trigger,
        episode: input.episode,
        t: input.t,
        window_size: input.window.states.len().max(input.window.rewards.len()),
        variances: input.variance_check.map(|c| c.variances),
        exceeded: input.variance_check.map(|c| c.exceeded.clone()).unwrap_or_default(),
        pearson: input.correlation_check.and_then(|c| c.pearson),
        baseline_r2: input.baseline_r2,
        version_before: input.version,
        version_after: input.version,
        features_before: input.current_features.iter().map(CandidateFeature::name).collect(),
        features_after: input.current_features.iter().map(CandidateFeature::name).collect(),
        iterations: Vec::new(),
        accepted: false,
    };
    if input.trigger == TriggerKind::Correlation && input.rescore.is_none() {
        return Err(invalid("correlation refinement needs a rescoring function"));
    }
    let prompt = prompt_for(input, config)?;
    let prompt_sha256 = hex::encode(Sha256::digest(prompt.as_bytes()));

    for _ in 0..config.max_iterations {
        let mut rec = IterationRecord {
            prompt_sha256: prompt_sha256.clone(),
            response: None,
            selected: Vec::new(),
            cv_r2: None,
            recheck: None,
            accepted: false,
            diagnostic: None,
        };
        match attempt(input, retrainer, config, &prompt, &mut rec) {
            Ok(Some(model)) => {
                rec.accepted = true;
                event.accepted = true;
                event.version_after = model.version();
                event.features_after = rec.selected.clone();
                event.iterations.push(rec);
                return Ok((event, Some(model)));
            }
            Ok(None) => {}
            Err(e) => rec.diagnostic = Some(e.to_string()),
        }
        log::info!(
            "amr {:?} iteration {} rejected: {}",
            input.trigger,
            event.iterations.len() + 1,
            rec.diagnostic.as_deref().unwrap_or("gate not met")
        );
        event.iterations.push(rec);
    }
    Ok((event, None))
}

fn attempt<R: Retrainer>(
    input: &RefineInput<'_>,
    retrainer: &R,
    config: &AmrConfig,
    prompt: &str,
    rec: &mut IterationRecord,
) -> Result<Option<R::Model>> {
    let raw = input.llm.complete(prompt)?;
    rec.response = Some(raw.clone());
    let parsed = parse_refine(&raw)?;
    rec.selected = parsed.selected_features.clone();
    let features = resolve(&parsed.selected_features, input.vocabulary)?;
    let (model, cv_r2) = retrainer.retrain(&features)?;
    rec.cv_r2 = cv_r2;
    let Some(cv_r2) = cv_r2 else {
        rec.diagnostic = Some("candidate has no defined CV R2".into());
        return Ok(None);
    };
    let passed = match input.trigger {
        TriggerKind::Variance => {
            let preds: Vec<[f64; N_PROPERTIES]> = model
                .predict_many(&input.window.states)?
                .iter()
                .map(|p| p.properties.0.map(|v| v.unwrap_or(f64::NAN)))
                .collect();
            let after = window_variances(&preds);
            let exceeded = input.variance_check.map(|c| c.exceeded.as_slice()).unwrap_or(&[]);
            let worst = exceeded
                .iter()
                .map(|p| after[p.index()])
                .fold(f64::NEG_INFINITY, f64::max);
            rec.recheck = Some(worst);
            let var_ok = exceeded.iter().all(|p| after[p.index()] < input.tau_var[p.index()]);
            cv_r2 >= input.baseline_r2 && var_ok
        }
        TriggerKind::Correlation => {
            let rescore = input.rescore.expect("checked above");
            let rewards = rescore(&model)?;
            let r = pearson(&rewards, &input.window.values)?;
            rec.recheck = r;
            cv_r2 > input.baseline_r2 && r.is_some_and(|r| r > config.rho_min)
        }
    };
    Ok(passed.then_some(model))
}

/// Names must parse and appear in the full vocabulary.
fn resolve(names: &[String], vocabulary: &[CandidateFeature]) -> Result<Vec<CandidateFeature>> {
    let mut out: Vec<CandidateFeature> = Vec::with_capacity(names.len());
    for n in names {
        let f: CandidateFeature = n.parse()?;
        if !vocabulary.contains(&f) {
            return Err(Error::UnknownFeature(n.clone()));
        }
        if !out.contains(&f) {
            out.push(f);
        }
    }
    Ok(out)
}

/// The single shared, atomically replaceable guidance bundle.
#[derive(Clone)]
pub struct BundleHandle(Arc<RwLock<Arc<GuidanceBundle>>>);

impl BundleHandle {
    pub fn new(bundle: GuidanceBundle) -> Self {
        BundleHandle(Arc::new(RwLock::new(Arc::new(bundle))))
    }

    pub fn current(&self) -> Arc<GuidanceBundle> {
        self.0.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.0.read().version
    }

    /// Installs `next` only if it is newer than the active bundle.
    pub fn swap(&self, next: GuidanceBundle) -> Result<()> {
        let mut guard = self.0.write();
        if next.version <= guard.version {
            return Err(Error::Model(format!(
                "bundle version {} does not advance {}",
                next.version, guard.version
            )));
        }
        *guard = Arc::new(next);
        Ok(())
    }
}

/// Ties the triggers and the refinement loop to a live bundle.
pub struct AmrController<'a> {
    pub config: AmrConfig,
    pub tau_var: [f64; N_PROPERTIES],
    pub handle: BundleHandle,
    pub rows: &'a [RegressionRow],
    pub table: &'a ElementDescriptorTable,
    pub vocabulary: Vec<CandidateFeature>,
    pub llm: Arc<dyn LlmClient>,
}

impl<'a> AmrController<'a> {
    pub fn new(
        config: AmrConfig,
        handle: BundleHandle,
        rows: &'a [RegressionRow],
        table: &'a ElementDescriptorTable,
        llm: Arc<dyn LlmClient>,
    ) -> Result<Self> {
        config.validate()?;
        if handle.current().cv.regressor_r2().is_none() {
            return Err(Error::Config(
                "AMR needs a guidance bundle trained with regressor cross-validation".into(),
            ));
        }
        let tau_var = config.resolve_tau_var(rows);
        Ok(AmrController {
            tau_var,
            vocabulary: table.vocabulary(),
            config,
            handle,
            rows,
            table,
            llm,
        })
    }

    /// Runs the check for the current phase and refines if it fires. The
    /// handle holds the new bundle when the event is accepted.
    pub fn on_episode_end(
        &self,
        episode: u64,
        t: u64,
        t_max: u64,
        window: &Window,
        rescore: &dyn Fn(&dyn Guidance) -> Result<Vec<f64>>,
    ) -> Result<Option<RefinementEvent>> {
        let bundle = self.handle.current();
        let phase = phase_of(t, t_max, self.config.variance_end, self.config.kbr_start);
        let (trigger, vcheck, ccheck) = match phase {
            Phase::VarianceWindow => {
                let preds: Vec<[f64; N_PROPERTIES]> = bundle.regressor.predict_many(&window.states)?;
                let check = check_variance_trigger(&preds, &self.tau_var, &self.config, t, t_max);
                if !check.fires {
                    return Ok(None);
                }
                (TriggerKind::Variance, Some(check), None)
            }
            _ => {
                let check = check_correlation_trigger(&window.rewards, &window.values, &self.config, t, t_max)?;
                if !check.fires {
                    return Ok(None);
                }
                (TriggerKind::Correlation, None, Some(check))
            }
        };
        let input = RefineInput {
            trigger,
            episode,
            t,
            window,
            variance_check: vcheck.as_ref(),
            correlation_check: ccheck.as_ref(),
            tau_var: self.tau_var,
            baseline_r2: bundle.cv.regressor_r2().expect("checked in new"),
            version: bundle.version,
            current_features: bundle.regressor.features(),
            model_status: model_status(&bundle),
            vocabulary: &self.vocabulary,
            llm: self.llm.as_ref(),
            rescore: Some(rescore),
        };
        let retrainer = BundleRetrainer {
            bundle: &bundle,
            rows: self.rows,
            table: self.table,
            folds: self.config.cv_folds,
        };
        let (event, model) = refine(&input, &retrainer, &self.config)?;
        if let Some(next) = model {
            self.handle.swap(next)?;
        }
        Ok(Some(event))
    }
}
