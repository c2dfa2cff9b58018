//! One PASS/FAIL line per acceptance criterion. Criterion 3 is a soft,
//! scale-dependent target: its line is reported but does not fail the run.
//! Criterion 9 needs the full dataset (`GLASSRL_FULL_DATASET`) and is skipped
//! without it.

mod support;

use std::path::Path;
use std::time::{Duration, Instant};

use glassrl::agent::OutputActivation;
use glassrl::amr::{
    check_correlation_trigger, refine, AmrConfig, AmrController, BundleHandle, CorrelationCheck, TriggerKind, Window,
};
use glassrl::dataset::{
    element_index, load_dataset, percentile, target_values, Composition, DatasetSchema, PercentileMethod, Property,
    PropertyVector, Target, ThresholdSet, N_ELEMENTS,
};
use glassrl::environment::Environment;
use glassrl::evaluation::{mean_episode_reward, random_action, rollout, success_rates};
use glassrl::guidance::metrics::{auc, mape, pearson, r2, rmse};
use glassrl::guidance::{BudgetedGuidance, EdRvfl, ForestParams, Guidance, Prediction, RandomForest, RvflParams};
use glassrl::llm::{refine_json, MockLlm};
use glassrl::reward::{
    done_reward, illegal_reward, regression_reward, ucb_reward, CompositionDatabase, RewardConfig, RewardEngine,
    VisitCounter,
};
use glassrl::tep::{ExperiencePool, TepConfig};
use glassrl::trainer::{read_jsonl, EpisodeSummary, RunEvent, StepRecord, Trainer, EVENTS_FILE, TRAJECTORY_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn c1_reward_closed_forms() -> Outcome {
    for t_ep in [2, 32, 128, 1000] {
        check(
            (illegal_reward(1, t_ep).unwrap() + 1.0).abs() <= 1e-12,
            format!("r_illegal(1, {t_ep})"),
        )?;
        check(
            (illegal_reward(t_ep, t_ep).unwrap() + 0.5).abs() <= 1e-12,
            format!("r_illegal({t_ep}, {t_ep})"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let targets = [Target::Property(Property::Dmax), Target::Property(Property::SigmaY)];
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let tau = [rng.gen_range(0.5..10.0), rng.gen_range(500.0..2000.0)];
        let w0 = rng.gen_range(0.1..0.9);
        let w = [w0, 1.0 - w0];
        let th = ThresholdSet::uniform(targets.iter().copied().zip(tau).collect())
            .unwrap()
            .with_weights(targets.iter().copied().zip(w).collect())
            .unwrap();
        let config = RewardConfig::new(th);
        let before = [rng.gen_range(0.0..20.0), rng.gen_range(0.0..4000.0)];
        let after = [rng.gen_range(0.0..20.0), rng.gen_range(0.0..4000.0)];
        let pv = |v: [f64; 2]| {
            let mut p = PropertyVector::default();
            p.set(Property::Dmax, Some(v[0]));
            p.set(Property::SigmaY, Some(v[1]));
            p
        };
        let got = regression_reward(&pv(before), &pv(after), &config).unwrap();
        // traced by hand: one tanh per target, denominator max(tau, before)
        let d0 = if tau[0] > before[0] { tau[0] } else { before[0] };
        let d1 = if tau[1] > before[1] { tau[1] } else { before[1] };
        let r_i = w[0] * ((after[0] - before[0]) / d0).tanh() + w[1] * ((after[1] - before[1]) / d1).tanh();
        let r_t = w[0] * f64::from(u8::from(after[0] >= tau[0])) + w[1] * f64::from(u8::from(after[1] >= tau[1]));
        worst = worst.max((got.r_i - r_i).abs()).max((got.r_t - r_t).abs());
        check(
            got.all_met == (after[0] >= tau[0] && after[1] >= tau[1]),
            "all-met flag",
        )?;
    }
    check(worst <= 1e-10, format!("regression reward oracle gap {worst:e}"))?;

    let mut worst3 = 0.0f64;
    for _ in 0..100 {
        let alpha = rng.gen_range(0.01..2.0);
        let t_ep = rng.gen_range(2..500);
        let n = rng.gen_range(1..10_000u64);
        let direct = alpha * (2.0 * (t_ep as f64).ln() / n as f64).sqrt();
        worst3 = worst3.max((ucb_reward(alpha, t_ep, n) - direct).abs());
    }
    let th = ThresholdSet::uniform([(targets[0], 1.0)].into()).unwrap();
    let config = RewardConfig::new(th);
    let known = Composition::from_pairs(&[("Zr", 50.0), ("Cu", 50.0)]).unwrap();
    let db = CompositionDatabase::new(vec![known.clone()]);
    let visits = VisitCounter::new(config.visit_grid);
    let fresh = Composition::from_pairs(&[("Zr", 40.0), ("Cu", 60.0)]).unwrap();
    check(
        done_reward(&fresh, &db, &visits, 32, &config) == (1.0, true, 0),
        "novel done reward",
    )?;
    for n in 1..=5u64 {
        let (r, novel, count) = done_reward(&known, &db, &visits, 32, &config);
        let direct = config.alpha * (2.0 * 32f64.ln() / n as f64).sqrt();
        check(!novel && count == n, "visit count")?;
        worst3 = worst3.max((r - direct).abs());
    }
    check(worst3 <= 1e-10, format!("UCB reward gap {worst3:e}"))?;
    Ok(format!("regression reward max gap {worst:.1e}, UCB max gap {worst3:.1e}"))
}

/// Deterministic stand-in guidance for the combinatorial checks.
struct Toy;

impl Guidance for Toy {
    fn version(&self) -> u64 {
        1
    }

    fn predict(&self, c: &Composition) -> glassrl::Result<Prediction> {
        let cu = c.fractions()[element_index("Cu").unwrap()];
        let mut properties = PropertyVector::default();
        properties.set(Property::Dmax, Some(cu / 10.0));
        Ok(Prediction {
            class_prob: 0.3 + 0.6 * cu / 100.0,
            properties,
        })
    }
}

fn random_compositions(n: usize, rng: &mut ChaCha8Rng) -> Vec<Composition> {
    (0..n)
        .map(|_| {
            let cu = rng.gen_range(5.0..60.0);
            let al = rng.gen_range(0.0..15.0);
            Composition::from_pairs(&[("Zr", 100.0 - cu - al), ("Cu", cu), ("Al", al)]).unwrap()
        })
        .collect()
}

fn c2_tep_combinatorics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let th = ThresholdSet::uniform([(Target::Property(Property::Dmax), 3.0)].into()).unwrap();
    let reward = RewardConfig::new(th);
    let env = Environment {
        delta_max: 5.0,
        t_ep: 32,
    };
    let tep = TepConfig::default();
    let mut violations = 0;
    let mut injected = 0;
    for n in [10, 50, 200] {
        let comps = random_compositions(n, &mut rng);
        let mut with_dups = comps.clone();
        with_dups.extend(comps.iter().take(5).cloned());
        let db = CompositionDatabase::new(comps.clone());
        let pool = ExperiencePool::build(&with_dups, &reward, &db, &Toy, &env, &tep, "acceptance").unwrap();
        check(pool.len() == n * (n - 1), format!("n = {n}: pool size {}", pool.len()))?;
        if n != 200 {
            continue;
        }
        let floor = pool.mean() + tep.margin;
        let live = random_batch(&mut rng, 64, N_ELEMENTS, N_ELEMENTS, 5.0, false);
        for _ in 0..10_000 {
            let mut batch = live.clone();
            let rho = pool.mean() - rng.gen_range(0.01..1.0);
            for p in pool.replace_batch(&mut batch, rho, &tep, &mut rng) {
                injected += 1;
                if !(batch[p].r > floor) {
                    violations += 1;
                }
            }
        }
    }
    check(injected > 0, "no entries were injected")?;
    check(
        violations == 0,
        format!("{violations} injected entries at or below mean + margin"),
    )?;
    Ok(format!(
        "sizes n(n-1) for n = 10, 50, 200; {injected} injections over 10^4 batches, 0 violations"
    ))
}

fn c3_tep_distribution() -> Outcome {
    let m = mini();
    let config = smoke_config();
    let tr = Trainer::new(
        config,
        &m.data,
        &m.table,
        m.thresholds.clone(),
        m.bundle.clone(),
        m.bases.clone(),
        mock_llm(),
        None,
    )
    .map_err(|e| e.to_string())?;
    let pool = tr.pool().ok_or("no pool built")?;
    let stats = pool.stats(25).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} entries, mean {:.3}, {:.1}% in [0.4, 0.6] (need >= 80% and mean in [0.45, 0.55])",
        stats.count,
        stats.mean,
        100.0 * stats.fraction_in_04_06
    );
    if stats.fraction_in_04_06 >= 0.8 && (0.45..=0.55).contains(&stats.mean) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c4_guidance() -> Outcome {
    let (x, y) = linear_data(400, 1);
    let col: Vec<Option<f64>> = y.iter().map(|&v| Some(v)).collect();
    let params = RvflParams {
        layers: 4,
        hidden: 32,
        lambda: 1e-3,
        ..RvflParams::default()
    };
    let m = EdRvfl::fit(&x[..300], &[col[..300].to_vec()], &params, 3).unwrap();
    let pred: Vec<f64> = m.predict(&x[300..]).unwrap().into_iter().map(|r| r[0]).collect();
    let fit = r2(&y[300..], &pred).unwrap().unwrap();
    check(fit >= 0.99, format!("edRVFL held-out R² {fit}"))?;

    let (x, y) = linear_data(60, 2);
    let col: Vec<Option<f64>> = y.iter().map(|&v| Some(v)).collect();
    let params = RvflParams {
        layers: 1,
        hidden: 0,
        lambda: 2.5,
        ..RvflParams::default()
    };
    let m = EdRvfl::fit(&x, &[col], &params, 0).unwrap();
    let (q, _) = linear_data(25, 9);
    let got: Vec<f64> = m.predict(&q).unwrap().into_iter().map(|r| r[0]).collect();
    let want = ridge_oracle(&x, &y, 2.5, &q);
    let ridge_gap = got
        .iter()
        .zip(&want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max);
    check(ridge_gap <= 1e-8, format!("ridge gap {ridge_gap:e}"))?;

    let forest = ForestParams {
        n_trees: 60,
        ..ForestParams::default()
    };
    let (x, y) = blobs(400, 3.0, 1);
    let (xt, yt) = blobs(400, 3.0, 2);
    let f = RandomForest::fit(&x, &y, &forest, 5).unwrap();
    let s: Vec<f64> = xt.iter().map(|r| f.predict_proba(r)).collect();
    let sep = auc(&s, &yt).unwrap().unwrap();
    check(sep >= 0.99, format!("blob AUC {sep}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shuffled: Vec<bool> = y.iter().map(|_| rng.gen_bool(0.5)).collect();
    let labels: Vec<bool> = (0..2000).map(|_| rng.gen_bool(0.5)).collect();
    let (xt, _) = blobs(2000, 3.0, 3);
    let f = RandomForest::fit(&x, &shuffled, &forest, 5).unwrap();
    let s: Vec<f64> = xt.iter().map(|r| f.predict_proba(r)).collect();
    let noise = auc(&s, &labels).unwrap().unwrap();
    check((noise - 0.5).abs() <= 0.05, format!("shuffled AUC {noise}"))?;

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(5..60);
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0..1.0f64) * 8.0).round() / 8.0)
            .collect();
        let mut lab: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        lab[0] = true;
        lab[1] = false;
        check(
            auc(&scores, &lab).unwrap().unwrap() == auc_pairs(&scores, &lab),
            "AUC differs from pair counting",
        )?;
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..50.0)).collect();
        let yh: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-3.0..3.0)).collect();
        let nf = n as f64;
        let mse = y.iter().zip(&yh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / nf;
        let mean = y.iter().sum::<f64>() / nf;
        let ss_tot = y.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>();
        let want_r2 = 1.0 - mse * nf / ss_tot;
        let want_mape = 100.0 * y.iter().zip(&yh).map(|(a, b)| ((a - b) / a).abs()).sum::<f64>() / nf;
        worst = worst
            .max((rmse(&y, &yh).unwrap() - mse.sqrt()).abs())
            .max((r2(&y, &yh).unwrap().unwrap() - want_r2).abs())
            .max((mape(&y, &yh).unwrap().unwrap() - want_mape).abs() / want_mape.max(1.0));
    }
    check(worst <= 1e-12, format!("metric gap {worst:e}"))?;
    Ok(format!(
        "edRVFL R² {fit:.4}, ridge gap {ridge_gap:.1e}, AUC blobs {sep:.3} / shuffled {noise:.3}, metric gap {worst:.1e}"
    ))
}

fn c5_agent_numerics() -> Outcome {
    let mut grad = 0.0f64;
    for seed in 0..4 {
        for output in [OutputActivation::Identity, OutputActivation::ScaledTanh(2.5)] {
            grad = grad.max(max_gradient_error(output, seed));
        }
    }
    check(grad <= 1e-4, format!("gradient relative error {grad:e}"))?;
    let losses = critic_overfit_losses(200);
    check(
        losses.windows(2).all(|w| w[1] < w[0]),
        "critic loss rose during overfitting",
    )?;
    let (trained, m, sd) = bandit_experiment(5000);
    check(
        trained > m + 3.0 * sd,
        format!("bandit: trained {trained:.4}, random {m:.4} ± {sd:.4}"),
    )?;
    Ok(format!(
        "grad error {grad:.1e}, critic loss {:.3e} -> {:.3e}, bandit {trained:.3} vs random {m:.3} ± {sd:.3}",
        losses[0],
        losses[losses.len() - 1]
    ))
}

fn c6_amr() -> Outcome {
    let h = hidden();
    let elong = Property::Elongation.index();

    let handle = BundleHandle::new(h.bundle.clone());
    let baseline = h.bundle.cv.regressor_r2().unwrap();
    let llm = std::sync::Arc::new(MockLlm::script([refine_json(&["hidden:max"], "size mismatch")]));
    let amr = AmrController::new(elongation_amr(), handle.clone(), &h.data.regression, &h.table, llm).unwrap();
    let window = Window {
        states: h.window.clone(),
        label: "hidden-rich".into(),
        ..Window::default()
    };
    let ev = amr
        .on_episode_end(0, 10, 1000, &window, &no_rescore)
        .unwrap()
        .ok_or("variance trigger did not fire")?;
    let it = &ev.iterations[0];
    let tau = amr.tau_var[elong];
    check(ev.accepted && handle.version() == 2, "helpful feature rejected")?;
    check(
        it.recheck.unwrap() < tau && it.cv_r2.unwrap() >= baseline,
        "acceptance gates not met",
    )?;
    let helpful = format!(
        "variance {:.3} -> {:.3} (tau {tau:.3}), CV R² {baseline:.3} -> {:.3}",
        ev.variances.unwrap()[elong],
        it.recheck.unwrap(),
        it.cv_r2.unwrap()
    );

    let handle = BundleHandle::new(h.bundle.clone());
    let llm = std::sync::Arc::new(MockLlm::script([
        refine_json(&["atomic_weight:min"], "a"),
        refine_json(&["period:max"], "b"),
        refine_json(&["density:std", "group:min"], "c"),
    ]));
    let amr = AmrController::new(elongation_amr(), handle.clone(), &h.data.regression, &h.table, llm).unwrap();
    let ev = amr
        .on_episode_end(0, 10, 1000, &window, &no_rescore)
        .unwrap()
        .ok_or("trigger did not fire")?;
    check(
        !ev.accepted && ev.iterations.len() == 3,
        "useless features not rejected after 3 iterations",
    )?;
    check(handle.version() == 1 && ev.version_after == 1, "bundle version moved")?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = vocab();
    let config = AmrConfig::default();
    let mut accepted = 0;
    for _ in 0..200 {
        let values: Vec<f64> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let noise = if rng.gen_bool(0.5) { 0.5 } else { 50.0 };
        let agent: Vec<f64> = values.iter().map(|v| v + rng.gen_range(-noise..noise)).collect();
        let cv = rng.gen_range(-1.0..1.0);
        let base_r2 = rng.gen_range(-1.0..1.0);
        let window = Window {
            states: (0..10).map(window_state).collect(),
            rewards: vec![0.0; 10],
            values: agent.clone(),
            label: "Cu-based".into(),
        };
        let llm = MockLlm::fixed(refine_json(&["electronegativity:std"], "r"));
        let states = window.states.clone();
        let rescore = move |g: &dyn Guidance| -> glassrl::Result<Vec<f64>> {
            states
                .iter()
                .map(|s| Ok(g.predict(s)?.properties.0[0].unwrap()))
                .collect()
        };
        let corr = CorrelationCheck {
            pearson: Some(0.1),
            degenerate: false,
            fires: true,
            skipped: None,
        };
        let mut input = base_input(TriggerKind::Correlation, &window, &v, &llm, base_r2, 0.0);
        input.correlation_check = Some(&corr);
        input.rescore = Some(&rescore);
        let (ev, _) = refine(
            &input,
            &StubRetrainer {
                values: values.clone(),
                cv_r2: cv,
            },
            &config,
        )
        .unwrap();
        let r = pearson(&values, &agent).unwrap();
        check(
            ev.accepted == (cv > base_r2 && r.is_some_and(|r| r > config.rho_min)),
            "correlation gate mismatch",
        )?;
        accepted += usize::from(ev.accepted);
    }

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(8..64);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let r = check_correlation_trigger(&x, &y, &config, 50, 100)
            .unwrap()
            .pearson
            .unwrap();
        let (a, b, c, d) = (
            rng.gen_range(0.01..50.0),
            rng.gen_range(-1e3..1e3),
            rng.gen_range(0.01..50.0),
            rng.gen_range(-1e3..1e3),
        );
        let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let yt: Vec<f64> = y.iter().map(|v| c * v + d).collect();
        let rt = check_correlation_trigger(&xt, &yt, &config, 50, 100)
            .unwrap()
            .pearson
            .unwrap();
        worst = worst.max((r - covariance_oracle(&x, &y)).abs()).max((r - rt).abs());
    }
    check(worst <= 1e-10, format!("Pearson gap {worst:e}"))?;
    Ok(format!(
        "helpful accepted ({helpful}); useless rejected after 3; correlation gate exact on 200 cases ({accepted} accepted); Pearson gap {worst:.1e}"
    ))
}

fn c7_kbr_gate(records: &[StepRecord]) -> Outcome {
    let config = smoke_config();
    let beta = config.reward.beta;
    let phase = config.reward.kbr_phase_gate * config.t_max as f64;
    let mut blended = 0;
    for r in records {
        let b = &r.reward;
        let gate = r.t as f64 >= phase && b.cls_prob.is_some_and(|p| p > config.reward.cls_gate);
        check(b.kbr_applied == gate, format!("gate mismatch at t = {}", r.t))?;
        if b.kbr_applied {
            blended += 1;
            let want = (1.0 - beta) * b.base_total + beta * b.r_llm.ok_or("blend without r_llm")?;
            check(b.total == want, format!("blend mismatch at t = {}", r.t))?;
        } else {
            check(
                b.total == b.base_total,
                format!("unblended reward changed at t = {}", r.t),
            )?;
        }
    }
    check(blended > 0, "no step passed the gate")?;
    Ok(format!("{blended} blended of {} records, all exact", records.len()))
}

struct SmokeRun {
    dir: tempfile::TempDir,
    summaries: Vec<EpisodeSummary>,
    agent: glassrl::agent::Td3Agent,
    bundle: glassrl::guidance::GuidanceBundle,
    elapsed: Duration,
}

fn smoke_run() -> SmokeRun {
    let m = mini();
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let mut tr = Trainer::new(
        smoke_config(),
        &m.data,
        &m.table,
        m.thresholds.clone(),
        m.bundle.clone(),
        m.bases.clone(),
        mock_llm(),
        Some(dir.path()),
    )
    .unwrap();
    let summaries = tr.run().unwrap();
    SmokeRun {
        elapsed: t0.elapsed(),
        agent: tr.agent().clone(),
        bundle: (*tr.bundle()).clone(),
        summaries,
        dir,
    }
}

fn checkpoint_hashes(dir: &Path) -> Vec<(u64, String)> {
    read_jsonl::<RunEvent>(&dir.join(EVENTS_FILE))
        .unwrap()
        .into_iter()
        .filter_map(|e| match e {
            RunEvent::Checkpoint {
                episode, state_hash, ..
            } => Some((episode, state_hash)),
            _ => None,
        })
        .collect()
}

fn c8_smoke(run: &SmokeRun, records: &[StepRecord]) -> Outcome {
    let m = mini();
    check(
        run.summaries.len() == 20 && records.len() == 640,
        "run did not cover 20 x 32 steps",
    )?;
    check(
        run.elapsed < Duration::from_secs(600),
        format!("smoke run took {:?}", run.elapsed),
    )?;
    let sr = success_rates(records, &m.thresholds).map_err(|e| e.to_string())?;
    let legal = sr.legal.percent.unwrap();

    let dir = tempfile::tempdir().unwrap();
    {
        let mut tr = Trainer::new(
            smoke_config(),
            &m.data,
            &m.table,
            m.thresholds.clone(),
            m.bundle.clone(),
            m.bases.clone(),
            mock_llm(),
            Some(dir.path()),
        )
        .unwrap();
        tr.run_episodes(13).unwrap();
    }
    let mut tr = Trainer::resume(dir.path(), &m.data, &m.table, mock_llm()).unwrap();
    tr.run().unwrap();
    let same_hashes = checkpoint_hashes(dir.path()) == checkpoint_hashes(run.dir.path())
        && tr.agent().state_hash() == run.agent.state_hash();
    let same_log = std::fs::read(dir.path().join(TRAJECTORY_FILE)).unwrap()
        == std::fs::read(run.dir.path().join(TRAJECTORY_FILE)).unwrap();

    let config = smoke_config();
    let reward = config.reward.with_thresholds(m.thresholds.clone());
    let db = CompositionDatabase::new(m.data.all_compositions());
    let guidance = BudgetedGuidance::new(run.bundle.clone(), u64::MAX);
    let engine = RewardEngine::new(reward.clone(), db.clone()).unwrap();
    let agent = &run.agent;
    let mut greedy = |s: &Composition, _: &_, _: &mut ChaCha8Rng| agent.policy(s.fractions());
    let trained = rollout(&mut greedy, &config.env, &m.bases, &engine, &guidance, Some(20), 99).unwrap();
    let engine = RewardEngine::new(reward, db).unwrap();
    let dm = config.env.delta_max;
    let mut random = |_: &Composition, b: &_, rng: &mut ChaCha8Rng| random_action(b, dm, rng);
    let baseline = rollout(&mut random, &config.env, &m.bases, &engine, &guidance, Some(20), 99).unwrap();
    let r_trained = mean_episode_reward(&trained).unwrap();
    let r_random = mean_episode_reward(&baseline).unwrap();

    let detail = format!(
        "{:.1?} run, SR_legal {legal:.2}% (need >= 90), resume hashes {}, trajectory {}, eval reward {r_trained:.4} vs random {r_random:.4}",
        run.elapsed,
        if same_hashes { "identical" } else { "DIFFER" },
        if same_log { "identical" } else { "DIFFERS" },
    );
    if legal >= 90.0 && same_hashes && same_log && r_trained > r_random {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const PUBLISHED_80TH: [(Property, f64, f64); 7] = [
    (Property::Dmax, 8.0, 0.5),
    (Property::Tg, 780.0, 0.5),
    (Property::Tl, 832.0, 0.5),
    (Property::Tx, 1309.2, 0.05),
    (Property::SigmaY, 1843.0, 0.5),
    (Property::YoungsModulus, 122.8, 0.05),
    (Property::Elongation, 15.0, 0.5),
];

fn c9_thresholds() -> Option<Outcome> {
    let path = std::env::var_os("GLASSRL_FULL_DATASET")?;
    let data = match load_dataset(Path::new(&path), &DatasetSchema::default()) {
        Ok(d) => d,
        Err(e) => return Some(Err(e.to_string())),
    };
    let methods = [PercentileMethod::Linear, PercentileMethod::NearestRank];
    let mut lines = Vec::new();
    let mut matching = Vec::new();
    for method in methods {
        let mut misses = Vec::new();
        for (p, want, tol) in PUBLISHED_80TH {
            let got = percentile(&target_values(&data.regression, Target::Property(p)), 0.8, method);
            match got {
                Ok(v) if (v - want).abs() <= tol => {}
                Ok(v) => misses.push(format!("{p:?} {v} vs {want}")),
                Err(e) => misses.push(format!("{p:?}: {e}")),
            }
        }
        if misses.is_empty() {
            matching.push(format!("{method:?}"));
        } else {
            lines.push(format!("{method:?}: {}", misses.join(", ")));
        }
    }
    Some(if matching.is_empty() {
        Err(lines.join("; "))
    } else {
        Ok(format!("all seven values reproduced under {}", matching.join(", ")))
    })
}

struct Line {
    id: u8,
    soft: bool,
    status: &'static str,
}

fn report(id: u8, limit: Duration, soft: bool, f: impl FnOnce() -> Option<Outcome>) -> Line {
    let t0 = Instant::now();
    let outcome = f();
    let took = t0.elapsed();
    let (status, detail) = match outcome {
        None => ("SKIP", "GLASSRL_FULL_DATASET not set".to_string()),
        Some(Ok(d)) if took <= limit => ("PASS", d),
        Some(Ok(d)) => ("FAIL", format!("{d}; over the {limit:?} limit")),
        Some(Err(d)) => ("FAIL", d),
    };
    let tag = if soft { " [soft]" } else { "" };
    println!("criterion {id}: {status}{tag} ({took:.2?}, limit {limit:?}) {detail}");
    Line { id, soft, status }
}

#[test]
fn acceptance() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut lines = vec![
        report(1, Duration::from_secs(1), false, || Some(c1_reward_closed_forms())),
        report(2, Duration::from_secs(30), false, || Some(c2_tep_combinatorics())),
        report(3, min(5), true, || Some(c3_tep_distribution())),
        report(4, min(2), false, || Some(c4_guidance())),
        report(5, min(5), false, || Some(c5_agent_numerics())),
        report(6, min(3), false, || Some(c6_amr())),
    ];
    let run = smoke_run();
    let records: Vec<StepRecord> = read_jsonl(&run.dir.path().join(TRAJECTORY_FILE)).unwrap();
    lines.push(report(7, min(1), false, || Some(c7_kbr_gate(&records))));
    lines.push(report(8, min(10), false, || Some(c8_smoke(&run, &records))));
    lines.push(report(9, min(5), false, c9_thresholds));

    let hard: Vec<u8> = lines
        .iter()
        .filter(|l| !l.soft && l.status == "FAIL")
        .map(|l| l.id)
        .collect();
    assert!(hard.is_empty(), "failing criteria: {hard:?}");
}
