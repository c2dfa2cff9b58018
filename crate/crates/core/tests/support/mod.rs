//! Oracles and fixtures shared by the integration targets. Each target uses a
//! subset.
#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use glassrl::agent::{critic_loss, Mlp, OutputActivation, PerConfig, PrioritizedReplay, Td3Agent, Td3Config};
use glassrl::amr::{AmrConfig, RefineInput, Retrainer, TriggerKind, Window};
use glassrl::dataset::{
    bundled_mini_dataset, compute_thresholds, ClassLabel, ClassifiedRow, Composition, ElementDescriptorTable,
    LoadReport, LoadedDataset, PercentileMethod, Property, PropertyVector, RegressionRow, ThresholdSet, N_ELEMENTS,
    N_PROPERTIES,
};
use glassrl::environment::{derive_bases, ExplorationBase, DEFAULT_BASE_COUNT};
use glassrl::guidance::{Guidance, GuidanceBundle, GuidanceConfig, Prediction};
use glassrl::llm::{kbr_json, refine_json, KeywordRule, LlmClient, MockLlm, MockPolicy};
use glassrl::tep::{Experience, Source};
use glassrl::trainer::TrainConfig;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gauss-Jordan solve with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

/// Textbook ridge with an unpenalized intercept on standardized inputs.
pub fn ridge_oracle(x: &[Vec<f64>], y: &[f64], lambda: f64, query: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect())
        .collect();
    let zm: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            b[j] += (z[i][j] - zm[j]) * (y[i] - ym);
            for k in 0..d {
                a[j][k] += (z[i][j] - zm[j]) * (z[i][k] - zm[k]);
            }
        }
    }
    for (j, row) in a.iter_mut().enumerate() {
        row[j] += lambda;
    }
    let beta = solve_dense(a, b);
    query
        .iter()
        .map(|q| {
            ym + (0..d)
                .map(|j| ((q[j] - mean[j]) / sd[j] - zm[j]) * beta[j])
                .sum::<f64>()
        })
        .collect()
}

pub fn linear_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let y = x
        .iter()
        .map(|r| 3.0 * r[0] - 2.0 * r[1] + noise.sample(&mut rng))
        .collect();
    (x, y)
}

pub fn blobs(n: usize, shift: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let pos = i % 2 == 0;
        let c = if pos { shift } else { -shift };
        x.push((0..5).map(|_| c + g.sample(&mut rng)).collect());
        y.push(pos);
    }
    (x, y)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn covariance_oracle(x: &[f64], y: &[f64]) -> f64 {
    // two-pass textbook formula with sample normalization
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sx * sy)
}

/// Largest relative gap between backprop and central differences over every
/// parameter and input of a small network, for the objective `sum(G ⊙ f(x))`.
pub fn max_gradient_error(output: OutputActivation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(&[4, 7, 6, 3], output, false, &mut rng);
    let x = DMatrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
    let g = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
    let objective = |n: &Mlp, x: &DMatrix<f64>| n.forward(x).component_mul(&g).sum();

    let cache = net.forward_cached(&x);
    let (grads, grad_x) = net.backward(&cache, &g);
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-6);
    let mut worst = 0.0f64;
    for (k, block) in analytic.iter().enumerate() {
        for (i, &a) in block.iter().enumerate() {
            let orig = net.params()[k][i];
            net.params_mut()[k][i] = orig + h;
            let up = objective(&net, &x);
            net.params_mut()[k][i] = orig - h;
            let down = objective(&net, &x);
            net.params_mut()[k][i] = orig;
            worst = worst.max(rel(a, (up - down) / (2.0 * h)));
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let numeric = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
        worst = worst.max(rel(grad_x[i], numeric));
    }
    worst
}

pub const BANDIT_C: f64 = 0.5;

pub fn bandit_reward(s: f64, a: f64) -> f64 {
    -(s + a - BANDIT_C).abs()
}

/// Trains on the one-step bandit for `updates` updates and returns the
/// trained policy's mean reward with the mean and spread of the random
/// policy's mean reward over 50 repeated evaluations.
pub fn bandit_experiment(updates: usize) -> (f64, f64, f64) {
    let bound = 2.0;
    let cfg = Td3Config {
        state_dim: 1,
        action_dim: 1,
        hidden: vec![64, 64],
        action_bound: bound,
        state_scale: 1.0,
        seed: 21,
        actor_lr: 1e-3,
        ..Td3Config::default()
    };
    let mut agent = Td3Agent::new(cfg).unwrap();
    let mut buf = PrioritizedReplay::new(PerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let step = |agent: &Td3Agent, buf: &mut PrioritizedReplay, rng: &mut ChaCha8Rng, sigma: f64| {
        let s = rng.gen_range(-1.0..1.0);
        let a = agent.act(&[s], sigma, rng)[0];
        buf.push(Experience {
            s: vec![s],
            a: vec![a],
            s_next: vec![s],
            r: bandit_reward(s, a),
            done: true,
            source: Source::Live,
        });
    };
    for _ in 0..256 {
        step(&agent, &mut buf, &mut rng, bound);
    }
    for _ in 0..updates {
        step(&agent, &mut buf, &mut rng, 0.3);
        let b = buf.sample(64, &mut rng).unwrap();
        let (_, td) = agent.update(&b.experiences, &b.weights).unwrap();
        buf.update_priorities(&b.indices, &td);
    }

    let episodes = 200;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(23);
    let trained: f64 = (0..episodes)
        .map(|_| {
            let s = eval_rng.gen_range(-1.0..1.0);
            bandit_reward(s, agent.policy(&[s])[0])
        })
        .sum::<f64>()
        / episodes as f64;
    let random_means: Vec<f64> = (0..50)
        .map(|_| {
            (0..episodes)
                .map(|_| {
                    let s = eval_rng.gen_range(-1.0..1.0);
                    bandit_reward(s, eval_rng.gen_range(-bound..bound))
                })
                .sum::<f64>()
                / episodes as f64
        })
        .collect();
    let m = random_means.iter().sum::<f64>() / 50.0;
    let sd = (random_means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 49.0).sqrt();
    (trained, m, sd)
}

// Synthetic data where elongation is driven by the maximum of a descriptor
// that the raw-fraction model never sees.
pub fn hidden_feature_setup() -> (LoadedDataset, ElementDescriptorTable, Vec<Composition>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pool = 12;
    let hidden: Vec<f64> = (0..N_ELEMENTS)
        .map(|i| if i < pool { rng.gen_range(0.0..10.0) } else { 0.0 })
        .collect();
    let table = ElementDescriptorTable::bundled()
        .with_descriptor("hidden", hidden.clone())
        .unwrap();
    let lin: Vec<[f64; N_PROPERTIES]> = (0..pool)
        .map(|_| {
            let mut w = [0.0; N_PROPERTIES];
            w.iter_mut().for_each(|x| *x = rng.gen_range(0.5..2.0));
            w
        })
        .collect();
    let make = |elems: &[usize], rng: &mut ChaCha8Rng| {
        let mut f = vec![0.0; N_ELEMENTS];
        for &e in elems {
            f[e] = rng.gen_range(5.0..40.0);
        }
        Composition::normalized(f).unwrap()
    };
    let targets = |c: &Composition, rng: &mut ChaCha8Rng| {
        let mut v = [0.0; N_PROPERTIES];
        for (j, x) in v.iter_mut().enumerate() {
            *x = c.present().map(|i| c.get(i) / 100.0 * lin[i][j] * 10.0).sum::<f64>();
        }
        let hmax = c.present().map(|i| hidden[i]).fold(f64::MIN, f64::max);
        v[Property::Elongation.index()] = 4.0 * hmax + rng.gen_range(-0.05..0.05);
        v
    };
    let idx: Vec<usize> = (0..pool).collect();
    let mut regression = Vec::new();
    let mut classification = Vec::new();
    for _ in 0..400 {
        let k = rng.gen_range(3..=5);
        let elems: Vec<usize> = idx.choose_multiple(&mut rng, k).copied().collect();
        let c = make(&elems, &mut rng);
        let v = targets(&c, &mut rng);
        classification.push(ClassifiedRow {
            composition: c.clone(),
            label: if v[6] > 20.0 { ClassLabel::Bmg } else { ClassLabel::Cra },
        });
        regression.push(RegressionRow {
            composition: c,
            properties: PropertyVector::from_full(v),
        });
    }
    // window: every state contains the highest-`hidden` element, so true
    // elongation is constant while the other fractions move
    let top = (0..pool).max_by(|&a, &b| hidden[a].total_cmp(&hidden[b])).unwrap();
    let others: Vec<usize> = (0..pool).filter(|&i| i != top).collect();
    let window: Vec<Composition> = (0..24)
        .map(|_| {
            let mut elems: Vec<usize> = others.choose_multiple(&mut rng, 3).copied().collect();
            elems.push(top);
            make(&elems, &mut rng)
        })
        .collect();
    let data = LoadedDataset {
        regression,
        classification,
        report: LoadReport::default(),
        content_hash: "synthetic-hidden".into(),
    };
    (data, table, window)
}

pub struct HiddenSetup {
    pub data: LoadedDataset,
    pub table: ElementDescriptorTable,
    pub window: Vec<Composition>,
    pub bundle: GuidanceBundle,
}

pub fn hidden() -> &'static HiddenSetup {
    static SETUP: OnceLock<HiddenSetup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let (data, table, window) = hidden_feature_setup();
        let bundle = train_bundle(&data, &table);
        HiddenSetup {
            data,
            table,
            window,
            bundle,
        }
    })
}

pub fn train_bundle(data: &LoadedDataset, table: &ElementDescriptorTable) -> GuidanceBundle {
    let config = GuidanceConfig {
        classifier_folds: 0,
        ..GuidanceConfig::default()
    };
    GuidanceBundle::train(data, table, &config).unwrap()
}

pub fn elongation_amr() -> AmrConfig {
    AmrConfig {
        monitored: vec![Property::Elongation],
        ..AmrConfig::default()
    }
}

pub fn no_rescore(_: &dyn Guidance) -> glassrl::Result<Vec<f64>> {
    Ok(Vec::new())
}

pub struct Mini {
    pub data: LoadedDataset,
    pub table: ElementDescriptorTable,
    pub thresholds: ThresholdSet,
    pub bundle: GuidanceBundle,
    pub bases: Vec<ExplorationBase>,
}

/// Bundled mini dataset with thresholds, a default-config bundle and bases.
pub fn mini() -> &'static Mini {
    static S: OnceLock<Mini> = OnceLock::new();
    S.get_or_init(|| {
        let data = bundled_mini_dataset();
        let table = ElementDescriptorTable::bundled();
        let thresholds = compute_thresholds(&data.regression, 0.8, PercentileMethod::Linear).unwrap();
        let bundle = GuidanceBundle::train(&data, &table, &GuidanceConfig::default()).unwrap();
        let bases = derive_bases(&data.all_compositions(), DEFAULT_BASE_COUNT).unwrap();
        Mini {
            data,
            table,
            thresholds,
            bundle,
            bases,
        }
    })
}

/// Refinement prompts get one fixed feature, knowledge prompts a fixed 0.5.
pub fn mock_llm() -> Arc<dyn LlmClient> {
    Arc::new(MockLlm::new(MockPolicy::Keyword {
        rules: vec![KeywordRule {
            keyword: "selected_features".into(),
            response: refine_json(&["atomic_radius:std"], "size mismatch"),
        }],
        fallback: Some(kbr_json(0.5, "plausible")),
    }))
}

/// 20 episodes of 32 steps.
pub fn smoke_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.env.t_ep = 32;
    c.epochs = 20;
    c.t_max = 640;
    c.batch = 128;
    c.learning_starts = 128;
    c.checkpoint_every = 10;
    c
}

pub fn small_td3(state_dim: usize, action_dim: usize) -> Td3Config {
    Td3Config {
        state_dim,
        action_dim,
        hidden: vec![16, 16],
        action_bound: 2.0,
        state_scale: 1.0,
        seed: 3,
        actor_lr: 1e-3,
        ..Td3Config::default()
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, sd: usize, ad: usize, bound: f64, done: bool) -> Vec<Experience> {
    (0..n)
        .map(|_| Experience {
            s: (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            a: (0..ad).map(|_| rng.gen_range(-bound..bound)).collect(),
            s_next: (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            r: rng.gen_range(-1.0..1.0),
            done,
            source: Source::Live,
        })
        .collect()
}

/// Critic loss on one fixed batch before and after each of `steps` updates.
pub fn critic_overfit_losses(steps: usize) -> Vec<f64> {
    let cfg = Td3Config {
        gamma: 0.0,
        critic_lr: 1e-4,
        actor_lr: 1e-4,
        ..small_td3(3, 2)
    };
    let mut agent = Td3Agent::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = random_batch(&mut rng, 64, 3, 2, 2.0, false);
    let rewards: Vec<f64> = batch.iter().map(|e| e.r).collect();
    let w = vec![1.0; batch.len()];
    let mut out = vec![critic_loss(&agent, &batch, &rewards)];
    for _ in 0..steps {
        agent.update(&batch, &w).unwrap();
        out.push(critic_loss(&agent, &batch, &rewards));
    }
    out
}

// Stub model: every property of composition `id(c)` is `values[id]`.
pub struct Stub {
    pub version: u64,
    pub values: Vec<f64>,
}

pub fn id_of(c: &Composition) -> usize {
    c.get(0).round() as usize - 1
}

pub fn window_state(i: usize) -> Composition {
    let mut f = vec![0.0; N_ELEMENTS];
    f[0] = (i + 1) as f64;
    f[1] = 100.0 - f[0];
    Composition::new(f).unwrap()
}

impl Guidance for Stub {
    fn version(&self) -> u64 {
        self.version
    }

    fn predict(&self, c: &Composition) -> glassrl::Result<Prediction> {
        Ok(Prediction {
            class_prob: 0.9,
            properties: PropertyVector::from_full([self.values[id_of(c)]; N_PROPERTIES]),
        })
    }
}

pub struct StubRetrainer {
    pub values: Vec<f64>,
    pub cv_r2: f64,
}

impl Retrainer for StubRetrainer {
    type Model = Stub;

    fn retrain(&self, _features: &[glassrl::dataset::CandidateFeature]) -> glassrl::Result<(Stub, Option<f64>)> {
        Ok((
            Stub {
                version: 2,
                values: self.values.clone(),
            },
            Some(self.cv_r2),
        ))
    }
}

pub fn vocab() -> Vec<glassrl::dataset::CandidateFeature> {
    ElementDescriptorTable::bundled().vocabulary()
}

pub fn base_input<'a>(
    trigger: TriggerKind,
    window: &'a Window,
    vocabulary: &'a [glassrl::dataset::CandidateFeature],
    llm: &'a dyn LlmClient,
    baseline_r2: f64,
    tau: f64,
) -> RefineInput<'a> {
    RefineInput {
        trigger,
        episode: 1,
        t: 10,
        window,
        variance_check: None,
        correlation_check: None,
        tau_var: [tau; N_PROPERTIES],
        baseline_r2,
        version: 1,
        current_features: &[],
        model_status: "stub".into(),
        vocabulary,
        llm,
        rescore: None,
    }
}
