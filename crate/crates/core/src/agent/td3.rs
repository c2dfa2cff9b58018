//! Twin delayed deep deterministic policy gradient.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::Adam;
use super::mlp::{Mlp, OutputActivation};
use crate::dataset::N_ELEMENTS;
use crate::error::{invalid, Error, Result};
use crate::tep::Experience;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Config {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    /// Per-element action bound.
    pub action_bound: f64,
    /// States are multiplied by this before entering the networks.
    pub state_scale: f64,
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: usize,
    /// Target-policy smoothing noise std and clip, as fractions of the bound.
    pub target_noise: f64,
    pub noise_clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Start the actor's output layer at zero, so the first policy is the
    /// null move.
    pub zero_init_actor: bool,
    /// Start critics' output layers at zero.
    pub zero_init_critics: bool,
    pub seed: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            state_dim: N_ELEMENTS,
            action_dim: N_ELEMENTS,
            hidden: vec![256, 256],
            action_bound: 1.0,
            state_scale: 0.01,
            gamma: 0.99,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            actor_lr: 1e-5,
            critic_lr: 1e-3,
            zero_init_actor: true,
            zero_init_critics: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    /// Present on steps where the policy was updated.
    pub actor_loss: Option<f64>,
    pub mean_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Agent {
    pub config: Td3Config,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    pub updates: u64,
    rng: ChaCha8Rng,
}

impl Td3Agent {
    pub fn new(config: Td3Config) -> Result<Self> {
        if config.hidden.is_empty() || config.policy_delay == 0 || !(config.action_bound > 0.0) {
            return Err(invalid(
                "TD3 needs hidden layers, a positive policy delay and a positive action bound",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sizes = |inp: usize, out: usize| {
            let mut v = vec![inp];
            v.extend(&config.hidden);
            v.push(out);
            v
        };
        let actor = Mlp::new(
            &sizes(config.state_dim, config.action_dim),
            OutputActivation::ScaledTanh(config.action_bound),
            config.zero_init_actor,
            &mut rng,
        );
        let critic_sizes = sizes(config.state_dim + config.action_dim, 1);
        let critic1 = Mlp::new(
            &critic_sizes,
            OutputActivation::Identity,
            config.zero_init_critics,
            &mut rng,
        );
        let critic2 = Mlp::new(
            &critic_sizes,
            OutputActivation::Identity,
            config.zero_init_critics,
            &mut rng,
        );
        Ok(Td3Agent {
            actor_opt: Adam::new(actor.n_params(), config.actor_lr),
            critic1_opt: Adam::new(critic1.n_params(), config.critic_lr),
            critic2_opt: Adam::new(critic2.n_params(), config.critic_lr),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            updates: 0,
            rng,
            config,
        })
    }

    fn states(&self, rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(self.config.state_dim, rows.len(), |i, j| {
            rows[j][i] * self.config.state_scale
        })
    }

    /// Critic input: scaled state stacked over the action divided by the bound.
    fn critic_input(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let (sd, n) = states.shape();
        let ad = actions.nrows();
        let bound = self.config.action_bound;
        DMatrix::from_fn(sd + ad, n, |i, j| {
            if i < sd {
                states[(i, j)]
            } else {
                actions[(i - sd, j)] / bound
            }
        })
    }

    /// Deterministic policy output.
    pub fn policy(&self, state: &[f64]) -> Vec<f64> {
        let s = self.states(&[state]);
        self.actor.forward(&s).column(0).iter().copied().collect()
    }

    /// `π(s) + N(0, sigma²)` clipped to the bound; `sigma` is in action units.
    pub fn act<R: rand::Rng + ?Sized>(&self, state: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
        let mut a = self.policy(state);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("positive sigma");
            for v in a.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        let bound = self.config.action_bound;
        a.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
        a
    }

    /// `min(Q1, Q2)(s, π(s))`.
    pub fn value_of(&self, state: &[f64]) -> f64 {
        self.values(&[state])[0]
    }

    pub fn values(&self, states: &[&[f64]]) -> Vec<f64> {
        let s = self.states(states);
        let a = self.actor.forward(&s);
        let x = self.critic_input(&s, &a);
        let q1 = self.critic1.forward(&x);
        let q2 = self.critic2.forward(&x);
        q1.iter().zip(q2.iter()).map(|(a, b)| a.min(*b)).collect()
    }

    pub fn q_values(&self, state: &[f64], action: &[f64]) -> (f64, f64) {
        let s = self.states(&[state]);
        let a = DMatrix::from_column_slice(action.len(), 1, action);
        let x = self.critic_input(&s, &a);
        (self.critic1.forward(&x)[(0, 0)], self.critic2.forward(&x)[(0, 0)])
    }

    /// One TD3 step on a weighted batch. Returns the loss report and the
    /// absolute TD errors of the first critic.
    pub fn update(&mut self, batch: &[Experience], weights: &[f64]) -> Result<(UpdateReport, Vec<f64>)> {
        let n = batch.len();
        if n == 0 || weights.len() != n {
            return Err(invalid("update needs a non-empty batch with one weight per entry"));
        }
        let cfg = self.config.clone();
        let bound = cfg.action_bound;
        let s_rows: Vec<&[f64]> = batch.iter().map(|e| e.s.as_slice()).collect();
        let s = self.states(&s_rows);
        let a = DMatrix::from_fn(cfg.action_dim, n, |i, j| batch[j].a[i]);

        let y = self.td_targets(batch)?;
        let x = self.critic_input(&s, &a);
        let (l1, td1) = critic_step(&mut self.critic1, &mut self.critic1_opt, &x, &y, weights);
        let (l2, _) = critic_step(&mut self.critic2, &mut self.critic2_opt, &x, &y, weights);
        if !l1.is_finite() || !l2.is_finite() {
            return Err(Error::Numerical(format!("non-finite critic loss ({l1}, {l2})")));
        }
        self.updates += 1;

        let mut report = UpdateReport {
            critic1_loss: l1,
            critic2_loss: l2,
            actor_loss: None,
            mean_q: 0.0,
        };
        if self.updates % cfg.policy_delay as u64 == 0 {
            let actor_cache = self.actor.forward_cached(&s);
            let pa = Mlp::cache_output(&actor_cache).clone();
            let xq = self.critic_input(&s, &pa);
            let qcache = self.critic1.forward_cached(&xq);
            let q = Mlp::cache_output(&qcache);
            let loss = -q.mean();
            report.mean_q = q.mean();
            // d(-mean Q)/dQ = -1/n
            let gq = DMatrix::from_element(1, n, -1.0 / n as f64);
            let (_, gx) = self.critic1.backward(&qcache, &gq);
            let sd = cfg.state_dim;
            let ga = DMatrix::from_fn(cfg.action_dim, n, |i, j| gx[(sd + i, j)] / bound);
            let (grads, _) = self.actor.backward(&actor_cache, &ga);
            self.actor_opt.step(self.actor.params_mut(), grads.slices());
            if !loss.is_finite() || !self.actor.is_finite() {
                return Err(Error::Numerical(format!("non-finite actor loss {loss}")));
            }
            report.actor_loss = Some(loss);
            self.actor.polyak_into(&mut self.actor_target, cfg.tau);
            self.critic1.polyak_into(&mut self.critic1_target, cfg.tau);
            self.critic2.polyak_into(&mut self.critic2_target, cfg.tau);
        }
        Ok((report, td1))
    }

    /// `r + γ (1 - done) min(Q1', Q2')(s', π'(s') + clipped noise)`.
    pub fn td_targets(&mut self, batch: &[Experience]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let bound = cfg.action_bound;
        let sn_rows: Vec<&[f64]> = batch.iter().map(|e| e.s_next.as_slice()).collect();
        let s_next = self.states(&sn_rows);
        let noise = Normal::new(0.0, cfg.target_noise * bound).map_err(|e| invalid(e.to_string()))?;
        let clip = cfg.noise_clip * bound;
        let mut a_next = self.actor_target.forward(&s_next);
        for v in a_next.iter_mut() {
            let eps = if cfg.target_noise > 0.0 {
                noise.sample(&mut self.rng).clamp(-clip, clip)
            } else {
                0.0
            };
            *v = (*v + eps).clamp(-bound, bound);
        }
        let xt = self.critic_input(&s_next, &a_next);
        let q1t = self.critic1_target.forward(&xt);
        let q2t = self.critic2_target.forward(&xt);
        Ok(batch
            .iter()
            .enumerate()
            .map(|(j, e)| {
                if e.done {
                    e.r
                } else {
                    e.r + cfg.gamma * q1t[(0, j)].min(q2t[(0, j)])
                }
            })
            .collect())
    }

    /// Deterministic policy for many states at once.
    pub fn policy_batch(&self, states: &[&[f64]]) -> Vec<Vec<f64>> {
        let out = self.actor.forward(&self.states(states));
        out.column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    /// SHA-256 over every network parameter, for resume checks.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for net in [
            &self.actor,
            &self.actor_target,
            &self.critic1,
            &self.critic2,
            &self.critic1_target,
            &self.critic2_target,
        ] {
            for p in net.params() {
                for v in p {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.update(self.updates.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Weighted MSE step `mean(w (Q - y)^2)`; returns the loss and `|Q - y|`.
fn critic_step(net: &mut Mlp, opt: &mut Adam, x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let cache = net.forward_cached(x);
    let q = Mlp::cache_output(&cache);
    let td: Vec<f64> = q.iter().zip(y).map(|(q, y)| q - y).collect();
    let loss = td.iter().zip(w).map(|(d, w)| w * d * d).sum::<f64>() / n;
    let g = DMatrix::from_fn(1, y.len(), |_, j| 2.0 * w[j] * td[j] / n);
    let (grads, _) = net.backward(&cache, &g);
    opt.step(net.params_mut(), grads.slices());
    (loss, td.iter().map(|d| d.abs()).collect())
}

/// Critic loss on a batch without updating anything.
pub fn critic_loss(agent: &Td3Agent, batch: &[Experience], targets: &[f64]) -> f64 {
    let rows: Vec<&[f64]> = batch.iter().map(|e| e.s.as_slice()).collect();
    let s = agent.states(&rows);
    let a = DMatrix::from_fn(agent.config.action_dim, batch.len(), |i, j| batch[j].a[i]);
    let q = agent.critic1.forward(&agent.critic_input(&s, &a));
    q.iter().zip(targets).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / targets.len() as f64
}
