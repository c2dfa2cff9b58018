//! Prioritized replay backed by a sum tree.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tep::Experience;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumTree {
    capacity: usize,
    /// Heap layout: node `i` has children `2i+1`, `2i+2`; leaves start at
    /// `capacity - 1`.
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1).next_power_of_two();
        SumTree {
            capacity,
            nodes: vec![0.0; 2 * capacity - 1],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[0]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.capacity - 1 + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut node = self.capacity - 1 + i;
        self.nodes[node] = value;
        while node > 0 {
            node = (node - 1) / 2;
            self.nodes[node] = self.nodes[2 * node + 1] + self.nodes[2 * node + 2];
        }
    }

    /// Leaf whose cumulative interval contains `mass`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 0;
        while node < self.capacity - 1 {
            let left = 2 * node + 1;
            if mass < self.nodes[left] || self.nodes[left + 1] <= 0.0 {
                node = left;
            } else {
                mass -= self.nodes[left];
                node = left + 1;
            }
        }
        node - (self.capacity - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerConfig {
    pub capacity: usize,
    /// Sampling exponent on priorities.
    pub alpha: f64,
    /// Importance-weight exponent.
    pub beta: f64,
    pub eps: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        PerConfig {
            capacity: 100_000,
            alpha: 0.6,
            beta: 0.4,
            eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrioritizedReplay {
    pub config: PerConfig,
    tree: SumTree,
    data: Vec<Experience>,
    next: usize,
    max_priority: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub experiences: Vec<Experience>,
    /// Importance weights, normalized by the batch maximum.
    pub weights: Vec<f64>,
}

impl PrioritizedReplay {
    pub fn new(config: PerConfig) -> Self {
        PrioritizedReplay {
            tree: SumTree::new(config.capacity),
            data: Vec::new(),
            next: 0,
            max_priority: 1.0,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// New entries get the largest priority seen so far.
    pub fn push(&mut self, e: Experience) {
        let i = self.next;
        if i < self.data.len() {
            self.data[i] = e;
        } else {
            self.data.push(e);
        }
        self.tree.set(i, self.max_priority.powf(self.config.alpha));
        self.next = (self.next + 1) % self.config.capacity;
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i).powf(1.0 / self.config.alpha)
    }

    /// Sampling probability of entry `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    /// Stratified proportional sampling.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<SampledBatch> {
        if self.data.is_empty() || batch == 0 {
            return Err(invalid("cannot sample from an empty replay buffer"));
        }
        let total = self.tree.total();
        let seg = total / batch as f64;
        let n = self.data.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for k in 0..batch {
            let mass = seg * (k as f64 + rng.gen::<f64>());
            let i = self.tree.find(mass.min(total * (1.0 - 1e-12))).min(self.data.len() - 1);
            let p = self.tree.get(i) / total;
            indices.push(i);
            weights.push((n * p).powf(-self.config.beta));
        }
        let wmax = weights.iter().copied().fold(0.0, f64::max);
        for w in weights.iter_mut() {
            *w /= wmax;
        }
        let experiences = indices.iter().map(|&i| self.data[i].clone()).collect();
        Ok(SampledBatch {
            indices,
            experiences,
            weights,
        })
    }

    /// `priority = |td| + eps`
    pub fn update_priorities(&mut self, indices: &[usize], td_abs: &[f64]) {
        for (&i, &td) in indices.iter().zip(td_abs) {
            let p = td.abs() + self.config.eps;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(i, p.powf(self.config.alpha));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tree_total_and_find() {
        let mut t = SumTree::new(5);
        for (i, v) in [1.0, 2.0, 3.0, 4.0, 0.0].iter().enumerate() {
            t.set(i, *v);
        }
        assert_eq!(t.total(), 10.0);
        assert_eq!(t.find(0.5), 0);
        assert_eq!(t.find(1.5), 1);
        assert_eq!(t.find(5.9), 2);
        assert_eq!(t.find(9.99), 3);
    }

    #[test]
    fn skewed_priorities_are_sampled_proportionally() {
        let mut buf = PrioritizedReplay::new(PerConfig {
            capacity: 4,
            alpha: 1.0,
            ..PerConfig::default()
        });
        for _ in 0..4 {
            buf.push(Experience {
                s: vec![0.0],
                a: vec![0.0],
                s_next: vec![0.0],
                r: 0.0,
                done: false,
                source: crate::tep::Source::Live,
            });
        }
        buf.update_priorities(&[0, 1, 2, 3], &[1.0, 1.0, 1.0, 7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hits = [0usize; 4];
        for _ in 0..2000 {
            for i in buf.sample(8, &mut rng).unwrap().indices {
                hits[i] += 1;
            }
        }
        let frac = hits[3] as f64 / 16000.0;
        let expected = 7.001 / 10.004;
        assert!((frac - expected).abs() < 0.02, "{frac}");
    }
}
