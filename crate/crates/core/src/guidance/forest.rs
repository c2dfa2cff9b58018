//! Bagged CART ensemble for the BMG-vs-rest probability.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaxFeatures {
    All,
    Sqrt,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, n_features: usize) -> usize {
        match self {
            MaxFeatures::All => n_features,
            MaxFeatures::Sqrt => ((n_features as f64).sqrt().round() as usize).max(1),
            MaxFeatures::Count(k) => k.clamp(1, n_features),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 24,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        positive: bool,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> bool {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { positive } => return *positive,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    fn fit(x: &[Vec<f64>], y: &[bool], samples: Vec<usize>, params: &ForestParams, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = DecisionTree { nodes: Vec::new() };
        let n_features = x[0].len();
        let k = params.max_features.resolve(n_features);
        tree.grow(x, y, samples, 0, params, k, rng);
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        x: &[Vec<f64>],
        y: &[bool],
        samples: Vec<usize>,
        depth: usize,
        params: &ForestParams,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let id = self.nodes.len();
        let n_pos = samples.iter().filter(|&&i| y[i]).count();
        // ties go to the positive class
        let majority = 2 * n_pos >= samples.len();
        self.nodes.push(Node::Leaf { positive: majority });
        if depth >= params.max_depth || samples.len() < params.min_samples_split || n_pos == 0 || n_pos == samples.len()
        {
            return id;
        }
        let Some((feature, threshold)) = best_split(x, y, &samples, params.min_samples_leaf, k, rng) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = samples.into_iter().partition(|&i| x[i][feature] <= threshold);
        let left = self.grow(x, y, l, depth + 1, params, k, rng);
        let right = self.grow(x, y, r, depth + 1, params, k, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

/// Best Gini split over `k` randomly drawn features that separate the node.
fn best_split(
    x: &[Vec<f64>],
    y: &[bool],
    samples: &[usize],
    min_leaf: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, f64)> {
    let n_features = x[0].len();
    let mut features: Vec<usize> = (0..n_features).collect();
    features.shuffle(rng);
    let n = samples.len();
    let total_pos = samples.iter().filter(|&&i| y[i]).count();
    let parent = gini(total_pos, n);
    let mut best: Option<(f64, usize, f64)> = None;
    let mut tried = 0;
    let mut order: Vec<(f64, bool)> = Vec::with_capacity(n);
    for &f in &features {
        if tried >= k && best.is_some() {
            break;
        }
        order.clear();
        order.extend(samples.iter().map(|&i| (x[i][f], y[i])));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        if order[0].0 == order[n - 1].0 {
            continue;
        }
        tried += 1;
        let mut left_pos = 0;
        for split in 1..n {
            if order[split - 1].1 {
                left_pos += 1;
            }
            if order[split].0 == order[split - 1].0 || split < min_leaf || n - split < min_leaf {
                continue;
            }
            let wl = split as f64 / n as f64;
            let impurity = wl * gini(left_pos, split) + (1.0 - wl) * gini(total_pos - left_pos, n - split);
            let gain = parent - impurity;
            if best.map_or(true, |(g, _, _)| gain > g) {
                let threshold = 0.5 * (order[split - 1].0 + order[split].0);
                best = Some((gain, f, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    n_features: usize,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[bool], params: &ForestParams, seed: u64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(invalid("forest needs a non-empty design matrix matching the labels"));
        }
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(invalid("classifier training data contains a single class"));
        }
        if params.n_trees == 0 {
            return Err(invalid("forest needs at least one tree"));
        }
        let n = x.len();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let samples: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                DecisionTree::fit(x, y, samples, params, &mut rng)
            })
            .collect();
        Ok(RandomForest {
            trees,
            n_features: x[0].len(),
        })
    }

    /// Fraction of trees voting positive.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.predict(x)).count();
        votes as f64 / self.trees.len() as f64
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_split_separates_a_step() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.0]).collect();
        let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let params = ForestParams {
            n_trees: 1,
            bootstrap: false,
            max_features: MaxFeatures::All,
            ..ForestParams::default()
        };
        let f = RandomForest::fit(&x, &y, &params, 0).unwrap();
        assert_eq!(f.trees[0].depth(), 1);
        assert_eq!(f.predict_proba(&[3.0, 0.0]), 0.0);
        assert_eq!(f.predict_proba(&[15.0, 0.0]), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(RandomForest::fit(&x, &[true, true], &ForestParams::default(), 0).is_err());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i * 7 % 13) as f64, (i % 5) as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| (i * 7 % 13) > 6).collect();
        let a = RandomForest::fit(&x, &y, &ForestParams::default(), 11).unwrap();
        let b = RandomForest::fit(&x, &y, &ForestParams::default(), 11).unwrap();
        assert_eq!(a, b);
    }
}
