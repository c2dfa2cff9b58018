//! K-fold cross-validation for the guidance models.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{ClassifierModel, ClassifierSpec, RegressorModel};
use super::metrics::{auc, mape, r2, rmse, Confusion};
use super::rvfl::RvflParams;
use crate::dataset::{CandidateFeature, ClassLabel, ClassifiedRow, ElementDescriptorTable, Property, RegressionRow};
use crate::error::{invalid, Result};

/// Shuffled fold assignment; fold sizes differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_k(n, k)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    Ok(folds)
}

/// Folds that preserve each class's share to within one row.
pub fn stratified_folds<L: Ord + Copy>(labels: &[L], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_k(labels.len(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        for v in members {
            folds[next % k].push(v);
            next += 1;
        }
    }
    Ok(folds)
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(invalid(format!("cross-validation needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(invalid(format!("k = {k} exceeds the {n} available rows")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassificationMetrics {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let c = Confusion::from_scores(scores, labels, 0.5)?;
        Ok(ClassificationMetrics {
            auc: auc(scores, labels)?,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
    pub mape: Option<f64>,
    pub n: usize,
}

impl RegressionMetrics {
    pub fn compute(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        Ok(RegressionMetrics {
            rmse: Some(rmse(y, y_hat)?),
            r2: r2(y, y_hat)?,
            mape: mape(y, y_hat)?,
            n: y.len(),
        })
    }
}

/// Mean over the folds where the metric is defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub folds: usize,
    /// Per-fold metrics averaged over folds.
    pub classification: Option<ClassificationMetrics>,
    pub regression: BTreeMap<Property, RegressionMetrics>,
    pub per_fold_classification: Vec<ClassificationMetrics>,
    pub per_fold_regression: Vec<BTreeMap<Property, RegressionMetrics>>,
    /// Fold id of every input row.
    pub fold_of: Vec<usize>,
    /// Out-of-fold class scores, in input row order.
    pub oof_scores: Vec<f64>,
    /// Out-of-fold property predictions, in input row order.
    pub oof_properties: Vec<[f64; 7]>,
}

impl MetricReport {
    /// Mean over targets of the fold-averaged R².
    pub fn mean_r2(&self) -> Option<f64> {
        mean_defined(self.regression.values().map(|m| m.r2))
    }

    pub fn r2_of(&self, p: Property) -> Option<f64> {
        self.regression.get(&p).and_then(|m| m.r2)
    }
}

fn fold_ids(folds: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for (f, members) in folds.iter().enumerate() {
        for &i in members {
            out[i] = f;
        }
    }
    out
}

pub fn cross_validate_classifier(
    rows: &[ClassifiedRow],
    spec: &ClassifierSpec,
    table: &ElementDescriptorTable,
    k: usize,
    stratified: bool,
    seed: u64,
) -> Result<MetricReport> {
    let labels: Vec<ClassLabel> = rows.iter().map(|r| r.label).collect();
    let folds = if stratified {
        stratified_folds(&labels, k, seed)?
    } else {
        kfold_indices(rows.len(), k, seed)?
    };
    let fold_of = fold_ids(&folds, rows.len());

    let results: Vec<(Vec<usize>, Vec<f64>)> = folds
        .par_iter()
        .enumerate()
        .map(|(f, test)| -> Result<(Vec<usize>, Vec<f64>)> {
            let train: Vec<ClassifiedRow> = (0..rows.len())
                .filter(|&i| fold_of[i] != f)
                .map(|i| rows[i].clone())
                .collect();
            let model = ClassifierModel::train(&train, spec, table, seed.wrapping_add(f as u64))?;
            let scores = test
                .iter()
                .map(|&i| model.predict_proba(&rows[i].composition))
                .collect::<Result<Vec<f64>>>()?;
            Ok((test.clone(), scores))
        })
        .collect::<Result<_>>()?;

    let mut oof_scores = vec![0.0; rows.len()];
    let mut per_fold = Vec::with_capacity(k);
    for (test, scores) in &results {
        let truth: Vec<bool> = test.iter().map(|&i| rows[i].label == ClassLabel::Bmg).collect();
        per_fold.push(ClassificationMetrics::compute(scores, &truth)?);
        for (&i, &s) in test.iter().zip(scores) {
            oof_scores[i] = s;
        }
    }
    let mean = ClassificationMetrics {
        auc: mean_defined(per_fold.iter().map(|m| m.auc)),
        precision: mean_defined(per_fold.iter().map(|m| m.precision)),
        recall: mean_defined(per_fold.iter().map(|m| m.recall)),
        f1: mean_defined(per_fold.iter().map(|m| m.f1)),
    };
    Ok(MetricReport {
        folds: k,
        classification: Some(mean),
        regression: BTreeMap::new(),
        per_fold_classification: per_fold,
        per_fold_regression: Vec::new(),
        fold_of,
        oof_scores,
        oof_properties: Vec::new(),
    })
}

pub fn cross_validate_regressor(
    rows: &[RegressionRow],
    features: &[CandidateFeature],
    params: &RvflParams,
    table: &ElementDescriptorTable,
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    let folds = kfold_indices(rows.len(), k, seed)?;
    let fold_of = fold_ids(&folds, rows.len());

    let results: Vec<(Vec<usize>, Vec<[f64; 7]>)> = folds
        .par_iter()
        .enumerate()
        .map(|(f, test)| -> Result<(Vec<usize>, Vec<[f64; 7]>)> {
            let train: Vec<RegressionRow> = (0..rows.len())
                .filter(|&i| fold_of[i] != f)
                .map(|i| rows[i].clone())
                .collect();
            let model = RegressorModel::train(&train, features, params, table, seed.wrapping_add(f as u64))?;
            let comps: Vec<_> = test.iter().map(|&i| rows[i].composition.clone()).collect();
            Ok((test.clone(), model.predict_many(&comps)?))
        })
        .collect::<Result<_>>()?;

    let mut oof = vec![[0.0; 7]; rows.len()];
    let mut per_fold = Vec::with_capacity(k);
    for (test, preds) in &results {
        let mut fold_metrics = BTreeMap::new();
        for p in Property::ALL {
            let (y, y_hat): (Vec<f64>, Vec<f64>) = test
                .iter()
                .zip(preds)
                .filter_map(|(&i, pr)| rows[i].properties.get(p).map(|v| (v, pr[p.index()])))
                .unzip();
            if !y.is_empty() {
                fold_metrics.insert(p, RegressionMetrics::compute(&y, &y_hat)?);
            }
        }
        per_fold.push(fold_metrics);
        for (&i, pr) in test.iter().zip(preds) {
            oof[i] = *pr;
        }
    }
    let mut regression = BTreeMap::new();
    for p in Property::ALL {
        let folds_with: Vec<&RegressionMetrics> = per_fold.iter().filter_map(|m| m.get(&p)).collect();
        if folds_with.is_empty() {
            continue;
        }
        regression.insert(
            p,
            RegressionMetrics {
                rmse: mean_defined(folds_with.iter().map(|m| m.rmse)),
                r2: mean_defined(folds_with.iter().map(|m| m.r2)),
                mape: mean_defined(folds_with.iter().map(|m| m.mape)),
                n: folds_with.iter().map(|m| m.n).sum(),
            },
        );
    }
    Ok(MetricReport {
        folds: k,
        classification: None,
        regression,
        per_fold_classification: Vec::new(),
        per_fold_regression: per_fold,
        fold_of,
        oof_scores: Vec::new(),
        oof_properties: oof,
    })
}
