//! Trained guidance models, the versioned bundle the environment consumes, and
//! the budget-counting wrapper used by the baselines.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cv::{cross_validate_classifier, cross_validate_regressor, MetricReport};
use super::forest::{ForestParams, RandomForest};
use super::rvfl::{EdRvfl, RvflParams};
use crate::dataset::{
    featurize, CandidateFeature, ClassLabel, ClassifiedRow, Composition, ElementDescriptorTable, LoadedDataset,
    Property, PropertyVector, RegressionRow, DEFAULT_SMOTE_K, ELEMENTS, N_PROPERTIES,
};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "glassrl-guidance";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MAX_EXTRA_FEATURES: usize = 3;

/// Raw fractions followed by the appended descriptor features.
pub fn design_row(c: &Composition, extra: &[CandidateFeature], table: &ElementDescriptorTable) -> Result<Vec<f64>> {
    let mut row = c.fractions().to_vec();
    if !extra.is_empty() {
        row.extend(featurize(c, extra, table)?);
    }
    Ok(row)
}

pub fn feature_names(extra: &[CandidateFeature]) -> Vec<String> {
    ELEMENTS
        .iter()
        .map(|s| s.to_string())
        .chain(extra.iter().map(CandidateFeature::name))
        .collect()
}

fn cmp_fractions(a: &Composition, b: &Composition) -> Ordering {
    a.fractions()
        .iter()
        .zip(b.fractions())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn cmp_props(a: &PropertyVector, b: &PropertyVector) -> Ordering {
    let key = |v: Option<f64>| v.map_or(f64::NEG_INFINITY, |x| x);
    a.0.iter()
        .zip(b.0.iter())
        .map(|(x, y)| key(*x).total_cmp(&key(*y)).then(x.is_some().cmp(&y.is_some())))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub forest: ForestParams,
    pub smote_k: usize,
    /// Target BMG/rest ratio after SMOTE; `None` disables over-sampling.
    pub smote_ratio: Option<f64>,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            forest: ForestParams::default(),
            smote_k: DEFAULT_SMOTE_K,
            smote_ratio: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    forest: RandomForest,
    features: Vec<CandidateFeature>,
    table: ElementDescriptorTable,
    pub n_synthetic: usize,
}

impl ClassifierModel {
    /// Rows are put in a canonical order first so the fit does not depend on
    /// input order.
    pub fn train(
        rows: &[ClassifiedRow],
        spec: &ClassifierSpec,
        table: &ElementDescriptorTable,
        seed: u64,
    ) -> Result<Self> {
        Self::train_with_features(rows, &[], spec, table, seed)
    }

    pub fn train_with_features(
        rows: &[ClassifiedRow],
        features: &[CandidateFeature],
        spec: &ClassifierSpec,
        table: &ElementDescriptorTable,
        seed: u64,
    ) -> Result<Self> {
        let mut sorted = rows.to_vec();
        sorted.sort_by(|a, b| cmp_fractions(&a.composition, &b.composition).then(a.label.cmp(&b.label)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_bmg = sorted.iter().filter(|r| r.label == ClassLabel::Bmg).count();
        if n_bmg == 0 || n_bmg == sorted.len() {
            return Err(Error::Model("classifier training data contains a single class".into()));
        }
        let (train, n_synthetic) = match spec.smote_ratio {
            Some(ratio) if n_bmg > spec.smote_k => {
                let out = crate::dataset::smote_oversample(&sorted, ClassLabel::Bmg, spec.smote_k, ratio, &mut rng)?;
                (out.rows, out.n_synthetic)
            }
            Some(_) => {
                log::warn!("too few BMG rows ({n_bmg}) for SMOTE; training without over-sampling");
                (sorted, 0)
            }
            None => (sorted, 0),
        };
        let x = train
            .iter()
            .map(|r| design_row(&r.composition, features, table))
            .collect::<Result<Vec<_>>>()?;
        let y: Vec<bool> = train.iter().map(|r| r.label == ClassLabel::Bmg).collect();
        Ok(ClassifierModel {
            forest: RandomForest::fit(&x, &y, &spec.forest, seed)?,
            features: features.to_vec(),
            table: table.clone(),
            n_synthetic,
        })
    }

    pub fn predict_proba(&self, c: &Composition) -> Result<f64> {
        let x = design_row(c, &self.features, &self.table)?;
        Ok(self.forest.predict_proba(&x))
    }

    pub fn feature_names(&self) -> Vec<String> {
        feature_names(&self.features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    rvfl: EdRvfl,
    features: Vec<CandidateFeature>,
    table: ElementDescriptorTable,
}

impl RegressorModel {
    pub fn train(
        rows: &[RegressionRow],
        features: &[CandidateFeature],
        params: &RvflParams,
        table: &ElementDescriptorTable,
        seed: u64,
    ) -> Result<Self> {
        if features.len() > MAX_EXTRA_FEATURES {
            return Err(Error::Model(format!(
                "at most {MAX_EXTRA_FEATURES} appended features are supported, got {}",
                features.len()
            )));
        }
        let mut sorted = rows.to_vec();
        sorted.sort_by(|a, b| {
            cmp_fractions(&a.composition, &b.composition).then(cmp_props(&a.properties, &b.properties))
        });
        let x = sorted
            .iter()
            .map(|r| design_row(&r.composition, features, table))
            .collect::<Result<Vec<_>>>()?;
        let y: Vec<Vec<Option<f64>>> = Property::ALL
            .iter()
            .map(|&p| sorted.iter().map(|r| r.properties.get(p)).collect())
            .collect();
        Ok(RegressorModel {
            rvfl: EdRvfl::fit(&x, &y, params, seed)?,
            features: features.to_vec(),
            table: table.clone(),
        })
    }

    pub fn predict(&self, c: &Composition) -> Result<[f64; N_PROPERTIES]> {
        Ok(self.predict_many(std::slice::from_ref(c))?[0])
    }

    pub fn predict_many(&self, cs: &[Composition]) -> Result<Vec<[f64; N_PROPERTIES]>> {
        let x = cs
            .iter()
            .map(|c| design_row(c, &self.features, &self.table))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .rvfl
            .predict(&x)?
            .into_iter()
            .map(|row| {
                let mut out = [0.0; N_PROPERTIES];
                out.copy_from_slice(&row);
                out
            })
            .collect())
    }

    pub fn features(&self) -> &[CandidateFeature] {
        &self.features
    }

    pub fn feature_names(&self) -> Vec<String> {
        feature_names(&self.features)
    }
}

/// One guidance evaluation of a composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_prob: f64,
    pub properties: PropertyVector,
}

/// What the environment and reward engine need from the guidance models.
pub trait Guidance: Send + Sync {
    fn version(&self) -> u64;

    fn predict(&self, c: &Composition) -> Result<Prediction>;

    fn predict_many(&self, cs: &[Composition]) -> Result<Vec<Prediction>> {
        cs.iter().map(|c| self.predict(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub classifier: ClassifierSpec,
    pub regressor: RvflParams,
    pub classifier_folds: usize,
    pub regressor_folds: usize,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            classifier: ClassifierSpec::default(),
            regressor: RvflParams::default(),
            classifier_folds: 5,
            regressor_folds: 10,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn hash(&self, extra: &[CandidateFeature]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        for f in extra {
            h.update(f.name().as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScores {
    pub classifier: Option<MetricReport>,
    pub regressor: Option<MetricReport>,
}

impl CvScores {
    pub fn regressor_r2(&self) -> Option<f64> {
        self.regressor.as_ref().and_then(MetricReport::mean_r2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBundle {
    pub version: u64,
    pub classifier: ClassifierModel,
    pub regressor: RegressorModel,
    pub cv: CvScores,
    pub config: GuidanceConfig,
    pub config_hash: String,
    pub dataset_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    format_version: u32,
    bundle: GuidanceBundle,
}

impl GuidanceBundle {
    /// Trains both models on the dataset; CV is skipped for a fold count of 0.
    pub fn train(dataset: &LoadedDataset, table: &ElementDescriptorTable, config: &GuidanceConfig) -> Result<Self> {
        let classifier = ClassifierModel::train(&dataset.classification, &config.classifier, table, config.seed)?;
        let regressor = RegressorModel::train(&dataset.regression, &[], &config.regressor, table, config.seed)?;
        let classifier_cv = match config.classifier_folds {
            0 => None,
            k => Some(cross_validate_classifier(
                &dataset.classification,
                &config.classifier,
                table,
                k,
                true,
                config.seed,
            )?),
        };
        let regressor_cv = match config.regressor_folds {
            0 => None,
            k => Some(cross_validate_regressor(
                &dataset.regression,
                &[],
                &config.regressor,
                table,
                k,
                config.seed,
            )?),
        };
        Ok(GuidanceBundle {
            version: 1,
            classifier,
            regressor,
            cv: CvScores {
                classifier: classifier_cv,
                regressor: regressor_cv,
            },
            config: config.clone(),
            config_hash: config.hash(&[]),
            dataset_hash: dataset.content_hash.clone(),
        })
    }

    /// A copy with a new regressor and the next version number.
    pub fn with_regressor(&self, regressor: RegressorModel, cv: Option<MetricReport>) -> Self {
        let mut next = self.clone();
        next.config_hash = self.config.hash(regressor.features());
        next.regressor = regressor;
        next.cv.regressor = cv;
        next.version = self.version + 1;
        next
    }

    /// 52 element fractions followed by any appended regressor features.
    pub fn feature_names(&self) -> Vec<String> {
        self.regressor.feature_names()
    }

    pub fn predict_class_prob(&self, c: &Composition) -> Result<f64> {
        self.classifier.predict_proba(c)
    }

    pub fn predict_properties(&self, c: &Composition) -> Result<PropertyVector> {
        Ok(PropertyVector::from_full(self.regressor.predict(c)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            bundle: self.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{} is not a version {CHECKPOINT_VERSION} guidance checkpoint",
                path.display()
            )));
        }
        let expected = ck.bundle.config.hash(ck.bundle.regressor.features());
        if expected != ck.bundle.config_hash {
            return Err(Error::Data(format!("config hash mismatch in {}", path.display())));
        }
        Ok(ck.bundle)
    }
}

impl Guidance for GuidanceBundle {
    fn version(&self) -> u64 {
        self.version
    }

    fn predict(&self, c: &Composition) -> Result<Prediction> {
        Ok(Prediction {
            class_prob: self.predict_class_prob(c)?,
            properties: self.predict_properties(c)?,
        })
    }

    fn predict_many(&self, cs: &[Composition]) -> Result<Vec<Prediction>> {
        let props = self.regressor.predict_many(cs)?;
        cs.iter()
            .zip(props)
            .map(|(c, p)| {
                Ok(Prediction {
                    class_prob: self.predict_class_prob(c)?,
                    properties: PropertyVector::from_full(p),
                })
            })
            .collect()
    }
}

impl<G: Guidance + ?Sized> Guidance for std::sync::Arc<G> {
    fn version(&self) -> u64 {
        (**self).version()
    }

    fn predict(&self, c: &Composition) -> Result<Prediction> {
        (**self).predict(c)
    }

    fn predict_many(&self, cs: &[Composition]) -> Result<Vec<Prediction>> {
        (**self).predict_many(cs)
    }
}

/// Counts every prediction and refuses to exceed a fixed budget.
pub struct BudgetedGuidance<G> {
    inner: G,
    budget: u64,
    used: AtomicU64,
}

impl<G: Guidance> BudgetedGuidance<G> {
    pub fn new(inner: G, budget: u64) -> Self {
        BudgetedGuidance {
            inner,
            budget,
            used: AtomicU64::new(0),
        }
    }

    pub fn used(&self) -> u64 {
        self.used.load(AtomicOrdering::SeqCst)
    }

    pub fn remaining(&self) -> u64 {
        self.budget.saturating_sub(self.used())
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: Guidance> Guidance for BudgetedGuidance<G> {
    fn version(&self) -> u64 {
        self.inner.version()
    }

    fn predict(&self, c: &Composition) -> Result<Prediction> {
        let prev = self
            .used
            .fetch_update(AtomicOrdering::SeqCst, AtomicOrdering::SeqCst, |u| {
                (u < self.budget).then_some(u + 1)
            });
        if prev.is_err() {
            return Err(Error::Model(format!("prediction budget of {} exhausted", self.budget)));
        }
        self.inner.predict(c)
    }
}
