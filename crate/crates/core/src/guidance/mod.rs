//! Classification and regression guidance models.

mod bundle;
mod cv;
mod forest;
pub mod metrics;
mod rvfl;

pub use bundle::{
    design_row, feature_names, BudgetedGuidance, ClassifierModel, ClassifierSpec, CvScores, Guidance, GuidanceBundle,
    GuidanceConfig, Prediction, RegressorModel, CHECKPOINT_FORMAT, MAX_EXTRA_FEATURES,
};
pub use cv::{
    cross_validate_classifier, cross_validate_regressor, kfold_indices, mean_defined, stratified_folds,
    ClassificationMetrics, MetricReport, RegressionMetrics,
};
pub use forest::{DecisionTree, ForestParams, MaxFeatures, RandomForest};
pub use rvfl::{Activation, EdRvfl, RvflParams, MIN_ROWS_PER_TARGET};
