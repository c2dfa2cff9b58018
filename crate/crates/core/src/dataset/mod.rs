//! Dataset ingestion, design thresholds, descriptor features and class
//! balancing.

mod composition;
mod features;
mod load;
mod smote;
mod thresholds;

pub use composition::{
    element_index, ClassLabel, Composition, Property, PropertyVector, ELEMENTS, N_ELEMENTS, N_PROPERTIES,
    SUM_TOLERANCE, ZERO_SNAP,
};
pub use features::{featurize, parse_features, Aggregation, CandidateFeature, ElementDescriptorTable};
pub use load::{
    bundled_mini_dataset, load_dataset, parse_dataset, ClassifiedRow, DatasetSchema, LoadReport, LoadedDataset,
    RegressionRow, RowDiagnostic, LOAD_SUM_TOLERANCE,
};
pub use smote::{smote_oversample, synthetic_count, SmoteOutput, DEFAULT_SMOTE_K};
pub use thresholds::{
    compute_thresholds, percentile, target_values, PercentileMethod, Target, ThresholdDocument, ThresholdEntry,
    ThresholdSet, THRESHOLD_SCHEMA_VERSION,
};
