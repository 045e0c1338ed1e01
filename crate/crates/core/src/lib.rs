//! Detection of unknown ("out-of-distribution") objects from the softmax output
//! of a semantic segmentation network.
//!
//! The pipeline turns a [`ProbMap`] into pixel-wise uncertainty maps
//! ([`scores`]), thresholds the entropy map into candidate segments with
//! hand-crafted features ([`segments`]), removes false indications with a
//! logistic-regression meta classifier ([`meta`]) and evaluates detection
//! errors, AuPRC and mIoU ([`eval`]). [`synth`] generates seeded scenes that
//! stand in for a trained network.

pub mod error;
pub mod eval;
pub mod meta;
pub mod npy;
pub mod scores;
pub mod segments;
pub mod synth;
pub mod table;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::{
    match_segments, miou, pixel_pr_curve, sweep, DetectionOutcome, MatchResult, PrCurve,
    SweepOptions, SweepResult,
};
pub use meta::{
    apply_meta_filter, feature_weights, fit_logistic, label_segments, standardize_fit, FitOptions,
    MetaLabel, MetaModel,
};
pub use npy::{read_npy, write_npy, Tensor};
pub use scores::{argmax_map, entropy_map, margin_map, maxprob_map, Metric};
pub use segments::{
    compute_features, connected_components, extract_segments, threshold_mask, BinaryMask,
    Connectivity, SegmentFeatures, SegmentRecord, FEATURE_NAMES,
};
pub use synth::{generate_scene, Benchmark, SceneConfig};
pub use table::{read_feature_csv, write_feature_csv, FeatureTable};
pub use tensor::{LabelMask, ProbMap, ScoreMap, IGNORE_ID, OOD_ID};
