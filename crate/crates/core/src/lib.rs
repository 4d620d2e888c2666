//! Normalized-likelihood speaker verification scoring under enrollment/test
//! domain mismatch.
//!
//! * [`model`]: spherical two-level Gaussian model and matched-condition scoring
//! * [`adapt`]: decoupled scoring with a learned linear transform, the
//!   adaptation baseline and multi-domain stats with controlled label sharing
//! * [`simulate`]: synthetic cross-domain worlds with known ground truth
//! * [`eval`]: trials, batch scoring and equal error rate
//! * [`experiment`]: method comparison and sweeps over domain pairs
//! * [`io`]: plain-text file formats

pub mod adapt;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod model;
pub mod simulate;

pub use adapt::{
    dat_log_score, dsd_log_score, mdt_estimate, objective_and_gradient, train_transform,
    transform_apply, transformed_predictive_log_density, BatchSize, DomainTransform,
    LabelMixConfig, TrainConfig, TransformInit,
};
pub use data::{Embedding, LabeledDataset, Record};
pub use error::{Error, Result};
pub use eval::{
    compute_eer, make_trials, score_trials, EerResult, Method, ScoreRecord, TrialLabel,
};
pub use model::{
    build_enrollment_model, estimate_domain_stats, marginal_log_density, nl_log_score,
    predictive_log_density, DomainStats, EnrollmentModel, StatsOptions,
};
pub use simulate::{generate_world, WorldConfig};
