//! Hard-sample-aware metric learning with a momentum key dictionary.
//!
//! The centerpiece is [`find_optimal_boundary`], which places a distance
//! threshold between a query's positives and negatives so that the summed
//! violation is minimal, and the matching gradient in [`he_loss_gradient`].
//! Around it sit the FIFO [`KeyDictionary`], a small MLP encoder with an EMA
//! copy, the [`Trainer`], retrieval metrics and a synthetic data generator.

pub mod baselines;
pub mod dictionary;
pub mod distance;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod he_loss;
pub mod records;
pub mod synth;
pub mod trainer;
pub mod types;

pub use dictionary::{KeyDictionary, LabeledSets};
pub use distance::{distance_matrix, euclidean_distance, negative_cosine_similarity, pairwise_distances};
pub use encoder::{ema_update, EncoderArch, EncoderParams, MomentumConfig};
pub use error::{Error, Result};
pub use evaluator::{evaluate, EvalOptions, RetrievalResult};
pub use experiment::{run_experiment, EvalSplit, ExperimentConfig, ExperimentOutcome};
pub use he_loss::{find_optimal_boundary, he_loss_at, he_loss_batch, he_loss_gradient, he_loss_per_query, BoundaryResult};
pub use synth::{generate, Dataset, SynthConfig};
pub use trainer::{lr_schedule, optimal_lr_for_size, LossKind, StepMetrics, TrainConfig, Trainer};
pub use types::{DistanceList, EmbeddingMatrix, GroupedBatch, IdentityLabel, Metric};
