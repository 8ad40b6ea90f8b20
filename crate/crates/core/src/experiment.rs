//! Synthesize, train, evaluate.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{invalid, Result};
use crate::evaluator::{evaluate, EvalOptions, RetrievalResult};
use crate::synth::{generate, Dataset, SynthConfig};
use crate::trainer::{derive_seed, streams, StepMetrics, TrainConfig, Trainer};
use crate::types::IdentityLabel;

/// How the evaluation set is carved out of the synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSplit {
    /// The last `n` samples of every identity.
    Samples(usize),
    /// The last `n` identities, never seen in training.
    Identities(usize),
}

impl std::str::FromStr for EvalSplit {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, n) = s.split_once(':').ok_or_else(|| invalid(format!("eval split '{s}' is not kind:n")))?;
        let n: usize = n.parse().map_err(|_| invalid(format!("eval split count '{n}' is not a number")))?;
        match kind {
            "samples" => Ok(EvalSplit::Samples(n)),
            "ids" => Ok(EvalSplit::Identities(n)),
            _ => Err(invalid(format!("eval split kind '{kind}' (expected samples or ids)"))),
        }
    }
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalSplit::Samples(n) => write!(f, "samples:{n}"),
            EvalSplit::Identities(n) => write!(f, "ids:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// The data seed is derived from `train.seed`; `synth.seed` is ignored.
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval_split: EvalSplit,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { synth: SynthConfig::default(), train: TrainConfig::default(), eval_split: EvalSplit::Samples(8) }
    }
}

pub struct ExperimentOutcome {
    pub metrics: Vec<StepMetrics>,
    pub retrieval: RetrievalResult,
    pub encoder: EncoderParams,
}

impl ExperimentOutcome {
    /// Mean configured-loss value over the last tenth of training.
    pub fn final_loss(&self) -> f64 {
        let n = (self.metrics.len() / 10).max(1).min(self.metrics.len());
        if n == 0 {
            return f64::NAN;
        }
        self.metrics[self.metrics.len() - n..].iter().map(|m| m.loss_metric).sum::<f64>() / n as f64
    }
}

/// Dataset generated from the experiment seed.
pub fn experiment_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate(&SynthConfig { seed: derive_seed(cfg.train.seed, streams::DATA), ..cfg.synth.clone() })
}

/// Splits into (train, eval) according to `split`.
pub fn split_dataset(data: &Dataset, split: EvalSplit) -> Result<(Dataset, Dataset)> {
    match split {
        EvalSplit::Samples(n) => data.split_per_identity(n),
        EvalSplit::Identities(n) => {
            if n == 0 || n >= data.num_ids {
                return Err(invalid(format!("cannot hold out {n} of {} identities", data.num_ids)));
            }
            let cut = data.num_ids - n;
            let (train_rows, eval_rows): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|&i| data.labels[i].index() < cut);
            let eval_labels = eval_rows.iter().map(|&i| IdentityLabel((data.labels[i].index() - cut) as u32)).collect();
            let train = Dataset::new(
                data.inputs.select_rows(&train_rows),
                train_rows.iter().map(|&i| data.labels[i]).collect(),
                cut,
            )?;
            Ok((train, Dataset::new(data.inputs.select_rows(&eval_rows), eval_labels, n)?))
        }
    }
}

/// Embeds the evaluation set with `encoder` and scores it against itself,
/// excluding each query's own row from its gallery.
pub fn evaluate_encoder(encoder: &EncoderParams, eval: &Dataset, opts: &EvalOptions) -> Result<RetrievalResult> {
    let emb = encoder.encode(&eval.inputs)?;
    evaluate(&emb, &eval.labels, &emb, &eval.labels, &EvalOptions { exclude_self: true, ..*opts })
}

pub fn run_experiment(cfg: &ExperimentConfig, on_step: impl FnMut(&StepMetrics)) -> Result<ExperimentOutcome> {
    let data = experiment_data(cfg)?;
    let (train, eval) = split_dataset(&data, cfg.eval_split)?;
    let mut trainer = Trainer::new(cfg.train.clone(), train.inputs.dim(), train.num_ids, train.len())?;
    let metrics = trainer.run(&train, on_step)?;
    let retrieval = evaluate_encoder(&trainer.main, &eval, &EvalOptions { metric: cfg.train.metric, exclude_self: true })?;
    Ok(ExperimentOutcome { metrics, retrieval, encoder: trainer.main })
}
