//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Later assignments win, so `--set` overrides are simply applied after the
//! file. Unknown keys and malformed values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use heml_core::experiment::{EvalSplit, ExperimentConfig};

/// Keys that must be assigned by the file or an override.
pub const REQUIRED: &[&str] = &["seed", "loss", "epochs", "dict_capacity"];

pub const KEYS: &[&str] = &[
    "num_ids",
    "samples_per_id",
    "input_dim",
    "center_scale",
    "noise_sigma",
    "nuisance_dims",
    "nuisance_sigma",
    "epochs",
    "groups",
    "per_group",
    "base_lr",
    "weight_decay",
    "sgd_momentum",
    "dict_capacity",
    "ema_momentum",
    "seed",
    "loss",
    "include_past_positives",
    "metric",
    "hidden_dims",
    "embed_dim",
    "id_loss",
    "decay_biases",
    "triplet_margin",
    "ranked_alpha",
    "ranked_beta",
    "infonce_temperature",
    "hard_count",
    "eval_split",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { experiment: ExperimentConfig::default(), out_dir: PathBuf::from("runs/default") }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("invalid value '{value}' for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value '{value}' for {key}: expected true or false")),
    }
}

/// Splits `key=value`, trimming both sides.
pub fn split_assignment(s: &str) -> Result<(&str, &str), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    Ok((k.trim(), v.trim()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let s = &mut self.experiment.synth;
        let t = &mut self.experiment.train;
        match key {
            "num_ids" => s.num_ids = parse(key, value)?,
            "samples_per_id" => s.samples_per_id = parse(key, value)?,
            "input_dim" => s.input_dim = parse(key, value)?,
            "center_scale" => s.center_scale = parse(key, value)?,
            "noise_sigma" => s.noise_sigma = parse(key, value)?,
            "nuisance_dims" => s.nuisance_dims = parse(key, value)?,
            "nuisance_sigma" => s.nuisance_sigma = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "groups" => t.groups = parse(key, value)?,
            "per_group" => t.per_group = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "sgd_momentum" => t.sgd_momentum = parse(key, value)?,
            "dict_capacity" => t.dict_capacity = parse(key, value)?,
            "ema_momentum" => t.ema_momentum = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "loss" => t.loss = value.parse().map_err(|e: heml_core::Error| e.to_string())?,
            "include_past_positives" => t.include_past_positives = parse_bool(key, value)?,
            "metric" => t.metric = parse(key, value)?,
            "hidden_dims" => {
                t.hidden_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_, _>>()?
                }
            }
            "embed_dim" => t.embed_dim = parse(key, value)?,
            "id_loss" => t.id_loss = parse_bool(key, value)?,
            "decay_biases" => t.decay_biases = parse_bool(key, value)?,
            "triplet_margin" => t.triplet_margin = parse(key, value)?,
            "ranked_alpha" => t.ranked_alpha = parse(key, value)?,
            "ranked_beta" => t.ranked_beta = parse(key, value)?,
            "infonce_temperature" => t.infonce_temperature = parse(key, value)?,
            "hard_count" => t.hard_count = parse(key, value)?,
            "eval_split" => self.experiment.eval_split = parse::<EvalSplit>(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Parses file text, then applies `overrides` in order.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, String> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).map_err(|e| format!("line {}: {e}", n + 1))?;
            cfg.set(k, v).map_err(|e| format!("line {}: {e}", n + 1))?;
            seen.insert(k.to_string());
        }
        for o in overrides {
            let (k, v) = split_assignment(o)?;
            cfg.set(k, v)?;
            seen.insert(k.to_string());
        }
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !seen.contains(*k)).collect();
        if !missing.is_empty() {
            return Err(format!("missing required config keys: {}", missing.join(", ")));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let s = &self.experiment.synth;
        let t = &self.experiment.train;
        let hidden: Vec<String> = t.hidden_dims.iter().map(|d| d.to_string()).collect();
        let values: Vec<String> = vec![
            s.num_ids.to_string(),
            s.samples_per_id.to_string(),
            s.input_dim.to_string(),
            s.center_scale.to_string(),
            s.noise_sigma.to_string(),
            s.nuisance_dims.to_string(),
            s.nuisance_sigma.to_string(),
            t.epochs.to_string(),
            t.groups.to_string(),
            t.per_group.to_string(),
            t.base_lr.to_string(),
            t.weight_decay.to_string(),
            t.sgd_momentum.to_string(),
            t.dict_capacity.to_string(),
            t.ema_momentum.to_string(),
            t.seed.to_string(),
            t.loss.to_string(),
            t.include_past_positives.to_string(),
            t.metric.to_string(),
            hidden.join(","),
            t.embed_dim.to_string(),
            t.id_loss.to_string(),
            t.decay_biases.to_string(),
            t.triplet_margin.to_string(),
            t.ranked_alpha.to_string(),
            t.ranked_beta.to_string(),
            t.infonce_temperature.to_string(),
            t.hard_count.to_string(),
            self.experiment.eval_split.to_string(),
            self.out_dir.display().to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "seed = 3\nloss = he\nepochs = 2\ndict_capacity = 64\n";

    #[test]
    fn overrides_win_over_file() {
        let cfg = RunConfig::from_text(BASE, &["seed=11".into()]).unwrap();
        assert_eq!(cfg.experiment.train.seed, 11);
        let cfg = RunConfig::from_text(BASE, &[]).unwrap();
        assert_eq!(cfg.experiment.train.seed, 3);
    }

    #[test]
    fn rejects_unknown_keys_bad_values_and_missing_keys() {
        let e = RunConfig::from_text(&format!("{BASE}colour = red\n"), &[]).unwrap_err();
        assert!(e.contains("unknown config key 'colour'"), "{e}");
        let e = RunConfig::from_text(BASE, &["loss=nope".into()]).unwrap_err();
        assert!(e.contains("unknown loss"), "{e}");
        let e = RunConfig::from_text(BASE, &["epochs=many".into()]).unwrap_err();
        assert!(e.contains("epochs"), "{e}");
        let e = RunConfig::from_text("seed = 1\n", &[]).unwrap_err();
        assert!(e.contains("loss") && e.contains("dict_capacity"), "{e}");
    }

    #[test]
    fn comments_and_round_trip() {
        let text = format!("# smoke\n{BASE}hidden_dims = 8, 4  # two layers\neval_split = ids:2\n\n");
        let cfg = RunConfig::from_text(&text, &[]).unwrap();
        assert_eq!(cfg.experiment.train.hidden_dims, vec![8, 4]);
        assert_eq!(cfg.experiment.eval_split, EvalSplit::Identities(2));
        let back = RunConfig::from_text(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }
}
