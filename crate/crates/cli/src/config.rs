//! Experiment configuration: a JSON file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use surelock::model::{init_weights_with_std, INIT_STD};
use surelock::{random_prompt, Error, Mode, ModelConfig, RunConfig, Weights};

/// Lists swept by the `sweep` subcommand. Empty lists fall back to the base run's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub epsilon: Vec<f64>,
    pub percentile: Vec<f64>,
    pub steps: Vec<usize>,
    pub gen_len: Vec<usize>,
    pub seed: Vec<u64>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty()
            && self.percentile.is_empty()
            && self.steps.is_empty()
            && self.gen_len.is_empty()
            && self.seed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Architecture used when no weight file is given.
    pub model: ModelConfig,
    /// Weight file (JSON); its embedded architecture wins over `model`.
    pub weights: Option<PathBuf>,
    pub init_seed: u64,
    pub init_std: f64,
    /// Explicit prompt; otherwise one is drawn from the run seed.
    pub prompt: Option<Vec<usize>>,
    pub run: RunConfig,
    pub out_dir: PathBuf,
    /// Also write per-step logits, the input of `verify-bound --trace`.
    pub write_logits: bool,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            weights: None,
            init_seed: 0,
            init_std: INIT_STD,
            prompt: None,
            run: RunConfig::default(),
            out_dir: PathBuf::from("out"),
            write_logits: false,
            sweep: SweepGrid::default(),
        }
    }
}

/// A comma-separated flag value.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

fn parse_list<T: std::str::FromStr>(raw: &str) -> Result<List<T>, String> {
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("cannot parse {s:?}")))
        .collect::<Result<_, _>>()
        .map(List)
}

/// Flags shared by every subcommand; each one overrides its config-file field.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Experiment config (JSON).
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Weight file (JSON).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Standard deviation of the random initialization.
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// KL threshold ε (negative disables locking in effect).
    #[arg(long = "eps", allow_hyphen_values = true)]
    pub epsilon: Option<f64>,
    /// Confidence-gate percentile m.
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub no_gate: bool,
    /// Fraction k of active rows computed in selection and hybrid modes.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub unlock: bool,
    #[arg(long)]
    pub probe_period: Option<usize>,
    #[arg(long)]
    pub eps_unlock: Option<f64>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub gen_len: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub block_len: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub write_logits: bool,
    /// Comma-separated ε values to sweep.
    #[arg(long, value_parser = parse_list::<f64>, allow_hyphen_values = true)]
    pub eps_list: Option<List<f64>>,
    #[arg(long, value_parser = parse_list::<f64>)]
    pub percentile_list: Option<List<f64>>,
    #[arg(long, value_parser = parse_list::<usize>)]
    pub steps_list: Option<List<usize>>,
    #[arg(long, value_parser = parse_list::<usize>)]
    pub gen_len_list: Option<List<usize>>,
    #[arg(long, value_parser = parse_list::<u64>)]
    pub seed_list: Option<List<u64>>,
}

impl ConfigFlags {
    pub fn resolve(&self) -> surelock::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if let Some(w) = &self.weights {
            cfg.weights = Some(w.clone());
        }
        set!(self.init_seed => cfg.init_seed);
        set!(self.init_std => cfg.init_std);
        set!(self.mode => cfg.run.mode);
        set!(self.epsilon => cfg.run.policy.epsilon);
        set!(self.percentile => cfg.run.policy.percentile);
        set!(self.probe_period => cfg.run.policy.probe_period);
        set!(self.eps_unlock => cfg.run.policy.epsilon_unlock);
        set!(self.prompt_len => cfg.run.prompt_len);
        set!(self.gen_len => cfg.run.gen_len);
        set!(self.steps => cfg.run.steps);
        set!(self.temperature => cfg.run.temperature);
        set!(self.seed => cfg.run.seed);
        set!(self.out => cfg.out_dir);
        set!(self.eps_list.as_ref().map(|l| l.0.clone()) => cfg.sweep.epsilon);
        set!(self.percentile_list.as_ref().map(|l| l.0.clone()) => cfg.sweep.percentile);
        set!(self.steps_list.as_ref().map(|l| l.0.clone()) => cfg.sweep.steps);
        set!(self.gen_len_list.as_ref().map(|l| l.0.clone()) => cfg.sweep.gen_len);
        set!(self.seed_list.as_ref().map(|l| l.0.clone()) => cfg.sweep.seed);
        if self.block_len.is_some() {
            cfg.run.block_len = self.block_len;
        }
        if self.k.is_some() {
            cfg.run.policy.hybrid_fraction = self.k;
        }
        if self.no_gate {
            cfg.run.policy.gate_enabled = false;
        }
        if self.unlock {
            cfg.run.policy.unlock_enabled = true;
        }
        if self.write_logits {
            cfg.write_logits = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> surelock::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn validate(&self) -> surelock::Result<()> {
        if let Some(path) = &self.weights {
            if !path.exists() {
                return Err(Error::InvalidConfig(format!(
                    "weight file {} does not exist",
                    path.display()
                )));
            }
        } else {
            self.model.validate()?;
            if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
                return Err(Error::InvalidConfig(format!("init_std {} is not usable", self.init_std)));
            }
        }
        if let Some(p) = &self.prompt {
            if p.len() != self.run.prompt_len {
                return Err(Error::InvalidConfig(format!(
                    "prompt has {} tokens but prompt_len is {}",
                    p.len(),
                    self.run.prompt_len
                )));
            }
        }
        self.run.policy.validate()
    }

    pub fn load_weights(&self) -> surelock::Result<Weights> {
        let w = match &self.weights {
            Some(path) => Weights::load_json(path)?,
            None => init_weights_with_std(&self.model, self.init_seed, self.init_std)?,
        };
        self.run.validate(w.config.max_seq)?;
        Ok(w)
    }

    pub fn prompt_for(&self, run: &RunConfig, vocab_size: usize) -> Vec<usize> {
        self.prompt
            .clone()
            .unwrap_or_else(|| random_prompt(vocab_size, run.prompt_len, run.seed))
    }
}
