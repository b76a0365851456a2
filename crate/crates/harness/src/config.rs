//! Experiment configuration: one flat record, loadable from TOML, with
//! every field checked before a run starts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use poolmix::mixture::MixtureParams;
use poolmix::surrogate::SurrogateParams;
use poolmix::SearchSpace;
use poolmix_cnn::network::{default_channels, TRAIN_BATCH_FLOOR};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Balanced,
    Spos,
    Bse,
    Mcts,
    MctsWarmup,
    Bruteforce,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Balanced,
        Method::Spos,
        Method::Bse,
        Method::Mcts,
        Method::MctsWarmup,
        Method::Bruteforce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Balanced => "balanced",
            Method::Spos => "spos",
            Method::Bse => "bse",
            Method::Mcts => "mcts",
            Method::MctsWarmup => "mcts-warmup",
            Method::Bruteforce => "bruteforce",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Surrogate,
    Cnn,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "surrogate" => Ok(Self::Surrogate),
            "cnn" => Ok(Self::Cnn),
            _ => Err(format!("unknown backend {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Cifar,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "cifar" => Ok(Self::Cifar),
            _ => Err(format!("unknown dataset {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub backend: BackendKind,

    /// Blocks in the network (stem included).
    pub total_blocks: u32,
    pub num_poolings: u32,
    pub input_size: u32,
    /// Output channels per block; derived from `channel_base` when absent.
    pub channels: Option<Vec<usize>>,
    pub channel_base: usize,

    /// Weight sets of the balanced mixture; ignored by the other methods.
    pub models: usize,
    /// Training iterations per weight set.
    pub iterations: usize,

    pub beta: f64,
    pub delta: f64,
    pub max_ipf_iters: usize,
    pub tau_init: f64,
    /// Defaults to `1 / (100 M)`.
    pub tau_min: Option<f64>,
    pub init_acc: f64,

    pub lambda: f64,
    pub sigma: f64,
    pub history: usize,
    pub eval_batches: usize,
    /// Alternative benchmark table; the shipped one covers `(10, 2, 32)`.
    pub benchmark: Option<PathBuf>,

    pub explore_c: f64,
    /// Uniform warm-up iterations for `mcts-warmup`; defaults to one per leaf.
    pub warmup: Option<usize>,
    pub bse_inv_temp_max: f64,

    pub seed: u64,
    pub top_k: usize,
    pub output: Option<PathBuf>,

    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub synth_per_class: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cap on validation batches in a full evaluation; all when absent.
    pub full_eval_batches: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mix = MixtureParams::default();
        let sur = SurrogateParams::default();
        Self {
            method: Method::Balanced,
            backend: BackendKind::Surrogate,
            total_blocks: 10,
            num_poolings: 2,
            input_size: 32,
            channels: None,
            channel_base: 16,
            models: 4,
            iterations: 5_000,
            beta: mix.beta,
            delta: mix.delta,
            max_ipf_iters: mix.max_ipf_iters,
            tau_init: mix.tau_init,
            tau_min: None,
            init_acc: mix.init_acc,
            lambda: sur.lambda,
            sigma: sur.sigma,
            history: sur.history,
            eval_batches: sur.eval_batches,
            benchmark: None,
            explore_c: 1.0,
            warmup: None,
            bse_inv_temp_max: 100.0,
            seed: 0,
            top_k: 5,
            output: None,
            dataset: DatasetKind::Synthetic,
            data_path: None,
            synth_per_class: 40,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            full_eval_batches: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_toml_str(&text).map_err(|reason| HarnessError::ConfigFile {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn space(&self) -> Result<SearchSpace> {
        Ok(SearchSpace::new(
            self.total_blocks,
            self.num_poolings,
            self.input_size,
        )?)
    }

    pub fn mixture_params(&self) -> MixtureParams {
        MixtureParams {
            beta: self.beta,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            delta: self.delta,
            max_ipf_iters: self.max_ipf_iters,
            init_acc: self.init_acc,
        }
    }

    pub fn surrogate_params(&self) -> SurrogateParams {
        SurrogateParams {
            lambda: self.lambda,
            sigma: self.sigma,
            history: self.history,
            eval_batches: self.eval_batches,
        }
    }

    pub fn channel_schedule(&self) -> Vec<usize> {
        self.channels.clone().unwrap_or_else(|| {
            default_channels(self.total_blocks, self.num_poolings, self.channel_base)
        })
    }

    /// Weight sets the backend holds: `M` for the mixture, one per
    /// configuration for brute force, one otherwise.
    pub fn backend_models(&self, num_configs: usize) -> usize {
        match self.method {
            Method::Balanced => self.models,
            Method::Bruteforce => num_configs,
            _ => 1,
        }
    }

    /// Training iterations of the whole run.
    pub fn total_steps(&self, num_configs: usize) -> usize {
        self.iterations * self.backend_models(num_configs)
    }

    pub fn warmup_steps(&self, num_configs: usize) -> usize {
        match self.method {
            Method::MctsWarmup => self.warmup.unwrap_or(num_configs),
            _ => 0,
        }
    }

    /// Checks every field; all problems are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        let space = SearchSpace::new(self.total_blocks, self.num_poolings, self.input_size);
        if let Err(e) = &space {
            check(false, e.to_string());
        }
        check(self.models >= 1, "models must be at least 1".into());
        check(self.iterations >= 1, "iterations must be at least 1".into());
        check(
            (0.0..=1.0).contains(&self.beta),
            format!("beta {} outside [0, 1]", self.beta),
        );
        check(
            self.delta > 0.0 && self.delta.is_finite(),
            format!("delta {} must be positive", self.delta),
        );
        check(
            self.max_ipf_iters >= 1,
            "max_ipf_iters must be at least 1".into(),
        );
        check(
            self.tau_init > 0.0 && self.tau_init.is_finite(),
            format!("tau_init {} must be positive", self.tau_init),
        );
        if let Some(t) = self.tau_min {
            check(
                t > 0.0 && t <= self.tau_init,
                format!("tau_min {t} must lie in (0, tau_init]"),
            );
        }
        check(
            (0.0..=1.0).contains(&self.init_acc),
            format!("init_acc {} outside [0, 1]", self.init_acc),
        );
        check(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            format!("lambda {} must be non-negative", self.lambda),
        );
        check(
            self.sigma >= 0.0 && self.sigma.is_finite(),
            format!("sigma {} must be non-negative", self.sigma),
        );
        check(self.history >= 1, "history must be at least 1".into());
        check(
            self.eval_batches >= 1,
            "eval_batches must be at least 1".into(),
        );
        check(
            self.explore_c >= 0.0 && self.explore_c.is_finite(),
            format!("explore_c {} must be non-negative", self.explore_c),
        );
        check(
            self.bse_inv_temp_max >= 1.0 && self.bse_inv_temp_max.is_finite(),
            format!(
                "bse_inv_temp_max {} must be at least 1",
                self.bse_inv_temp_max
            ),
        );
        check(self.top_k >= 1, "top_k must be at least 1".into());
        if self.warmup.is_some() && self.method != Method::MctsWarmup {
            check(false, "warmup only applies to mcts-warmup".into());
        }
        if let Ok(space) = &space {
            if let Ok(size) = space.size() {
                check(
                    self.top_k as u64 <= size,
                    format!("top_k {} exceeds the {size} configurations", self.top_k),
                );
            }
        }
        if self.backend == BackendKind::Cnn {
            let ch = self.channel_schedule();
            check(
                ch.len() == self.total_blocks as usize && ch.iter().all(|&c| c > 0),
                format!(
                    "channels must list {} positive widths, got {ch:?}",
                    self.total_blocks
                ),
            );
            check(
                self.channel_base >= 1,
                "channel_base must be at least 1".into(),
            );
            check(
                self.batch_size >= TRAIN_BATCH_FLOOR,
                format!("batch_size {} below {TRAIN_BATCH_FLOOR}", self.batch_size),
            );
            check(
                self.lr >= 0.0 && self.lr.is_finite(),
                format!("lr {} must be non-negative", self.lr),
            );
            check(
                (0.0..1.0).contains(&self.momentum),
                format!("momentum {} outside [0, 1)", self.momentum),
            );
            check(
                self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
                format!("weight_decay {} must be non-negative", self.weight_decay),
            );
            if let Some(n) = self.full_eval_batches {
                check(n >= 1, "full_eval_batches must be at least 1".into());
            }
            match self.dataset {
                DatasetKind::Synthetic => {
                    check(
                        matches!(self.input_size, 16 | 32),
                        format!(
                            "synthetic images are 16 or 32 pixels, got {}",
                            self.input_size
                        ),
                    );
                    check(
                        self.synth_per_class >= 1,
                        "synth_per_class must be at least 1".into(),
                    );
                }
                DatasetKind::Cifar => {
                    check(
                        self.data_path.is_some(),
                        "dataset cifar needs data_path".into(),
                    );
                    check(
                        self.input_size == 32,
                        format!("CIFAR images are 32 pixels, got {}", self.input_size),
                    );
                }
            }
        } else {
            check(
                self.channels.is_none(),
                "channels only apply to the cnn backend".into(),
            );
            let shipped =
                self.total_blocks == 10 && self.num_poolings == 2 && self.input_size == 32;
            check(
                shipped || self.benchmark.is_some(),
                "the surrogate backend needs a benchmark table for this space".into(),
            );
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(errs))
        }
    }
}
