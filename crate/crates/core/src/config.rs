//! Flat on-disk run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterConfig, AdapterMode, ProjectionType};
use crate::error::{Error, Result};
use crate::merge::PairScope;
use crate::model::{hex, Model, ModelConfig};
use crate::task::{TaskKind, TaskSpec};
use crate::train::{TrainPlan, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Lora,
    SharedA,
    FixedShare,
    Aslora,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    CopyClass,
    LayerwiseProbe,
    SeqRegression,
}

/// Every adapter, model, plan and task knob in one flat document.
///
/// Unknown keys are rejected; missing keys take the defaults below, and the
/// copy saved into a run directory has all of them written out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ModeName,
    /// Block size for `fixed_share`.
    pub share_n: usize,
    pub rank: usize,
    pub alpha: f64,
    pub adapted_types: Vec<ProjectionType>,
    pub a_init_std: Option<f64>,

    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,

    pub task: TaskName,
    pub probe_depth: usize,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_eval: usize,
    pub seq_len: usize,
    pub noise_rate: f64,
    pub data_seed: u64,

    pub total_steps: usize,
    pub merge_start: usize,
    pub merge_interval: usize,
    pub merge_budget: usize,
    pub pair_scope: PairScope,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Also checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,

    /// `(n, N)` pairs run by `compare`; each must satisfy `⌈L/n⌉ = L − N`.
    pub compare_pairs: Vec<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let plan = TrainPlan::default();
        let task = TaskSpec::default();
        Self {
            mode: ModeName::Aslora,
            share_n: 3,
            rank: 8,
            alpha: 16.0,
            adapted_types: ProjectionType::ALL.to_vec(),
            a_init_std: None,
            num_layers: model.num_layers,
            model_dim: model.model_dim,
            num_heads: model.num_heads,
            ffn_dim: model.ffn_dim,
            vocab_size: model.vocab_size,
            max_seq_len: model.max_seq_len,
            task: TaskName::LayerwiseProbe,
            probe_depth: 2,
            num_classes: task.num_classes,
            num_train: task.num_train,
            num_eval: task.num_eval,
            seq_len: task.seq_len,
            noise_rate: task.noise_rate,
            data_seed: task.seed,
            total_steps: plan.total_steps,
            merge_start: plan.merge_start,
            merge_interval: plan.merge_interval,
            merge_budget: plan.merge_budget,
            pair_scope: plan.pair_scope,
            lr: plan.lr,
            warmup_steps: plan.warmup_steps,
            batch_size: plan.batch_size,
            weight_decay: plan.weight_decay,
            seed: plan.seed,
            eval_every: plan.eval_every,
            checkpoint_every: 0,
            compare_pairs: vec![(2, 6), (3, 8), (6, 10)],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Pretty JSON with every field present.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact materialized document.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(compact.as_bytes()))
    }

    pub fn adapter_mode(&self) -> AdapterMode {
        match self.mode {
            ModeName::Lora => AdapterMode::Lora,
            ModeName::SharedA => AdapterMode::SharedA,
            ModeName::FixedShare => AdapterMode::FixedShare(self.share_n),
            ModeName::Aslora => AdapterMode::Aslora,
        }
    }

    /// Sets `mode` and `share_n` from an [`AdapterMode`].
    pub fn set_mode(&mut self, mode: AdapterMode) {
        self.mode = match mode {
            AdapterMode::Lora => ModeName::Lora,
            AdapterMode::SharedA => ModeName::SharedA,
            AdapterMode::FixedShare(n) => {
                self.share_n = n;
                ModeName::FixedShare
            }
            AdapterMode::Aslora => ModeName::Aslora,
        };
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            alpha: self.alpha,
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            adapted_types: self.adapted_types.clone(),
            mode: self.adapter_mode(),
            a_init_std: self.a_init_std,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: match self.task {
                TaskName::CopyClass => TaskKind::CopyClass,
                TaskName::LayerwiseProbe => TaskKind::LayerwiseProbe {
                    depth: self.probe_depth,
                },
                TaskName::SeqRegression => TaskKind::SeqRegression,
            },
            num_train: self.num_train,
            num_eval: self.num_eval,
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            noise_rate: self.noise_rate,
            seed: self.data_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            task_head: self.task_spec().head(),
        }
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            total_steps: self.total_steps,
            merge_start: self.merge_start,
            merge_interval: self.merge_interval,
            merge_budget: self.merge_budget,
            pair_scope: self.pair_scope,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }

    /// Fresh model, generated dataset and trainer for this config.
    pub fn build_trainer(&self) -> Result<Trainer<f32>> {
        self.validate()?;
        let model = Model::init(self.model_config(), self.adapter_config(), self.seed)?;
        Trainer::new(self.plan(), model, self.task_spec().generate()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter_config().validate()?;
        self.model_config().validate()?;
        self.task_spec().validate()?;
        self.plan()
            .validate(self.adapter_mode(), self.num_layers)?;
        if self.seq_len > self.max_seq_len {
            return Err(Error::config(
                "seq_len",
                format!("must not exceed max_seq_len ({})", self.max_seq_len),
            ));
        }
        self.validate_compare_pairs()
    }

    fn validate_compare_pairs(&self) -> Result<()> {
        let l = self.num_layers;
        for &(n, budget) in &self.compare_pairs {
            if n == 0 || n > l || budget >= l || l.div_ceil(n) != l - budget {
                return Err(Error::config(
                    "compare_pairs",
                    format!(
                        "pair (n={n}, N={budget}) is unmatched at num_layers={l}: \
                         fixed sharing keeps ceil(L/n) groups, merging keeps L - N"
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json(r#"{"rnak": 4}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("rnak"));
    }

    #[test]
    fn field_level_messages() {
        let err = RunConfig::from_json(r#"{"rank": 64}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "rank"));
        let err = RunConfig::from_json(r#"{"compare_pairs": [[2, 7]]}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "compare_pairs"));
        let err = RunConfig::from_json(r#"{"total_steps": 480}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "total_steps"));
    }

    #[test]
    fn mode_mapping() {
        let mut cfg = RunConfig::default();
        cfg.set_mode(AdapterMode::FixedShare(6));
        assert_eq!(cfg.adapter_mode(), AdapterMode::FixedShare(6));
        let json = r#"{"mode": "fixed_share", "share_n": 2}"#;
        let cfg = RunConfig::from_json(json).unwrap();
        assert_eq!(cfg.adapter_mode(), AdapterMode::FixedShare(2));
    }
}
