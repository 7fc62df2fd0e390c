//! Experiment configuration: one JSON document, versioned, strict.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::CostConfig;
use crate::data::SynthOptions;
use crate::error::{Error, Result};
use crate::prompt::{Formation, QueryMode};
use crate::qr::QrConfig;
use crate::vit::ViTConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_shift")]
        max_shift: usize,
    },
    /// Directory holding `train.bin` and `test.bin`.
    Cifar100 { path: PathBuf },
}

fn default_noise() -> f64 {
    0.15
}

fn default_shift() -> usize {
    2
}

/// Architecture block; class count and prompt length are filled in from
/// the rest of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitBlock {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub prompted_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBlock {
    pub components: usize,
    pub length: usize,
    pub formation: Formation,
    pub query: QueryMode,
    /// Let gradients flow through `q_l` into earlier layers' prompts.
    #[serde(default)]
    pub query_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Frozen backbone, trained prompt pool and classifier.
    Prompt,
    /// Sequential fine-tuning of backbone and classifier.
    Ft,
    /// Joint training on every task at once.
    Ub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub base_classes: usize,
    pub continual_classes: usize,
    pub tasks: usize,
    pub vit: VitBlock,
    pub prompt: PromptBlock,
    pub qr: QrConfig,
    pub optimizer: OptimizerBlock,
    pub method: Method,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Synthetic 10 + 20 class benchmark on 16×16 images, sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetConfig::Synthetic {
                train_per_class: 40,
                test_per_class: 20,
                noise: default_noise(),
                max_shift: default_shift(),
            },
            base_classes: 10,
            continual_classes: 20,
            tasks: 5,
            vit: VitBlock {
                image_size: 16,
                patch_size: 4,
                depth: 6,
                dim: 32,
                heads: 4,
                mlp_ratio: 4,
                prompted_layers: vec![1, 2, 3, 4, 5],
            },
            prompt: PromptBlock {
                components: 20,
                length: 8,
                formation: Formation::Coda,
                query: QueryMode::OneStage,
                query_grad: false,
            },
            qr: QrConfig::default(),
            optimizer: OptimizerBlock {
                lr: 1e-2,
                epochs: 10,
                batch: 16,
                pretrain_epochs: 10,
                pretrain_lr: 1e-3,
            },
            method: Method::Prompt,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn classes_per_task(&self) -> usize {
        self.continual_classes / self.tasks.max(1)
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn vit_config(&self, num_classes: usize) -> ViTConfig {
        ViTConfig {
            image_size: self.vit.image_size,
            patch_size: self.vit.patch_size,
            channels: self.channels(),
            depth: self.vit.depth,
            dim: self.vit.dim,
            heads: self.vit.heads,
            mlp_ratio: self.vit.mlp_ratio,
            num_classes,
            prompted_layers: self.vit.prompted_layers.clone(),
            prompt_length: self.prompt.length,
        }
    }

    pub fn synth_options(&self) -> Option<SynthOptions> {
        match self.dataset {
            DatasetConfig::Synthetic { noise, max_shift, .. } => Some(SynthOptions {
                channels: self.channels(),
                noise,
                max_shift,
                ..SynthOptions::default()
            }),
            DatasetConfig::Cifar100 { .. } => None,
        }
    }

    /// Cost-model view of this architecture.
    pub fn cost_config(&self) -> CostConfig {
        CostConfig {
            depth: self.vit.depth,
            dim: self.vit.dim,
            heads: self.vit.heads,
            mlp_ratio: self.vit.mlp_ratio,
            image_size: self.vit.image_size,
            patch_size: self.vit.patch_size,
            channels: self.channels(),
            num_classes: self.continual_classes,
            prompt_length: self.prompt.length,
            prompted_layers: self.vit.prompted_layers.len(),
            ref_layer: self.qr.ref_layer,
            prompt_components: self.prompt.components,
            formation: self.prompt.formation,
            ..CostConfig::vitb16()
        }
    }

    /// Checks every cross-field constraint and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.version != CONFIG_VERSION {
            problems.push(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.tasks == 0 {
            problems.push("tasks must be positive".into());
        } else if self.continual_classes == 0 || self.continual_classes % self.tasks != 0 {
            problems.push(format!(
                "continual_classes {} not divisible into {} tasks",
                self.continual_classes, self.tasks
            ));
        }
        if let Err(Error::Config(msg)) = self.vit_config(self.continual_classes.max(1)).validate() {
            problems.push(msg);
        }
        if self.vit.prompted_layers.first() != Some(&1)
            || self.vit.prompted_layers.windows(2).any(|w| w[1] != w[0] + 1)
        {
            problems.push("prompted_layers must be a contiguous range starting at 1".into());
        }
        if self.prompt.length == 0 {
            problems.push("prompt length must be positive".into());
        }
        if self.prompt.components < self.tasks {
            problems.push(format!(
                "{} prompt components cannot be split across {} tasks",
                self.prompt.components, self.tasks
            ));
        }
        if let Formation::Topk { n } = self.prompt.formation {
            let first_task = self.prompt.components / self.tasks.max(1);
            if n == 0 || n > first_task {
                problems.push(format!("top-{n} needs 1..={first_task} components available from the first task"));
            }
        }
        if let Err(Error::Config(msg)) = self.qr.validate(self.vit.depth, self.vit.prompted_layers.len()) {
            problems.push(msg);
        }
        if self.qr.enabled && self.method != Method::Prompt {
            problems.push("qr requires method \"prompt\"".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.pretrain_lr > 0.0 && o.pretrain_lr.is_finite()) {
            problems.push("learning rates must be positive".into());
        }
        if o.epochs == 0 || o.batch == 0 {
            problems.push("epochs and batch must be positive".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                train_per_class,
                test_per_class,
                noise,
                ..
            } => {
                if *train_per_class == 0 || *test_per_class == 0 {
                    problems.push("synthetic per-class counts must be positive".into());
                }
                if !(*noise >= 0.0) {
                    problems.push("synthetic noise must be >= 0".into());
                }
            }
            DatasetConfig::Cifar100 { path } => {
                if !path.exists() {
                    problems.push(format!("dataset path {} does not exist", path.display()));
                }
                if self.base_classes + self.continual_classes > crate::data::CIFAR_CLASSES {
                    problems.push("base_classes + continual_classes exceed the 100 CIFAR-100 classes".into());
                }
                if self.vit.image_size != crate::data::CIFAR_SIDE {
                    problems.push("CIFAR-100 needs vit.image_size 32".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_is_valid_and_round_trips() {
        let c = ExperimentConfig::desk();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_missing_version_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::desk().to_json()).unwrap();
        v["optimiser"] = serde_json::json!(1);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::desk().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("version");
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn problems_are_aggregated() {
        let mut c = ExperimentConfig::desk();
        c.continual_classes = 21;
        c.vit.heads = 5;
        c.optimizer.batch = 0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible into") && msg.contains("heads") && msg.contains("batch"), "{msg}");
    }
}
