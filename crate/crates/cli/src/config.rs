//! JSON configuration files for `gen-data`, `train`, `params` and `compare`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mtl_lab::architectures::ArchitectureSpec;
use mtl_lab::experiments::{setup, Variant};
use mtl_lab::losses::{LossConfig, ScalarizationStrategy, Task};
use mtl_lab::synthdata::SceneSpec;
use mtl_lab::trainer::{OptimizerConfig, TrainConfig};
use mtl_lab::Precision;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Invalid;

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Invalid> {
    let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_val")]
    pub val: usize,
    #[serde(default)]
    pub label_drop: BTreeMap<Task, f64>,
    #[serde(default)]
    pub ppm: bool,
}

fn default_train() -> usize {
    256
}
fn default_val() -> usize {
    64
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train: default_train(),
            val: default_val(),
            label_drop: BTreeMap::new(),
            ppm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    8
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            eval_every: 0,
            precision: Precision::Train32,
            grad_clip: None,
        }
    }
}

/// One training experiment. Either `variant` or `architecture` names the
/// model; an explicit `architecture` or `strategy` overrides the variant's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default = "default_width")]
    pub base_width: usize,
    #[serde(default)]
    pub architecture: Option<ArchitectureSpec>,
    #[serde(default)]
    pub strategy: Option<ScalarizationStrategy>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

fn default_width() -> usize {
    16
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: None,
            base_width: default_width(),
            architecture: None,
            strategy: None,
            train: TrainSection::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            dataset: None,
            report: None,
        }
    }
}

impl ExperimentConfig {
    pub fn architecture(&self, scene: &SceneSpec) -> Result<ArchitectureSpec, Invalid> {
        let spec = match (&self.architecture, self.variant) {
            (Some(a), _) => a.clone(),
            (None, Some(v)) => setup(v, scene, self.base_width).architecture,
            (None, None) => return Err(Invalid("config names neither `variant` nor `architecture`".into())),
        };
        spec.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok(spec)
    }

    pub fn strategy(&self, scene: &SceneSpec) -> Result<ScalarizationStrategy, Invalid> {
        match (&self.strategy, self.variant) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(v)) => Ok(setup(v, scene, self.base_width).strategy),
            (None, None) => Err(Invalid("config names neither `variant` nor `strategy`".into())),
        }
    }

    /// Architecture and training configuration for a dataset's scene.
    pub fn resolve(&self, scene: &SceneSpec, seed: u64) -> Result<(ArchitectureSpec, TrainConfig), Invalid> {
        let arch = self.architecture(scene)?;
        let strategy = self.strategy(scene)?;
        check_task_names(&arch, &strategy)?;
        let cfg = TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
            strategy,
            eval_every: self.train.eval_every,
            precision: self.train.precision,
            optimizer: self.optimizer,
            loss: self.loss,
            grad_clip: self.train.grad_clip,
        };
        cfg.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok((arch, cfg))
    }
}

/// Every weight key must name a decoder or a decoder's task.
pub fn check_task_names(arch: &ArchitectureSpec, strategy: &ScalarizationStrategy) -> Result<(), Invalid> {
    let ScalarizationStrategy::WeightedSum { weights } = strategy else {
        return Ok(());
    };
    let known: BTreeSet<&str> = arch
        .decoders
        .iter()
        .flat_map(|d| [d.name.as_str(), d.kind.task().name()])
        .collect();
    for key in weights.keys() {
        if !known.contains(key.as_str()) {
            return Err(Invalid(format!(
                "strategy weight `{key}` matches no decoder (have {})",
                known.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    Ok(())
}
