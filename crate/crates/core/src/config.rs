//! Experiment configuration as flat, dotted-key TOML.
//!
//! ```toml
//! dataset = "toy"
//! method = "ours"
//! num_tasks = 4
//! optim.epochs = 10
//! objective.lambda_kd = 0.1
//! ```
//!
//! Sections may equally be written as `[optim]` tables; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_toy, load_cifar100, resolve_data_root, Augmentation, LabeledDataset, Split, ToySpec};
use crate::error::{config, Error, Result};
use crate::losses::ObjectiveWeights;
use crate::metrics::MmdKernel;
use crate::model::Architecture;
use crate::synthesis::{GeneratorConfig, InversionWeights, SynthesisBackend, SynthesisConfig};
use crate::trainer::{Ablation, DiagnosticsConfig, Experiment, Method, MethodConfig, OptimSchedule};

/// Grid ranges searched for the inversion and objective weights, with the
/// chosen value first.
pub const HYPERPARAMETER_GRID: [(&str, f64, &[f64]); 7] = [
    ("inversion.content", 1.0, &[1e-1, 1.0, 1e1]),
    ("inversion.diversity", 1.0, &[1e-1, 1.0, 1e1]),
    ("inversion.stat", 5e1, &[1.0, 1e1, 5e1, 1e2]),
    ("inversion.prior", 1e-3, &[1e-4, 1e-3, 1e-2, 1e-1, 1.0]),
    ("inversion.temperature", 1e3, &[1.0, 1e1, 1e2, 1e3, 1e4]),
    ("objective.lambda_kd", 1e-1, &[1e-2, 1e-1, 1.0]),
    ("objective.lambda_ft", 1.0, &[1e-2, 1e-1, 1.0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Toy,
    Cifar100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Convnet4,
    Resnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: ArchitectureKind,
    pub width: usize,
    /// Residual blocks per stage; ignored by `convnet4`.
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
}

fn default_blocks() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub crop_padding: usize,
}

fn default_gamma() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default = "default_lambda_kd")]
    pub lambda_kd: f64,
    #[serde(default = "default_one")]
    pub lambda_ft: f64,
    #[serde(default = "default_kd_temperature")]
    pub kd_temperature: f64,
    #[serde(default = "default_one")]
    pub baseline_kd_weight: f64,
}

fn default_lambda_kd() -> f64 {
    0.1
}

fn default_one() -> f64 {
    1.0
}

fn default_kd_temperature() -> f64 {
    2.0
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            lambda_kd: default_lambda_kd(),
            lambda_ft: 1.0,
            kd_temperature: default_kd_temperature(),
            baseline_kd_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Generator,
    DirectImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    /// Image pool size of the `direct_images` backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    pub z_dim: usize,
    pub width: usize,
}

fn default_backend() -> BackendKind {
    BackendKind::Generator
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetSection {
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_drift_samples")]
    pub drift_samples: usize,
    /// Fixed RBF bandwidth; the median heuristic when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd_bandwidth: Option<f64>,
}

fn default_drift_samples() -> usize {
    200
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            drift_samples: default_drift_samples(),
            mmd_bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    /// CIFAR-100 directory; falls back to the `DFCIL_DATA_ROOT` variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub num_tasks: usize,
    pub method: Method,
    pub trials: usize,
    /// First trial seed; trial `i` uses `seed + i` unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub optim: OptimSection,
    #[serde(default, skip_serializing_if = "Ablation::is_empty")]
    pub ablation: Ablation,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion: Option<InversionWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coreset: Option<CoresetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySpec>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

fn field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => config(format!("{prefix}: {m}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A preset name (see [`preset`](Self::preset)) or a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.exists() {
            Self::load(path)
        } else {
            Self::preset(name_or_path)
        }
    }

    /// Presets named `{dataset}_{method}_{N}task`, e.g.
    /// `cifar100_ours_10task` or `toy_deep_inversion_4task`.
    pub fn preset(name: &str) -> Result<Self> {
        let unknown = || config(format!("unknown preset or missing file `{name}`"));
        let (dataset, rest) = name.split_once('_').ok_or_else(unknown)?;
        let (method, tasks) = rest.rsplit_once('_').ok_or_else(unknown)?;
        let num_tasks: usize = tasks
            .strip_suffix("task")
            .and_then(|n| n.parse().ok())
            .ok_or_else(unknown)?;
        let method = Method::parse(method).ok_or_else(unknown)?;
        let mut cfg = match dataset {
            "cifar100" => Self::cifar100(method, num_tasks),
            "toy" => Self::toy(method, num_tasks),
            _ => return Err(unknown()),
        };
        if !method.uses_synthesis() {
            cfg.inversion = None;
            cfg.synthesis = None;
        }
        if !method.uses_coreset() {
            cfg.coreset = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The published CIFAR-100 protocol: ResNet-32, 250 epochs, three trials.
    pub fn cifar100(method: Method, num_tasks: usize) -> Self {
        let optim = OptimSchedule::default();
        Self {
            dataset: DatasetId::Cifar100,
            data_root: None,
            num_tasks,
            method,
            trials: 3,
            seed: 0,
            seeds: None,
            output_dir: None,
            model: ModelSection {
                architecture: ArchitectureKind::Resnet,
                width: 16,
                blocks_per_stage: 5,
            },
            optim: OptimSection {
                epochs: optim.epochs,
                lr: optim.lr,
                milestones: optim.milestones,
                gamma: optim.gamma,
                weight_decay: optim.weight_decay,
                momentum: optim.momentum,
                batch_size: optim.batch_size,
                flip: optim.augmentation.flip,
                crop_padding: optim.augmentation.crop_padding,
            },
            ablation: Ablation::default(),
            objective: ObjectiveSection::default(),
            inversion: Some(InversionWeights::default()),
            synthesis: Some(SynthesisSection {
                steps: 5000,
                batch_size: 128,
                lr: 1e-3,
                backend: BackendKind::Generator,
                pool_size: None,
                z_dim: 1000,
                width: 128,
            }),
            coreset: Some(CoresetSection { capacity: 2000 }),
            toy: None,
            diagnostics: DiagnosticsSection::default(),
        }
    }

    /// Desk-scale defaults on the Gaussian-blob dataset.
    pub fn toy(method: Method, num_tasks: usize) -> Self {
        Self {
            dataset: DatasetId::Toy,
            data_root: None,
            num_tasks,
            method,
            trials: 3,
            seed: 1,
            seeds: None,
            output_dir: None,
            model: ModelSection {
                architecture: ArchitectureKind::Convnet4,
                width: 8,
                blocks_per_stage: 5,
            },
            optim: OptimSection {
                epochs: 10,
                lr: 0.05,
                milestones: Vec::new(),
                gamma: 0.1,
                weight_decay: 5e-4,
                momentum: 0.9,
                batch_size: 64,
                flip: false,
                crop_padding: 0,
            },
            ablation: Ablation::default(),
            objective: ObjectiveSection::default(),
            inversion: Some(InversionWeights::default()),
            synthesis: Some(SynthesisSection {
                steps: 100,
                batch_size: 64,
                lr: 1e-2,
                backend: BackendKind::Generator,
                pool_size: None,
                z_dim: 32,
                width: 12,
            }),
            coreset: Some(CoresetSection { capacity: 200 }),
            toy: Some(ToySpec::default()),
            diagnostics: DiagnosticsSection::default(),
        }
    }

    /// Trial seeds, distinct and `trials` long.
    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.trials as u64).map(|i| self.seed + i).collect(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.model.architecture {
            ArchitectureKind::Convnet4 => Architecture::Convnet4 { width: self.model.width },
            ArchitectureKind::Resnet => Architecture::Resnet {
                blocks_per_stage: self.model.blocks_per_stage,
                width: self.model.width,
            },
        }
    }

    pub fn optim_schedule(&self) -> OptimSchedule {
        let o = &self.optim;
        OptimSchedule {
            epochs: o.epochs,
            lr: o.lr,
            milestones: o.milestones.clone(),
            gamma: o.gamma,
            weight_decay: o.weight_decay,
            momentum: o.momentum,
            batch_size: o.batch_size,
            augmentation: Augmentation {
                flip: o.flip,
                crop_padding: o.crop_padding,
            },
        }
    }

    pub fn method_config(&self) -> MethodConfig {
        let synthesis = self.synthesis.as_ref().map(|s| SynthesisConfig {
            weights: self.inversion.unwrap_or_default(),
            steps: s.steps,
            batch_size: s.batch_size,
            lr: s.lr,
            generator: GeneratorConfig {
                z_dim: s.z_dim,
                width: s.width,
            },
            backend: match s.backend {
                BackendKind::Generator => SynthesisBackend::Generator,
                BackendKind::DirectImages => SynthesisBackend::DirectImages {
                    pool_size: s.pool_size.unwrap_or(s.batch_size),
                },
            },
        });
        MethodConfig {
            method: self.method,
            ablation: self.ablation,
            objective: ObjectiveWeights {
                lambda_kd: self.objective.lambda_kd,
                lambda_ft: self.objective.lambda_ft,
                kd_temperature: self.objective.kd_temperature,
            },
            baseline_kd_weight: self.objective.baseline_kd_weight,
            synthesis,
            coreset_capacity: self.coreset.as_ref().map(|c| c.capacity),
        }
    }

    pub fn diagnostics_config(&self) -> DiagnosticsConfig {
        DiagnosticsConfig {
            drift_samples: self.diagnostics.drift_samples,
            kernel: MmdKernel {
                bandwidth: self.diagnostics.mmd_bandwidth,
            },
            grid_samples: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(config("num_tasks: must be at least 1"));
        }
        if self.trials == 0 {
            return Err(config("trials: must be at least 1"));
        }
        if let Some(s) = &self.seeds {
            if s.len() != self.trials {
                return Err(config(format!("seeds: {} seeds given for trials = {}", s.len(), self.trials)));
            }
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != s.len() {
                return Err(config("seeds: trial seeds must be distinct"));
            }
        }
        if self.model.width == 0 || (self.model.architecture == ArchitectureKind::Resnet && self.model.blocks_per_stage == 0) {
            return Err(config("model.width and model.blocks_per_stage must be positive"));
        }
        if !self.ablation.is_empty() && self.method != Method::Ours {
            return Err(config(format!(
                "ablation.{}: ablation flags are only valid with method = ours, not {}",
                self.ablation.flags()[0],
                self.method
            )));
        }
        if !self.method.uses_synthesis() && (self.synthesis.is_some() || self.inversion.is_some()) {
            let key = if self.synthesis.is_some() { "synthesis" } else { "inversion" };
            return Err(config(format!("{key}: method {} does not synthesize images", self.method)));
        }
        if self.method.uses_synthesis() && self.synthesis.is_none() {
            return Err(config(format!("synthesis: required for method {}", self.method)));
        }
        match (&self.coreset, self.method.uses_coreset()) {
            (Some(_), false) => return Err(config(format!("coreset: method {} stores no exemplars", self.method))),
            (None, true) => return Err(config(format!("coreset.capacity: required for method {}", self.method))),
            _ => {}
        }
        if self.dataset == DatasetId::Cifar100 && self.toy.is_some() {
            return Err(config("toy: only valid with dataset = toy"));
        }
        if let Some(s) = &self.synthesis {
            if s.pool_size.is_some() && s.backend != BackendKind::DirectImages {
                return Err(config("synthesis.pool_size: only valid with backend = direct_images"));
            }
        }
        self.optim_schedule().validate().map_err(|e| field("optim", e))?;
        if let Some(w) = &self.inversion {
            w.validate().map_err(|e| field("inversion", e))?;
        }
        if let Some(s) = self.method_config().synthesis {
            s.validate().map_err(|e| field("synthesis", e))?;
        }
        self.method_config().validate().map_err(|e| field("method", e))?;
        if let Some(b) = self.diagnostics.mmd_bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return Err(config("diagnostics.mmd_bandwidth: must be positive"));
            }
        }
        Ok(())
    }

    /// Flat `key = value` text with dotted keys, one per line.
    pub fn to_toml(&self) -> Result<String> {
        let value = toml::Table::try_from(self).map_err(|e| config(e.to_string()))?;
        let mut out = String::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    /// SHA-256 of the flat TOML form.
    pub fn digest(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Loads and normalizes the train/test splits.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let (train, test) = match self.dataset {
            DatasetId::Toy => generate_toy(&self.toy.clone().unwrap_or_default())?,
            DatasetId::Cifar100 => {
                let root = resolve_data_root(self.data_root.as_deref()).ok_or_else(|| {
                    config("data_root: not set and DFCIL_DATA_ROOT is not defined")
                })?;
                (load_cifar100(&root, Split::Train)?, load_cifar100(&root, Split::Test)?)
            }
        };
        let norm = train.fit_normalizer()?;
        Ok((train.with_normalizer(norm.clone()), test.with_normalizer(norm)))
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.validate()?;
        let (train, test) = self.load_data()?;
        let exp = Experiment {
            train,
            test,
            architecture: self.architecture(),
            num_tasks: self.num_tasks,
            method: self.method_config(),
            optim: self.optim_schedule(),
            diagnostics: self.diagnostics_config(),
        };
        exp.validate()?;
        Ok(exp)
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut String) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push_str(&format!("{key} = {other}\n")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in ["cifar100_ours_10task", "toy_deep_inversion_4task", "toy_naive_rehearsal_4task", "toy_base_4task"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let text = cfg.to_toml().unwrap();
            assert!(text.lines().all(|l| !l.starts_with('[')), "{text}");
            assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn cifar_preset_hyperparameters() {
        let cfg = ExperimentConfig::preset("cifar100_ours_10task").unwrap();
        assert_eq!(cfg.optim.epochs, 250);
        assert_eq!(cfg.optim.milestones, vec![100, 150, 200]);
        assert_eq!(cfg.optim.weight_decay, 2e-4);
        assert_eq!(cfg.optim.batch_size, 128);
        assert_eq!(cfg.objective.lambda_kd, 0.1);
        assert_eq!(cfg.objective.lambda_ft, 1.0);
        let inv = cfg.inversion.unwrap();
        assert_eq!((inv.content, inv.diversity, inv.stat, inv.prior, inv.temperature), (1.0, 1.0, 50.0, 1e-3, 1000.0));
        assert_eq!(cfg.synthesis.unwrap().steps, 5000);
    }

    #[test]
    fn field_level_errors() {
        let mut text = ExperimentConfig::preset("toy_base_4task").unwrap().to_toml().unwrap();
        text.push_str("ablation.no_ft = true\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("ablation.no_ft"), "{err}");

        let text = "dataset = \"toy\"\nbogus.key = 1\n";
        assert!(ExperimentConfig::parse(text).is_err());

        let mut cfg = ExperimentConfig::preset("toy_ours_4task").unwrap();
        cfg.optim.milestones = vec![20];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("optim"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::preset("toy_ours_4task").unwrap().to_toml().unwrap();
        text.push_str("optim.nesterov = true\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("nesterov"), "{err}");
    }
}
