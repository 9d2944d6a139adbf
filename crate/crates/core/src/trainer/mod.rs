//! Per-task training for every method, ablations, optimizer schedules and
//! multi-trial experiments.

mod experiment;
mod ledger;
mod task;

use serde::{Deserialize, Serialize};

use crate::data::Augmentation;
use crate::error::{config, Result};
use crate::losses::{ObjectivePlan, ObjectiveWeights, WfeatRows};
use crate::synthesis::SynthesisConfig;

pub use experiment::{
    aggregate, run_experiment, train_upper_bound, Aggregate, DiagnosticsConfig, Experiment, OfflineCache, RunRecord,
    TaskObserver, TrialOutcome, TrialProgress, UpperBound,
};
pub use ledger::{MemoryEvent, MemoryLedger, MemoryPhase};
pub use task::{train_task, EpochRecord, TaskEnv, TaskLog, TrainerState};

/// Training methods, in the order they are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Lwf,
    LwfSynth,
    DeepInversion,
    NaiveRehearsal,
    LwfCoreset,
    Ours,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Base,
        Method::Lwf,
        Method::LwfSynth,
        Method::DeepInversion,
        Method::NaiveRehearsal,
        Method::LwfCoreset,
        Method::Ours,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Lwf => "lwf",
            Method::LwfSynth => "lwf_synth",
            Method::DeepInversion => "deep_inversion",
            Method::NaiveRehearsal => "naive_rehearsal",
            Method::LwfCoreset => "lwf_coreset",
            Method::Ours => "ours",
        }
    }

    pub fn parse(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == id)
    }

    pub fn uses_synthesis(self) -> bool {
        matches!(self, Method::LwfSynth | Method::DeepInversion | Method::Ours)
    }

    pub fn uses_coreset(self) -> bool {
        matches!(self, Method::NaiveRehearsal | Method::LwfCoreset)
    }

    /// Methods that need a frozen copy of the previous model.
    pub fn uses_teacher(self) -> bool {
        !matches!(self, Method::Base | Method::NaiveRehearsal)
    }

    pub fn is_data_free(self) -> bool {
        !self.uses_coreset()
    }

    /// Replay-data column of the comparison table.
    pub fn replay_kind(self) -> &'static str {
        if self.uses_synthesis() {
            "Synthetic"
        } else if self.uses_coreset() {
            "Coreset"
        } else {
            "None"
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Ablations of the proposed objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_balancing: bool,
    pub standard_ce: bool,
    pub wfeat_real_only: bool,
    pub wfeat_synth_only: bool,
    pub no_ft: bool,
}

impl Ablation {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Active flag names, in declaration order.
    pub fn flags(&self) -> Vec<&'static str> {
        [
            (self.no_balancing, "no_balancing"),
            (self.standard_ce, "standard_ce"),
            (self.wfeat_real_only, "wfeat_real_only"),
            (self.wfeat_synth_only, "wfeat_synth_only"),
            (self.no_ft, "no_ft"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub objective: ObjectiveWeights,
    /// Weight of each distillation term in the LwF-style baselines.
    #[serde(default = "one")]
    pub baseline_kd_weight: f64,
    /// Present exactly for methods that synthesize replay data.
    #[serde(default)]
    pub synthesis: Option<SynthesisConfig>,
    /// Present exactly for methods that store real exemplars.
    #[serde(default)]
    pub coreset_capacity: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl MethodConfig {
    /// Defaults for `method`: synthesis and coreset configured only where used.
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ablation: Ablation::default(),
            objective: ObjectiveWeights::default(),
            baseline_kd_weight: 1.0,
            synthesis: method.uses_synthesis().then(SynthesisConfig::default),
            coreset_capacity: method.uses_coreset().then_some(2000),
        }
    }

    /// Short label including active ablations, e.g. `ours[no_ft]`.
    pub fn label(&self) -> String {
        let flags = self.ablation.flags();
        if flags.is_empty() {
            self.method.id().to_string()
        } else {
            format!("{}[{}]", self.method, flags.join(","))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ablation.is_empty() && self.method != Method::Ours {
            return Err(config(format!(
                "ablation flags {:?} are only valid with method = ours, not {}",
                self.ablation.flags(),
                self.method
            )));
        }
        if self.method == Method::Ours {
            apply_ablation(self)?;
        }
        match (&self.synthesis, self.method.uses_synthesis()) {
            (Some(s), true) => s.validate()?,
            (None, true) => return Err(config(format!("method {} needs a synthesis section", self.method))),
            (Some(_), false) => {
                return Err(config(format!("method {} does not synthesize; remove the synthesis section", self.method)))
            }
            (None, false) => {}
        }
        match (self.coreset_capacity, self.method.uses_coreset()) {
            (Some(0), true) => return Err(config("coreset capacity must be positive")),
            (None, true) => return Err(config(format!("method {} needs a coreset capacity", self.method))),
            (Some(_), false) => {
                return Err(config(format!("method {} stores no coreset; remove coreset_capacity", self.method)))
            }
            _ => {}
        }
        self.objective.validate()?;
        if !(self.baseline_kd_weight.is_finite() && self.baseline_kd_weight >= 0.0) {
            return Err(config(format!("baseline_kd_weight must be >= 0, got {}", self.baseline_kd_weight)));
        }
        Ok(())
    }
}

/// The objective assembly for the proposed method with its ablations.
pub fn apply_ablation(cfg: &MethodConfig) -> Result<ObjectivePlan> {
    if cfg.method != Method::Ours {
        return Err(config(format!("ablations apply to method ours, not {}", cfg.method)));
    }
    let a = cfg.ablation;
    if a.wfeat_real_only && a.wfeat_synth_only {
        return Err(config("wfeat_real_only and wfeat_synth_only are mutually exclusive"));
    }
    Ok(ObjectivePlan {
        local_ce: !a.standard_ce,
        wfeat_rows: if a.wfeat_real_only {
            WfeatRows::Real
        } else if a.wfeat_synth_only {
            WfeatRows::Synthetic
        } else {
            WfeatRows::All
        },
        fine_tune: !a.no_ft,
        balance: !a.no_balancing,
    })
}

/// SGD schedule with step decay at milestone epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default = "Augmentation::none")]
    pub augmentation: Augmentation,
}

impl Default for OptimSchedule {
    fn default() -> Self {
        Self {
            epochs: 250,
            lr: 0.1,
            milestones: vec![100, 150, 200],
            gamma: 0.1,
            weight_decay: 2e-4,
            momentum: 0.9,
            batch_size: 128,
            augmentation: Augmentation {
                flip: true,
                crop_padding: 4,
            },
        }
    }
}

impl OptimSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(config(format!(
                "need epochs >= 1 and batch_size >= 2 (epochs={}, batch_size={})",
                self.epochs, self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config(format!("decay factor must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(config("weight decay must be >= 0 and momentum in [0, 1)"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config(format!("milestones must be strictly increasing: {:?}", self.milestones)));
        }
        if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return Err(config(format!("milestone {m} is not below epochs={}", self.epochs)));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay() {
        let s = OptimSchedule::default();
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(100) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(249) - 1e-4).abs() < 1e-15);
        assert!(s.validate().is_ok());
        let bad = OptimSchedule {
            milestones: vec![150, 100],
            ..s.clone()
        };
        assert!(bad.validate().is_err());
        let late = OptimSchedule { milestones: vec![250], ..s };
        assert!(late.validate().is_err());
    }

    #[test]
    fn ablation_rules() {
        let mut cfg = MethodConfig::for_method(Method::Base);
        cfg.ablation.no_ft = true;
        assert!(cfg.validate().is_err());
        let mut ours = MethodConfig::for_method(Method::Ours);
        assert_eq!(apply_ablation(&ours).unwrap(), ObjectivePlan::default());
        ours.ablation.wfeat_real_only = true;
        ours.ablation.wfeat_synth_only = true;
        assert!(ours.validate().is_err());
        ours.ablation.wfeat_synth_only = false;
        assert_eq!(apply_ablation(&ours).unwrap().wfeat_rows, WfeatRows::Real);
        assert_eq!(ours.label(), "ours[wfeat_real_only]");
    }

    #[test]
    fn sections_only_where_used() {
        for m in Method::ALL {
            assert!(MethodConfig::for_method(m).validate().is_ok(), "{m}");
        }
        let mut base = MethodConfig::for_method(Method::Base);
        base.synthesis = Some(SynthesisConfig::default());
        assert!(base.validate().is_err());
        let mut nr = MethodConfig::for_method(Method::NaiveRehearsal);
        nr.coreset_capacity = None;
        assert!(nr.validate().is_err());
    }
}
