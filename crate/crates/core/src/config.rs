//! Run configuration, read from TOML with section headers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::nn::{AuxHeadSpec, PRESETS};
use crate::optim::{CosineSchedule, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bp,
    Local,
    Hilo,
    Hpff,
}

impl Method {
    pub fn is_local(&self) -> bool {
        !matches!(self, Method::Bp)
    }

    pub fn has_cascade(&self) -> bool {
        matches!(self, Method::Hilo | Method::Hpff)
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bp" => Ok(Method::Bp),
            "local" => Ok(Method::Local),
            "hilo" => Ok(Method::Hilo),
            "hpff" => Ok(Method::Hpff),
            other => Err(Error::config(format!(
                "unknown method {other:?} (expected bp, local, hilo or hpff)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Bp => "bp",
            Method::Local => "local",
            Method::Hilo => "hilo",
            Method::Hpff => "hpff",
        })
    }
}

impl FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(Error::config(format!(
                "unknown dataset {other:?} (expected mnist, cifar10 or synthetic)"
            ))),
        }
    }
}

/// How post-stem loss terms are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// One weighted-sum loss, one backward.
    Serial,
    /// Each loss term and its backward as a separate concurrent task.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub arch: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub schedule: Schedule,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::Hpff,
            arch: "miniresnet-8".into(),
            seed: 0,
            epochs: 30,
            batch_size: 128,
            eval_batch_size: 500,
            schedule: Schedule::Serial,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    /// K, the number of gradient-isolated modules.
    pub modules: usize,
    pub cascade_k: usize,
    pub patch_n: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            modules: 4,
            cascade_k: 2,
            patch_n: 2,
        }
    }
}

/// Loss weights and learning-rate multipliers (relative to `sgd.base_lr`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// η_d: weight of each independent auxiliary loss.
    pub lr_independent: f64,
    /// η_c: weight of each cascade auxiliary loss.
    pub lr_cascade: f64,
    /// Weight of the final classifier loss.
    pub lr_main: f64,
    /// When set, independent losses weigh α and cascade losses 1 − α.
    pub alpha: Option<f64>,
    /// Step-size multiplier for independent auxiliary heads.
    pub lr_aux: f64,
    /// Step-size multiplier for modules 1..K-1.
    pub lr_module: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lr_independent: 1.0,
            lr_cascade: 1.0,
            lr_main: 1.0,
            alpha: None,
            lr_aux: 1.0,
            lr_module: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxSection {
    pub reduce_channels: usize,
    pub pooled_size: usize,
    pub hidden_dim: usize,
}

impl Default for AuxSection {
    fn default() -> Self {
        let d = AuxHeadSpec::default();
        Self {
            reduce_channels: d.reduce_channels,
            pooled_size: d.pooled_size,
            hidden_dim: d.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub lr_min: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { lr_min: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetId,
    /// Dataset root; falls back to the environment variable, then `./data`.
    pub root: Option<PathBuf>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub augment: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Cifar10,
            root: None,
            train_subset: None,
            test_subset: None,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSection {
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_mom")]
    pub momentum: f64,
    #[serde(default = "d_true")]
    pub nesterov: bool,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
}

fn d_lr() -> f64 {
    SgdConfig::default().base_lr
}
fn d_mom() -> f64 {
    SgdConfig::default().momentum
}
fn d_true() -> bool {
    true
}
fn d_wd() -> f64 {
    SgdConfig::default().weight_decay
}

impl Default for SgdSection {
    fn default() -> Self {
        SgdConfig::default().into()
    }
}

impl From<SgdConfig> for SgdSection {
    fn from(c: SgdConfig) -> Self {
        Self {
            base_lr: c.base_lr,
            momentum: c.momentum,
            nesterov: c.nesterov,
            weight_decay: c.weight_decay,
        }
    }
}

impl From<&SgdSection> for SgdConfig {
    fn from(s: &SgdSection) -> Self {
        SgdConfig {
            base_lr: s.base_lr,
            momentum: s.momentum,
            nesterov: s.nesterov,
            weight_decay: s.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunSection,
    pub partition: PartitionSection,
    pub loss: LossSection,
    pub aux: AuxSection,
    pub sgd: SgdSection,
    pub schedule: ScheduleSection,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sgd(&self) -> SgdConfig {
        (&self.sgd).into()
    }

    pub fn cosine(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.sgd.base_lr,
            lr_min: self.schedule.lr_min,
            total_epochs: self.run.epochs,
        }
    }

    pub fn aux_spec(&self, num_classes: usize) -> AuxHeadSpec {
        AuxHeadSpec {
            reduce_channels: self.aux.reduce_channels,
            pooled_size: self.aux.pooled_size,
            hidden_dim: self.aux.hidden_dim,
            num_classes,
        }
    }

    /// Modules the trainer actually builds: BP always runs unsplit.
    pub fn effective_modules(&self) -> usize {
        if self.run.method.is_local() {
            self.partition.modules
        } else {
            1
        }
    }

    /// Cascade width when cascade groups apply; `None` for bp/local and for K = 1.
    pub fn effective_cascade(&self) -> Option<usize> {
        (self.run.method.has_cascade() && self.partition.modules > 1).then_some(self.partition.cascade_k)
    }

    pub fn effective_patch_n(&self) -> usize {
        if self.run.method == Method::Hpff {
            self.partition.patch_n
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !PRESETS.contains(&self.run.arch.as_str()) {
            return bad(format!("unknown architecture {:?}", self.run.arch));
        }
        if self.run.epochs == 0 || self.run.batch_size == 0 || self.run.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if self.partition.modules == 0 {
            return bad("partition.modules must be >= 1".into());
        }
        if self.run.method == Method::Hpff && self.partition.patch_n == 0 {
            return bad("hpff needs patch_n >= 1".into());
        }
        if self.run.method.has_cascade() && self.partition.modules > 1 {
            let k = self.partition.cascade_k;
            if k < 2 {
                return bad(format!("{} needs cascade_k >= 2", self.run.method));
            }
            if self.partition.modules - 1 < k {
                return bad(format!(
                    "{} with K = {} and cascade_k = {k} has no cascade groups",
                    self.run.method, self.partition.modules
                ));
            }
        }
        if let Some(a) = self.loss.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha {a} outside [0,1]"));
            }
        }
        let l = &self.loss;
        for (name, v) in [
            ("lr_independent", l.lr_independent),
            ("lr_cascade", l.lr_cascade),
            ("lr_main", l.lr_main),
            ("lr_aux", l.lr_aux),
            ("lr_module", l.lr_module),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("loss.{name} must be positive, got {v}"));
            }
        }
        self.sgd().validate()?;
        self.cosine().validate()?;
        self.aux_spec(10).validate()?;
        if let Some(0) = self.data.train_subset {
            return bad("train_subset must be positive".into());
        }
        if let Some(0) = self.data.test_subset {
            return bad("test_subset must be positive".into());
        }
        Ok(())
    }
}
