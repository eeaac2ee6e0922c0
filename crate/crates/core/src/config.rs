//! Run configuration, read from JSON. Every section rejects unknown keys and
//! missing sections take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{FitScheduler, LbConfig, LbScheduler};
use crate::error::{Error, Result};
use crate::migration::{Topology, DEFAULT_MAX_DEFER};
use crate::scheduler::{MellScheduler, PriorityConfig, Scheduler};
use crate::workload::LengthDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Mell,
    Bf,
    Wf,
    Lb,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Mell,
        SchedulerKind::Bf,
        SchedulerKind::Wf,
        SchedulerKind::Lb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Mell => "mell",
            SchedulerKind::Bf => "bf",
            SchedulerKind::Wf => "wf",
            SchedulerKind::Lb => "lb",
        }
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown scheduler '{s}' (expected mell, bf, wf or lb)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub capacity_bytes: u64,
    pub kv_bytes_per_token: u64,
    /// Informational ceiling; runs that exceed it are flagged, not stopped.
    pub max_gpus: Option<u32>,
    pub topology: Topology,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        // 512 KiB of KV per token (a 7B-class model) and 600 MiB of KV room per GPU, so a
        // GPU holds 1200 tokens and typical requests span every size class.
        Self {
            capacity_bytes: 600 << 20,
            kv_bytes_per_token: 512 << 10,
            max_gpus: None,
            topology: Topology::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub batching: bool,
    pub priority: PriorityConfig,
    pub lb: LbConfig,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            kind: SchedulerKind::Mell,
            batching: true,
            priority: PriorityConfig::default(),
            lb: LbConfig::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn build(&self) -> Box<dyn Scheduler> {
        match self.kind {
            SchedulerKind::Mell => Box::new(MellScheduler::new(self.priority.clone(), self.batching)),
            SchedulerKind::Bf => Box::new(FitScheduler::best_fit()),
            SchedulerKind::Wf => Box::new(FitScheduler::worst_fit()),
            SchedulerKind::Lb => Box::new(LbScheduler::new(self.lb.clone())),
        }
    }

    /// Label used in reports, e.g. `mell` or `mell-unbatched`.
    pub fn label(&self) -> String {
        match (self.kind, self.batching) {
            (SchedulerKind::Mell, false) => "mell-unbatched".into(),
            (k, _) => k.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationConfig {
    /// Share of each link's and GPU's epoch capacity that migrations may use.
    pub budget_fraction: f64,
    pub max_defer: u32,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            budget_fraction: 0.5,
            max_defer: DEFAULT_MAX_DEFER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Replay this trace instead of generating one.
    pub trace: Option<PathBuf>,
    pub mean_interarrival_slots: f64,
    pub lengths: LengthDistribution,
    /// Applied to traces read from file; generated traces use `lengths.scale`.
    pub scale: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            trace: None,
            mean_interarrival_slots: 0.5,
            lengths: LengthDistribution::default(),
            scale: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub duration_slots: u64,
    /// Tokens each running request generates per slot.
    pub tokens_per_slot: u64,
    pub epoch_slots: u64,
    pub slot_seconds: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration_slots: 2000,
            tokens_per_slot: 4,
            epoch_slots: 1,
            slot_seconds: 1.0,
            seed: 0,
        }
    }
}

/// Version of the config and output schemas.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    pub cluster: ClusterConfig,
    pub scheduler: SchedulerConfig,
    pub migration: MigrationConfig,
    pub workload: WorkloadConfig,
    pub sim: SimConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            cluster: ClusterConfig::default(),
            scheduler: SchedulerConfig::default(),
            migration: MigrationConfig::default(),
            workload: WorkloadConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let c = &self.cluster;
        if c.capacity_bytes == 0 || c.kv_bytes_per_token == 0 {
            return Err(Error::Config("capacity_bytes and kv_bytes_per_token must be positive".into()));
        }
        if c.kv_bytes_per_token > c.capacity_bytes {
            return Err(Error::Config("a single token's KV exceeds GPU capacity".into()));
        }
        c.topology.validate()?;
        self.scheduler.priority.validate()?;
        self.scheduler.lb.validate()?;
        let m = &self.migration;
        if !(m.budget_fraction > 0.0 && m.budget_fraction <= 1.0) {
            return Err(Error::Config("migration budget_fraction must lie in (0, 1]".into()));
        }
        let w = &self.workload;
        if !(w.mean_interarrival_slots.is_finite() && w.mean_interarrival_slots > 0.0) {
            return Err(Error::Config("mean_interarrival_slots must be positive".into()));
        }
        w.lengths.validate()?;
        if w.scale == 0 {
            return Err(Error::Config("workload scale must be at least 1".into()));
        }
        if let Some(p) = &w.trace {
            if !p.exists() {
                return Err(Error::Config(format!("trace file {} does not exist", p.display())));
            }
        }
        let s = &self.sim;
        if s.epoch_slots == 0 || s.tokens_per_slot == 0 {
            return Err(Error::Config("epoch_slots and tokens_per_slot must be at least 1".into()));
        }
        if !(s.slot_seconds.is_finite() && s.slot_seconds > 0.0) {
            return Err(Error::Config("slot_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file. Relative trace paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Config =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(t), Some(dir)) = (&cfg.workload.trace, path.parent()) {
            if t.is_relative() {
                cfg.workload.trace = Some(dir.join(t));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn epoch_seconds(&self) -> f64 {
        self.sim.epoch_slots as f64 * self.sim.slot_seconds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_document_uses_defaults() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_json(r#"{"sim": {"durations": 5}}"#).is_err());
        assert!(Config::from_json(r#"{"extra": 1}"#).is_err());
        assert!(Config::from_json(r#"{"scheduler": {"priority": {"weight_gpu": 1}}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_json(r#"{"sim": {"epoch_slots": 0}}"#).is_err());
        assert!(Config::from_json(r#"{"migration": {"budget_fraction": 0}}"#).is_err());
        assert!(Config::from_json(r#"{"scheduler": {"kind": "ff"}}"#).is_err());
        assert!(Config::from_json(r#"{"workload": {"trace": "/definitely/missing.csv"}}"#).is_err());
        assert!(Config::from_json(r#"{"schema_version": 2}"#).is_err());
    }

    #[test]
    fn scheduler_kinds_parse() {
        for k in SchedulerKind::ALL {
            assert_eq!(k.as_str().parse::<SchedulerKind>().unwrap(), k);
        }
        assert!("xyz".parse::<SchedulerKind>().is_err());
        let cfg = Config::from_json(r#"{"scheduler": {"kind": "lb", "batching": false}}"#).unwrap();
        assert_eq!(cfg.scheduler.build().name(), "lb");
    }
}
