//! Scenario configuration: a TOML file describing topology, workload,
//! optimizer, checkpointing, compression, the failure schedule, and output
//! knobs. Validation reports precise field paths.
//!
//! ```toml
//! [topology]
//! racks = 2
//! nodes_per_rack = 2
//! ranks_per_node = 2
//! intra_rack_bw = 2.0e9        # bytes per simulated second
//! tier3_bw = 4.0e8
//! tier1_bw = 1.6e10
//!
//! [topology.probe_latency]
//! tier1 = 0.05
//! tier2 = 0.15
//! tier3 = 0.5
//!
//! [model]
//! phi = 1048576                # parameter count
//! seed = 42
//! batch_samples = 2
//! noise_std = 0.01
//!
//! [optimizer]
//! lr = 1e-3
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//!
//! [checkpoint]
//! base_interval = 50           # I
//! batch_len = 5                # N
//! safety_margin = 5            # s; defaults to ceil(I / 10)
//! chunk_cap_bytes = 268435456  # C
//!
//! [compression]
//! small_threshold = 100000
//! k = 0.01
//! sample_size = 32768
//! chunk_limit = 2147483647
//!
//! [run]
//! iterations = 500
//! compute_time = 0.1           # simulated seconds per iteration
//! fused_step_fraction = 0.25   # replay cost of a fused step vs a native one
//! lossless = false
//! naive_reclaim = false
//! # tier3_root = "/tmp/tier3"  # falls back to $TIERCKPT_T3_ROOT, then <out>/tier3
//!
//! [[failures]]
//! at_iteration = 137
//! kind = "software"            # or { kind = "node", node = 1, replace = true }
//!                              # or { kind = "rack", rack = 0 }
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::compress::CompressConfig;
use crate::error::ConfigError;
use crate::saver::SaverConfig;
use crate::state::AdamParams;
use crate::topology::{LinkParams, ProbeLatency, Topology};

/// Environment variable consulted for the default Tier-3 root.
pub const TIER3_ROOT_ENV: &str = "TIERCKPT_T3_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologySection {
    pub racks: usize,
    pub nodes_per_rack: usize,
    pub ranks_per_node: usize,
    pub intra_rack_bw: f64,
    pub tier3_bw: f64,
    pub tier1_bw: f64,
    pub probe_latency: ProbeLatency,
}

impl Default for TopologySection {
    fn default() -> Self {
        let links = LinkParams::default();
        Self {
            racks: 2,
            nodes_per_rack: 2,
            ranks_per_node: 2,
            intra_rack_bw: links.intra_rack_bw,
            tier3_bw: links.tier3_bw,
            tier1_bw: links.tier1_bw,
            probe_latency: links.probe_latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub phi: usize,
    pub seed: u64,
    pub batch_samples: usize,
    pub noise_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            phi: 1 << 20,
            seed: 42,
            batch_samples: 2,
            noise_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointSection {
    pub base_interval: u64,
    pub batch_len: u64,
    /// Safety margin; `None` derives `ceil(base_interval / 10)`.
    pub safety_margin: Option<u64>,
    pub chunk_cap_bytes: u64,
}

impl Default for CheckpointSection {
    fn default() -> Self {
        Self {
            base_interval: 50,
            batch_len: 5,
            safety_margin: None,
            chunk_cap_bytes: 256 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub iterations: u64,
    pub compute_time: f64,
    pub fused_step_fraction: f64,
    pub lossless: bool,
    pub naive_reclaim: bool,
    pub tier3_root: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            iterations: 500,
            compute_time: 0.1,
            fused_step_fraction: 0.25,
            lossless: false,
            naive_reclaim: false,
            tier3_root: None,
        }
    }
}

/// A scheduled failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FailureKind {
    /// Processes die; volatile host memory survives.
    Software,
    /// One node's volatile state is lost; the node comes back empty
    /// (fresh replacement or reboot).
    Node { node: usize, replace: bool },
    /// All nodes of a rack lose volatile state and reboot empty.
    Rack { rack: usize },
}

impl FailureKind {
    pub fn label(&self) -> &'static str {
        match self {
            FailureKind::Software => "software",
            FailureKind::Node { .. } => "node",
            FailureKind::Rack { .. } => "rack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub at_iteration: u64,
    #[serde(flatten)]
    pub kind: FailureKind,
}

/// Full scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ScenarioConfig {
    pub topology: TopologySection,
    pub model: ModelSection,
    pub optimizer: AdamParams,
    pub checkpoint: CheckpointSection,
    pub compression: CompressConfig,
    pub run: RunSection,
    pub failures: Vec<FailureEvent>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::new("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build_topology()?;
        if self.model.phi == 0 {
            return Err(ConfigError::new("model.phi", "must be >= 1"));
        }
        if self.model.batch_samples == 0 {
            return Err(ConfigError::new("model.batch_samples", "must be >= 1"));
        }
        let ranks = self.topology.racks * self.topology.nodes_per_rack * self.topology.ranks_per_node;
        if self.model.phi < ranks {
            return Err(ConfigError::new(
                "model.phi",
                "must be at least the number of ranks so every partition is nonempty",
            ));
        }
        self.optimizer.validate()?;
        self.saver_config().validate()?;
        if !(self.run.compute_time > 0.0) {
            return Err(ConfigError::new("run.compute_time", "must be > 0"));
        }
        if !(self.run.fused_step_fraction > 0.0 && self.run.fused_step_fraction <= 1.0) {
            return Err(ConfigError::new(
                "run.fused_step_fraction",
                "must be in (0, 1]",
            ));
        }
        if self.run.iterations == 0 {
            return Err(ConfigError::new("run.iterations", "must be >= 1"));
        }
        for (i, f) in self.failures.iter().enumerate() {
            if f.at_iteration >= self.run.iterations {
                return Err(ConfigError::new(
                    format!("failures[{i}].at_iteration"),
                    "must fall within the run",
                ));
            }
            match f.kind {
                FailureKind::Node { node, .. } => {
                    if node >= self.topology.racks * self.topology.nodes_per_rack {
                        return Err(ConfigError::new(
                            format!("failures[{i}].node"),
                            "node id out of range",
                        ));
                    }
                }
                FailureKind::Rack { rack } => {
                    if rack >= self.topology.racks {
                        return Err(ConfigError::new(
                            format!("failures[{i}].rack"),
                            "rack id out of range",
                        ));
                    }
                }
                FailureKind::Software => {}
            }
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology, ConfigError> {
        let links = LinkParams {
            tier1_bw: self.topology.tier1_bw,
            intra_rack_bw: self.topology.intra_rack_bw,
            tier3_bw: self.topology.tier3_bw,
            probe_latency: self.topology.probe_latency,
        };
        Topology::grid(
            self.topology.racks,
            self.topology.nodes_per_rack,
            self.topology.ranks_per_node,
            links,
        )
    }

    pub fn safety_margin(&self) -> u64 {
        self.checkpoint
            .safety_margin
            .unwrap_or_else(|| SaverConfig::default_safety_margin(self.checkpoint.base_interval))
    }

    pub fn saver_config(&self) -> SaverConfig {
        SaverConfig {
            batch_len: self.checkpoint.batch_len,
            base_interval: self.checkpoint.base_interval,
            safety_margin: self.safety_margin(),
            chunk_cap_bytes: self.checkpoint.chunk_cap_bytes,
            compress: self.compression,
            lossless: self.run.lossless,
            seed: self.model.seed,
        }
    }

    pub fn num_ranks(&self) -> usize {
        self.topology.racks * self.topology.nodes_per_rack * self.topology.ranks_per_node
    }

    /// Resolves the Tier-3 root: explicit config, then the environment
    /// variable, then `<out_dir>/tier3`.
    pub fn resolve_tier3_root(&self, out_dir: &std::path::Path) -> PathBuf {
        if let Some(root) = &self.run.tier3_root {
            return root.clone();
        }
        if let Ok(env_root) = std::env::var(TIER3_ROOT_ENV) {
            if !env_root.is_empty() {
                return PathBuf::from(env_root);
            }
        }
        out_dir.join("tier3")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ScenarioConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.num_ranks(), 8);
        assert_eq!(cfg.safety_margin(), 5);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ScenarioConfig::default();
        let text = cfg.to_toml();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn failure_kinds_parse_from_toml() {
        let text = r#"
            [run]
            iterations = 200

            [[failures]]
            at_iteration = 10
            kind = "software"

            [[failures]]
            at_iteration = 20
            kind = "node"
            node = 1
            replace = true

            [[failures]]
            at_iteration = 30
            kind = "rack"
            rack = 0
        "#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.failures.len(), 3);
        assert_eq!(cfg.failures[0].kind, FailureKind::Software);
        assert_eq!(
            cfg.failures[1].kind,
            FailureKind::Node {
                node: 1,
                replace: true
            }
        );
        assert_eq!(cfg.failures[2].kind, FailureKind::Rack { rack: 0 });
    }

    #[test]
    fn validation_reports_field_paths() {
        let mut cfg = ScenarioConfig::default();
        cfg.checkpoint.batch_len = 7;
        let err = cfg.validate().unwrap_err();
        assert!(err.field.contains("batch_len"), "{err}");

        let mut cfg = ScenarioConfig::default();
        cfg.failures.push(FailureEvent {
            at_iteration: 10_000,
            kind: FailureKind::Software,
        });
        let err = cfg.validate().unwrap_err();
        assert!(err.field.contains("failures[0]"), "{err}");

        let mut cfg = ScenarioConfig::default();
        cfg.topology.racks = 0;
        assert!(cfg.validate().is_err());
    }
}
