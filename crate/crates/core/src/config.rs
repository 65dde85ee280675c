//! Run configuration: every tunable of every stage in one TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::DataError;
use crate::metrics::{BenchmarkMode, MetricConfig};
use crate::microworld::scene::Archetype;
use crate::microworld::trajectory::ManeuverThresholds;
use crate::policy::PolicyConfig;
use crate::training::{GrpoConfig, Planner, RftRecipe, SftConfig, ShapingConfig};

/// Dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub archetypes: Vec<Archetype>,
    pub neg_frac: f64,
    pub rec_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, count: 300, archetypes: Archetype::ALL.to_vec(), neg_frac: 0.1, rec_frac: 0.1 }
    }
}

/// Synthetic motions the action codebook is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub rollouts: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { rollouts: 400, steps: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub planner: Planner,
    pub mode: BenchmarkMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { planner: Planner::Token, mode: BenchmarkMode::Pdms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub waypoints: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { waypoints: vec![10, 50], repeats: 7 }
    }
}

/// Shared settings of the ablation runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Training seeds per arm.
    pub seeds: Vec<u64>,
    /// Seed of the held-out scenarios (disjoint from training seeds).
    pub eval_seed: u64,
    pub eval_count: usize,
    /// Repeats for timing flow generation.
    pub timing_repeats: usize,
    /// Values swept by the shaping ablation.
    pub lambda_n: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            eval_seed: 100_000,
            eval_count: 100,
            timing_repeats: 15,
            lambda_n: vec![0.25, 0.5, 1.0],
            delta: vec![1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub codebook: CodebookConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub shaping: ShapingConfig,
    pub recipe: RftRecipe,
    pub metrics: MetricConfig,
    pub maneuver: ManeuverThresholds,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, DataError> {
        let cfg: Self = toml::from_str(s).map_err(|e| DataError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = std::fs::read_to_string(path).map_err(|e| DataError::Open { path: path.display().to_string(), source: e })?;
        Self::from_toml_str(&s)
    }

    /// Every field written out, defaults included.
    pub fn to_toml_string(&self) -> Result<String, DataError> {
        toml::to_string(self).map_err(|e| DataError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.into()));
        let p = &self.policy;
        if p.heads == 0 || p.d_model % p.heads != 0 || p.d_bridge % p.heads != 0 {
            return bad("heads must divide d_model and d_bridge");
        }
        if p.n_layers == 0 || p.future_steps == 0 || p.flow_steps == 0 || p.codebook_size < 2 {
            return bad("n_layers, future_steps, flow_steps must be positive and codebook_size at least 2");
        }
        if self.grpo.group_size < 2 {
            return bad("grpo.group_size must be at least 2");
        }
        let sh = &self.shaping;
        if !(sh.delta > 0.0 && sh.gamma > 0.0) {
            return bad("shaping.delta and shaping.gamma must be positive");
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.neg_frac) || !(0.0..=1.0).contains(&d.rec_frac) || d.neg_frac + d.rec_frac > 1.0 {
            return bad("data fractions must lie in [0, 1] and sum to at most 1");
        }
        if d.archetypes.is_empty() {
            return bad("data.archetypes is empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_materializes_defaults() {
        let cfg = RunConfig::from_toml_str("[policy]\nd_model = 64\n[grpo]\nbeta = 0.0\n").unwrap();
        assert_eq!(cfg.policy.d_model, 64);
        assert_eq!(cfg.policy.n_layers, PolicyConfig::default().n_layers);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[policy]\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml_str("[grpo]\ngroup_size = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[policy]\nlayers = \"last_only\"\n").is_ok());
        assert!(RunConfig::from_toml_str("[policy]\nlayers = { interval = 4 }\n").is_ok());
    }
}
