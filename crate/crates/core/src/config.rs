//! Run configuration loaded from TOML. Every section and field is optional;
//! unknown keys are rejected.

use crate::error::{Error, Result};
use crate::eval::Alignment;
use crate::oracle::OracleConfig;
use crate::posegraph::TopK;
use crate::refine::RefineConfig;
use crate::stream::StreamConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CONFPOSE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alignment: Alignment,
    pub rpe_delta: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alignment: Alignment::Sim3,
            rpe_delta: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// Number of consecutive seeds, starting at the root seed.
    pub seeds: usize,
    /// Fusion sizes to compare; empty means the stream fusion `k` only.
    /// Refinement starts from the last one.
    pub ks: Vec<TopK>,
    /// Run pose-graph refinement after aggregation.
    pub refine: bool,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            seeds: 1,
            ks: vec![TopK::K(1), TopK::K(5), TopK::K(10), TopK::All],
            refine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustConfig {
    pub n_clean: usize,
    /// Distractor counts, one setting each.
    pub sizes: Vec<usize>,
    pub trials: usize,
    /// Length of the scene distractors are drawn from.
    pub distractor_frames: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            n_clean: 30,
            sizes: vec![10, 30, 50],
            trials: 10,
            distractor_frames: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    pub edges: usize,
    pub bins: usize,
    /// Sampled pairs are at most this many frames apart.
    pub max_gap: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            edges: 10_000,
            bins: 5,
            max_gap: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub scene: OracleConfig,
    pub stream: StreamConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub offline: OfflineConfig,
    pub robust: RobustConfig,
    pub diag: DiagConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.stream.validate()?;
        if !(self.refine.delta_rot > 0.0 && self.refine.delta_trans > 0.0) {
            return Err(Error::InvalidConfig("refine deltas must be positive".into()));
        }
        if self.offline.seeds == 0 || self.robust.trials == 0 {
            return Err(Error::InvalidConfig("seed counts must be positive".into()));
        }
        if self.diag.bins == 0 || self.diag.max_gap == 0 {
            return Err(Error::InvalidConfig("diag bins and max_gap must be positive".into()));
        }
        if self.robust.n_clean < 3 {
            return Err(Error::InvalidConfig("robust.n_clean must be at least 3".into()));
        }
        Ok(())
    }

    /// Fails for seeds above `i64::MAX`, which TOML integers cannot hold.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// The config with the output directory cleared, so that artifacts do
    /// not depend on where they were written.
    pub fn portable(&self) -> Self {
        Self {
            out: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON rendering of [`RunConfig::portable`],
    /// hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&self.portable()).expect("config types serialize to JSON");
        sha256_hex(json.as_bytes())
    }

    /// Output directory: the configured path if set, otherwise
    /// `<root>/<command>-<seed>` where the root comes from the environment
    /// or defaults to `runs`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{command}-{}", self.seed))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posegraph::Weighting;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.stream.tau, 0.98);
        assert_eq!(c.stream.m_max, 100);
        assert_eq!(c.scene.alpha, 0.2);
    }

    #[test]
    fn nested_overrides() {
        let c = RunConfig::from_toml(
            r#"
            seed = 7
            [scene]
            family = "circle"
            frames = 40
            [stream]
            tau_out = 0.0
            [stream.fusion]
            k = 5
            weighting = "uniform"
            [offline]
            ks = [1, "all"]
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.scene.frames, 40);
        assert_eq!(c.stream.tau_out, 0.0);
        assert_eq!(c.stream.fusion.k, TopK::K(5));
        assert_eq!(c.stream.fusion.weighting, Weighting::Uniform);
        assert_eq!(c.offline.ks, vec![TopK::K(1), TopK::All]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sede = 3"),
            Err(Error::InvalidConfig(_))
        ));
        assert!(RunConfig::from_toml("[stream]\ntau_outt = 0.1").is_err());
        assert!(RunConfig::from_toml("[stream]\nn_cal = 1").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let moved = RunConfig {
            out: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(moved.digest(), a.digest());
        let back = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
