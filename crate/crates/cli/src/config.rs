//! Run configuration: one TOML document describing the network, loss,
//! optimizer and synthetic data of a training run.
//!
//! Every section and key is optional; missing keys take the defaults printed by
//! `stcflow print-config`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stcflow::network::NetworkConfig;
use stcflow::train::{LossConfig, SyntheticSpec, TrainConfig};

use crate::error::{CliError, CliResult};

fn d_pairs() -> usize {
    8
}
fn d_side() -> usize {
    64
}

/// Synthetic training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_pairs")]
    pub pairs: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub motion: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: d_pairs(),
            height: d_side(),
            width: d_side(),
            seed: 0,
            motion: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Where `train` writes its outputs unless `--out` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.motion.validate()?;
        if self.data.pairs == 0 {
            return Err(CliError::usage("data.pairs must be >= 1"));
        }
        if self.data.height % 64 != 0 || self.data.width % 64 != 0 || self.data.height == 0 || self.data.width == 0 {
            return Err(CliError::usage(format!(
                "data size {}x{} must be a positive multiple of 64",
                self.data.height, self.data.width
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.network = NetworkConfig::toy(4);
        cfg.train.steps = 10;
        cfg.train.grad_clip = Some(5.0);
        cfg.data.motion.max_flow = 6.0;
        cfg.output_dir = Some("runs/a".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["stepz = 3", "[train]\nstepz = 3", "[data.motion]\nspeed = 1.0", "[extra]"] {
            let err = RunConfig::parse(doc).unwrap_err();
            assert!(matches!(err, CliError::Usage(_)), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in ["[train]\nsteps = 0", "[data]\nheight = 100", "[data]\npairs = 0", "[network]\nlite_factor = 0"] {
            assert!(RunConfig::parse(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn sections_override_individual_keys() {
        let cfg = RunConfig::parse("[network]\ntoy_scale = 4\nuse_tcc = false\n[loss]\nmode = \"charbonnier\"").unwrap();
        assert_eq!(cfg.network.toy_scale, Some(4));
        assert!(!cfg.network.use_tcc && cfg.network.use_psc);
        assert_eq!(cfg.loss.mode, stcflow::train::LossMode::Charbonnier);
        assert_eq!(cfg.train, TrainConfig::default());
    }
}
