pub mod bench;
pub mod eval;
pub mod infer;
pub mod selftest;
pub mod train;

use serde::{Deserialize, Serialize};
use stcflow::network::NetworkConfig;

use crate::config::RunConfig;

/// File names inside a training output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.stcf";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

/// JSON header stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub steps: usize,
    pub run: RunConfig,
}
