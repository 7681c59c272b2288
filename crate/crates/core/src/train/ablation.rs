//! Module ablation: train several toggle configurations identically and compare
//! their errors on training and held-out pairs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate_samples, train, LossConfig, SyntheticSample, TrainConfig};
use crate::error::{Error, Result};
use crate::network::{self, NetworkConfig};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub name: String,
    pub config: NetworkConfig,
}

impl AblationEntry {
    pub fn new(name: impl Into<String>, config: NetworkConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

/// Baseline, each module alone, and the full model, built on `base`'s widths.
pub fn standard_grid(base: &NetworkConfig) -> Vec<AblationEntry> {
    vec![
        AblationEntry::new("baseline", base.with_modules(false, false, false)),
        AblationEntry::new("+PSC", base.with_modules(true, false, false)),
        AblationEntry::new("+TCC", base.with_modules(false, true, false)),
        AblationEntry::new("+RRCU", base.with_modules(false, false, true)),
        AblationEntry::new("full", base.with_modules(true, true, true)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub psc: bool,
    pub tcc: bool,
    pub rrcu: bool,
    pub params: usize,
    pub final_loss: f64,
    pub train_aee: f64,
    pub train_fl_all: f64,
    pub holdout_aee: f64,
    pub holdout_fl_all: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Fixed-width table: one row per configuration, module marks, then errors.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "" };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:^4} {:^4} {:^4} {:>9} {:>10} {:>10} {:>10} {:>10}",
            "config", "PSC", "TCC", "RRCU", "params", "train AEE", "train Fl", "hold AEE", "hold Fl"
        );
        let _ = writeln!(out, "{}", "-".repeat(79));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:^4} {:^4} {:^4} {:>9} {:>10.4} {:>9.2}% {:>10.4} {:>9.2}%",
                r.config,
                mark(r.psc),
                mark(r.tcc),
                mark(r.rrcu),
                r.params,
                r.train_aee,
                100.0 * r.train_fl_all,
                r.holdout_aee,
                100.0 * r.holdout_fl_all
            );
        }
        out
    }
}

/// Trains every grid entry with the same data, schedule and seed.
pub fn run_ablation<T: Scalar>(
    grid: &[AblationEntry],
    train_data: &[SyntheticSample<T>],
    holdout: &[SyntheticSample<T>],
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(grid.len());
    for entry in grid {
        let outcome = train(&entry.config, loss, train_data, cfg)?;
        let tr = evaluate_samples(&entry.config, &outcome.params, train_data)?;
        let ho = evaluate_samples(&entry.config, &outcome.params, holdout)?;
        rows.push(AblationRow {
            config: entry.name.clone(),
            psc: entry.config.use_psc,
            tcc: entry.config.use_tcc,
            rrcu: entry.config.use_rrcu,
            params: network::count_parameters(&entry.config, &outcome.params)?,
            final_loss: outcome.log.last().map_or(f64::NAN, |e| e.total_loss),
            train_aee: tr.aee,
            train_fl_all: tr.fl_all,
            holdout_aee: ho.aee,
            holdout_fl_all: ho.fl_all,
        });
    }
    Ok(AblationTable { rows })
}
