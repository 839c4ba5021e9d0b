//! Edge-cloud partitioning simulator.
//!
//! The model is split at an exit boundary: the edge computes blocks up to
//! exit `s` and transmits a sample only when no exit at or before `s` fires.
//! Average latency follows the affine model
//! `edge_latency + p * remote_latency`, where `p` is the transmission
//! fraction.

use std::io::Write;

use crate::dataset::SampleSet;
use crate::error::{Error, Result};
use crate::metrics::evaluate_records;
use crate::multiexit::MultiExitNetwork;
use crate::policy::ExitPolicy;

#[derive(Debug, Clone)]
pub struct PartitionScenario {
    /// Number of leading exits computed at the edge; `1..net.num_exits()`.
    pub split_exit: usize,
    pub edge_latency_ms: f64,
    /// Network round trip plus cloud compute, per transmitted sample.
    pub remote_latency_ms: f64,
    /// Adversary's per-sample crafting time, for amplification accounting.
    pub adversary_craft_ms: f64,
}

impl PartitionScenario {
    pub fn validate(&self, num_exits: usize) -> Result<()> {
        if self.split_exit == 0 || self.split_exit >= num_exits {
            return Err(Error::InvalidScenario(format!(
                "split_exit {} must be in 1..{}",
                self.split_exit, num_exits
            )));
        }
        if self.edge_latency_ms < 0.0 || self.remote_latency_ms < 0.0 {
            return Err(Error::InvalidScenario("negative latency".into()));
        }
        Ok(())
    }

    /// The affine latency model for a transmission fraction `p`.
    pub fn latency_ms(&self, p: f64) -> f64 {
        self.edge_latency_ms + p * self.remote_latency_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficReport {
    /// Fraction of samples the edge must transmit to the cloud.
    pub transmission_fraction: f64,
    pub avg_latency_ms: f64,
    /// Latency amplification versus a clean baseline; filled by
    /// [`amplification`] when comparing runs.
    pub amplification: Option<f64>,
}

impl TrafficReport {
    /// CSV row `scenario,p,avg_latency_ms,amplification` (empty last field
    /// when no baseline comparison was made).
    pub fn write_csv_row<W: Write>(&self, scenario: &str, mut w: W) -> std::io::Result<()> {
        match self.amplification {
            Some(a) => writeln!(
                w,
                "{scenario},{},{},{a}",
                self.transmission_fraction, self.avg_latency_ms
            ),
            None => writeln!(
                w,
                "{scenario},{},{},",
                self.transmission_fraction, self.avg_latency_ms
            ),
        }
    }
}

pub fn traffic_csv_header<W: Write>(mut w: W) -> std::io::Result<()> {
    writeln!(w, "scenario,p,avg_latency_ms,amplification")
}

/// Runs adaptive inference over `set` and reports transmission fraction and
/// average latency under `scenario`.
pub fn simulate(
    net: &MultiExitNetwork,
    policy: &ExitPolicy,
    set: &SampleSet,
    scenario: &PartitionScenario,
) -> Result<TrafficReport> {
    scenario.validate(net.num_exits())?;
    if set.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let records = evaluate_records(net, policy, set)?;
    let transmitted = records
        .iter()
        .filter(|r| r.exit_index >= scenario.split_exit)
        .count();
    let p = transmitted as f64 / records.len() as f64;
    Ok(TrafficReport {
        transmission_fraction: p,
        avg_latency_ms: scenario.latency_ms(p),
        amplification: None,
    })
}

/// Latency increase of the attacked run per second of adversary crafting
/// time: `(attacked - clean) / craft`.
pub fn amplification(
    clean: &TrafficReport,
    attacked: &TrafficReport,
    scenario: &PartitionScenario,
) -> Result<f64> {
    if scenario.adversary_craft_ms <= 0.0 {
        return Err(Error::InvalidScenario(
            "adversary_craft_ms must be positive".into(),
        ));
    }
    Ok((attacked.avg_latency_ms - clean.avg_latency_ms) / scenario.adversary_craft_ms)
}
