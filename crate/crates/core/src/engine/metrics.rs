use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Role;

/// One logged row: a training iteration, or an epoch's validation pass (tagged with
/// the iteration count at which it ran).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub stage: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub loss_phi_high: f64,
    pub loss_phi_mid: Option<f64>,
    pub loss_phi_low: Option<f64>,
    pub loss_m: f64,
    pub combined: f64,
    pub split: Role,
}

impl MetricRecord {
    pub fn loss_phi(&self) -> f64 {
        self.loss_phi_high + self.loss_phi_mid.unwrap_or(0.0) + self.loss_phi_low.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub stage: usize,
    pub iterations: usize,
    pub train_loss_phi: f64,
    pub train_loss_m: f64,
    pub train_combined: f64,
    pub val_loss_phi: Option<f64>,
    pub val_loss_m: Option<f64>,
    pub val_combined: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    pub epochs: Vec<EpochSummary>,
}

pub const CSV_HEADER: &str =
    "iteration,epoch,stage,alpha,beta,lr,loss_phi_high,loss_phi_mid,loss_phi_low,loss_m,combined,split";

impl MetricsLog {
    /// Rows in log order. Wall-clock never enters the CSV, so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.epoch,
                r.stage,
                r.alpha,
                r.beta,
                r.lr,
                r.loss_phi_high,
                opt(r.loss_phi_mid),
                opt(r.loss_phi_low),
                r.loss_m,
                r.combined,
                r.split.name()
            );
        }
        s
    }

    pub fn validation(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.split == Role::Validation)
    }

    pub fn last_validation(&self) -> Option<&MetricRecord> {
        self.validation().last()
    }
}
