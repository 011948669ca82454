use crate::controller::ControllerRecord;
use crate::error::Result;
use crate::evalbench::RouterSnapshot;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const RUN_LOG_CSV: &str = "run_log.csv";
pub const RUN_LOG_JSON: &str = "run_log.json";

/// Metrics and routing statistics recorded after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Physical-units RMSE of the aggregated prediction on the training set.
    pub train_rmse: f64,
    pub train_rel_l2: f64,
    pub val_rel_l2: Option<f64>,
    /// Normalised-units losses from the end-of-epoch evaluation pass.
    pub expert_loss: f64,
    pub router_loss: f64,
    pub total_loss: f64,
    /// Mean of the per-batch objectives optimised during the epoch.
    pub expert_phase_loss: f64,
    pub router_phase_loss: f64,
    /// λ in force during this epoch.
    pub lambda_used: f64,
    pub controller: ControllerRecord,
    /// Mean routing probabilities per patch position `[S², M]`.
    pub router_probs: Vec<Vec<f64>>,
    /// Number of samples whose argmax expert is `j`, per patch position `[S², M]`.
    pub argmax_counts: Vec<Vec<usize>>,
    /// Router weights unchanged across every expert phase.
    pub router_frozen_ok: bool,
    /// Expert weights unchanged across every router phase.
    pub experts_frozen_ok: bool,
    /// Patch evaluations performed by each expert during the expert phase.
    pub expert_patch_counts: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
}

impl RunLog {
    pub fn push(&mut self, epoch: EpochLog) {
        self.epochs.push(epoch);
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// Router probability matrices per epoch.
    pub fn snapshots(&self) -> Vec<RouterSnapshot> {
        self.epochs
            .iter()
            .map(|e| RouterSnapshot {
                epoch: e.epoch,
                probs: e.router_probs.clone(),
            })
            .collect()
    }

    /// `epoch,train_rmse,train_rel_l2,val_rel_l2,lambda,e,P,I`; `lambda` is the controller output.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_rmse,train_rel_l2,val_rel_l2,lambda,e,P,I\n");
        for e in &self.epochs {
            let val = e.val_rel_l2.map(|v| format!("{v:e}")).unwrap_or_default();
            let c = &e.controller;
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{:e},{:e},{:e},{:e}",
                e.epoch, e.train_rmse, e.train_rel_l2, val, c.lambda, c.e, c.p, c.i
            );
        }
        out
    }

    /// Writes the CSV table and the JSON sidecar into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_LOG_CSV), self.to_csv())?;
        std::fs::write(dir.join(RUN_LOG_JSON), serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
