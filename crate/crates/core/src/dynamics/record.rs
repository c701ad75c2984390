use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::measure::{EmpiricalMeasure, MomentKind, TestFunction};

/// One recorded state of the particle system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    /// Chain state at `time` (right-continuous value).
    pub regime: usize,
    /// Flat particle positions, `n × dim`.
    pub positions: Vec<f64>,
}

/// Checkpointed trajectory of an N-particle system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub dim: usize,
    pub num_particles: usize,
    pub snapshots: Vec<Snapshot>,
}

/// Per-checkpoint summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub time: f64,
    pub regime: usize,
    pub phi: f64,
    pub psi: f64,
    pub integrals: Vec<(String, f64)>,
}

impl TrajectoryRecord {
    pub fn new(dim: usize, num_particles: usize) -> Self {
        Self {
            dim,
            num_particles,
            snapshots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// Snapshot recorded exactly at `t`.
    pub fn at(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots
            .binary_search_by(|s| s.time.total_cmp(&t))
            .ok()
            .map(|k| &self.snapshots[k])
    }

    pub fn measure(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.snapshots[k].positions.clone())
            .expect("snapshots hold at least one finite particle")
    }

    pub fn terminal_measure(&self) -> EmpiricalMeasure {
        self.measure(self.snapshots.len() - 1)
    }

    /// Long-format CSV: `time,regime,particle,x0,..`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,regime,particle");
        for k in 0..self.dim {
            write!(out, ",x{k}").unwrap();
        }
        out.push('\n');
        for s in &self.snapshots {
            for (p, x) in s.positions.chunks_exact(self.dim).enumerate() {
                write!(out, "{:?},{},{p}", s.time, s.regime).unwrap();
                for v in x {
                    write!(out, ",{v:?}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn summary(&self, functions: &[TestFunction]) -> Vec<CheckpointSummary> {
        (0..self.snapshots.len())
            .map(|k| {
                let mu = self.measure(k);
                let regime = self.snapshots[k].regime;
                CheckpointSummary {
                    time: self.snapshots[k].time,
                    regime,
                    phi: mu.moment(MomentKind::Phi),
                    psi: mu.moment(MomentKind::Psi),
                    integrals: functions
                        .iter()
                        .map(|f| {
                            let v = mu.atoms().map(|x| f.value(x, regime)).sum::<f64>()
                                / mu.len() as f64;
                            (f.id(), v)
                        })
                        .collect(),
                }
            })
            .collect()
    }

    pub fn summary_json(&self, functions: &[TestFunction]) -> serde_json::Value {
        serde_json::to_value(self.summary(functions)).expect("summary rows serialize")
    }
}
