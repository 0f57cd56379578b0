//! Measurements produced by a stream run.

use serde::{Deserialize, Serialize};

/// Per-inference latency split by cause.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub compute: f64,
    pub comm: f64,
    pub reload: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.comm + self.reload
    }

    pub fn add(&mut self, other: &Breakdown) {
        self.compute += other.compute;
        self.comm += other.comm;
        self.reload += other.reload;
    }

    pub fn scaled(&self, k: f64) -> Breakdown {
        Breakdown {
            compute: self.compute * k,
            comm: self.comm * k,
            reload: self.reload * k,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Steady-state inferences per second; 0 when fewer than two completed.
    pub ips: f64,
    /// Mean critical-path latency of one inference.
    pub t_forward_seconds: f64,
    /// Mean critical-path breakdown; its parts sum to `t_forward_seconds`.
    pub breakdown: Breakdown,
    pub per_device_busy_seconds: Vec<f64>,
    /// Frames skipped by the recorder under backpressure.
    pub drops: u64,
    pub setup_seconds: f64,
    /// Virtual time from the first frame to the last output.
    pub wall_seconds: f64,
    pub inferences: usize,
}
