//! Workloads over the simulated network: a one-to-all copy microbenchmark,
//! a double-buffered tiled matrix multiplication, and the scaling/roofline
//! analytics over their traffic reports.

mod analysis;
mod matmul;
mod microbench;

pub use analysis::{amdahl_fraction, roofline_point, DomainError, RooflinePoint};
pub use matmul::{run_matmul, MatmulSchedule, MatmulVariant};
pub use microbench::{run_microbenchmark, MicrobenchMode};

use crate::sim::Cycle;

/// Per-run byte and cycle accounting.
#[derive(Debug, Clone, Default)]
pub struct TrafficReport {
    pub cycles: Cycle,
    /// Bytes read out of the shared memory.
    pub llc_read_bytes: u64,
    /// Bytes written into the shared memory.
    pub llc_write_bytes: u64,
    /// Beats over every W link, by link label.
    pub per_link_beats: Vec<(String, u64)>,
    /// Compute work represented by the run.
    pub flops: u64,
    /// Bytes landed in each cluster memory.
    pub delivered: Vec<(usize, u64)>,
}

impl TrafficReport {
    pub fn delivered_to(&self, cluster: usize) -> u64 {
        self.delivered
            .iter()
            .find(|(c, _)| *c == cluster)
            .map(|(_, b)| *b)
            .unwrap_or(0)
    }
}
