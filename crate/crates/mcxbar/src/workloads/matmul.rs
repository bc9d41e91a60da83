//! Double-buffered tiled matrix multiplication driven over the network.
//!
//! Every cluster owns a row block of the output and walks it one tile at a
//! time. Its slice of the left operand loads once up front; the shared
//! right-operand tile is refetched every iteration and is what the three
//! variants move differently: per-cluster reads, one read per group with
//! software forwarding, or a single hardware multicast. Transfers for the
//! next tile overlap computation on the current one, bounded by the shared
//! double buffers: iterations advance over a synchronization point once
//! both finish.

use crate::addr::AddrSet;
use crate::dma::TransferDescriptor;
use crate::network::build_network;
use crate::sim::Cycle;
use crate::topology::{ConfigError, Topology};
use crate::xbar::TraceConsumer;

use super::TrafficReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatmulVariant {
    Baseline,
    SwMcast,
    HwMcast,
}

impl MatmulVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatmulVariant::Baseline => "baseline",
            MatmulVariant::SwMcast => "sw_mcast",
            MatmulVariant::HwMcast => "hw_mcast",
        }
    }
}

impl std::str::FromStr for MatmulVariant {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(MatmulVariant::Baseline),
            "sw_mcast" | "sw" => Ok(MatmulVariant::SwMcast),
            "hw_mcast" | "hw" => Ok(MatmulVariant::HwMcast),
            other => Err(ConfigError::BadParameter(format!(
                "unknown matmul variant {other:?}"
            ))),
        }
    }
}

/// Square double-precision matmul schedule, one row block per cluster,
/// walked in column tiles with double buffering.
#[derive(Debug, Clone, Copy)]
pub struct MatmulSchedule {
    /// M = N = K.
    pub dim: usize,
    /// Columns per tile.
    pub tile_cols: usize,
    pub variant: MatmulVariant,
}

pub const ELEM_BYTES: u64 = 8;

impl MatmulSchedule {
    pub fn new(variant: MatmulVariant) -> Self {
        MatmulSchedule {
            dim: 256,
            tile_cols: 16,
            variant,
        }
    }

    pub fn iterations(&self) -> usize {
        self.dim / self.tile_cols
    }

    pub fn row_block_rows(&self, topo: &Topology) -> usize {
        self.dim / topo.num_clusters()
    }

    /// Left-operand row block per cluster, loaded once.
    pub fn a_block_bytes(&self, topo: &Topology) -> u64 {
        (self.row_block_rows(topo) * self.dim) as u64 * ELEM_BYTES
    }

    /// Right-operand tile per iteration.
    pub fn b_tile_bytes(&self) -> u64 {
        (self.dim * self.tile_cols) as u64 * ELEM_BYTES
    }

    /// Output tile written back per iteration per cluster.
    pub fn c_tile_bytes(&self, topo: &Topology) -> u64 {
        (self.row_block_rows(topo) * self.tile_cols) as u64 * ELEM_BYTES
    }

    pub fn total_flops(&self) -> u64 {
        2 * (self.dim as u64).pow(3)
    }

    pub fn compute_cycles_per_tile(&self, topo: &Topology) -> Cycle {
        let tile_flops = 2 * self.row_block_rows(topo) as u64
            * self.tile_cols as u64
            * self.dim as u64;
        tile_flops.div_ceil(topo.flops_per_cycle)
    }

    pub fn validate(&self, topo: &Topology) -> Result<(), ConfigError> {
        if self.dim == 0 || self.tile_cols == 0 || self.dim % self.tile_cols != 0 {
            return Err(ConfigError::BadParameter(format!(
                "dim {} not tileable by {} columns",
                self.dim, self.tile_cols
            )));
        }
        if self.dim % topo.num_clusters() != 0 {
            return Err(ConfigError::BadParameter(format!(
                "dim {} rows do not split over {} clusters",
                self.dim,
                topo.num_clusters()
            )));
        }
        // Operands and result must fit in the shared memory, with room for
        // double buffering of the tile stream.
        let footprint = 3 * (self.dim * self.dim) as u64 * ELEM_BYTES;
        if footprint > topo.llc_size {
            return Err(ConfigError::BadParameter(format!(
                "working set {footprint} exceeds memory size {}",
                topo.llc_size
            )));
        }
        Ok(())
    }
}

const A_OFFSET: u64 = 0x0;
const B_OFFSET: u64 = 0x10000;

fn b_offset(iter: usize) -> u64 {
    B_OFFSET + (iter % 2) as u64 * 0x8000
}

#[derive(Debug, PartialEq)]
enum Phase {
    /// Waiting for the A blocks and first tile.
    Prologue,
    /// Computing tile `t`, prefetching `t + 1`.
    Iter(usize),
    /// Waiting for the writeback drain.
    Drain,
    Done,
}

/// Runs the schedule on a fresh system instance.
pub fn run_matmul(
    topo: &Topology,
    schedule: &MatmulSchedule,
    trace: &mut dyn TraceConsumer,
) -> Result<TrafficReport, ConfigError> {
    schedule.validate(topo)?;
    if schedule.variant == MatmulVariant::HwMcast && !topo.multicast_enabled {
        return Err(ConfigError::BadParameter(
            "hardware multicast is disabled in this configuration".into(),
        ));
    }
    let mut sys = build_network(topo)?;
    let n = topo.num_clusters();
    let iters = schedule.iterations();
    let compute = schedule.compute_cycles_per_tile(topo);
    let a_bytes = schedule.a_block_bytes(topo);
    let b_bytes = schedule.b_tile_bytes();
    let c_bytes = schedule.c_tile_bytes(topo);
    let request_leg = topo.round_trip / 2;
    let detect = topo.sw_overhead / 2;
    let barrier = topo.sw_overhead;

    // Tag space: A loads, then per-iteration tile transfers, then
    // writebacks.
    let tag_a = |c: usize| 1 + c as u64;
    let tile_base = 1 + n as u64;
    let per_iter = n as u64 + 1;
    let tag_tile = |t: usize, k: usize| tile_base + t as u64 * per_iter + k as u64;
    let wb_base = tile_base + iters as u64 * per_iter;
    let tag_wb = |t: usize, c: usize| wb_base + (t * n + c) as u64;

    // Issue the A loads and the first tile fetch immediately.
    for c in 0..n {
        sys.llc_push(TransferDescriptor {
            target: AddrSet::unicast(topo.cluster_addr(c, A_OFFSET)),
            bytes: a_bytes,
            tag: tag_a(c),
            available_at: request_leg,
        });
    }

    // Per-iteration tile movement. Returns the memory-side tags and, for
    // the software variant, the leaders that will forward on completion.
    let issue_tile_fetch =
        |sys: &mut crate::network::System, t: usize, at: Cycle| -> (Vec<u64>, Vec<(usize, u64)>) {
            let mut llc_tags = Vec::new();
            let mut leaders = Vec::new();
            match schedule.variant {
                MatmulVariant::Baseline => {
                    for c in 0..n {
                        let tag = tag_tile(t, c);
                        sys.llc_push(TransferDescriptor {
                            target: AddrSet::unicast(topo.cluster_addr(c, b_offset(t))),
                            bytes: b_bytes,
                            tag,
                            available_at: at + request_leg,
                        });
                        llc_tags.push(tag);
                    }
                }
                MatmulVariant::SwMcast => {
                    for g in 0..topo.num_groups {
                        let leader = g * topo.clusters_per_group;
                        let tag = tag_tile(t, g);
                        sys.llc_push(TransferDescriptor {
                            target: AddrSet::unicast(topo.cluster_addr(leader, b_offset(t))),
                            bytes: b_bytes,
                            tag,
                            available_at: at + request_leg,
                        });
                        llc_tags.push(tag);
                        leaders.push((leader, tag));
                    }
                }
                MatmulVariant::HwMcast => {
                    let tag = tag_tile(t, 0);
                    let target = if n == 1 {
                        AddrSet::unicast(topo.cluster_addr(0, b_offset(t)))
                    } else {
                        topo.cluster_span(n, b_offset(t)).expect("validated span")
                    };
                    sys.llc_push(TransferDescriptor {
                        target,
                        bytes: b_bytes,
                        tag,
                        available_at: at + request_leg,
                    });
                    llc_tags.push(tag);
                }
            }
            (llc_tags, leaders)
        };

    let (first_tags, mut pending_leaders) = issue_tile_fetch(&mut sys, 0, 0);

    let mut phase = Phase::Prologue;
    // Memory-side and forward tags the current prefetch must finish.
    let mut fetch_llc_tags = first_tags;
    let mut fetch_fwd_tags: Vec<(usize, u64)> = Vec::new();
    let mut next_fwd_tag = wb_base + (iters * n) as u64;
    let mut compute_done: Cycle = 0;
    let mut barrier_at: Option<Cycle> = None;
    let mut wb_tags: Vec<(usize, u64)> = Vec::new();
    let cap: Cycle = 10_000_000;

    loop {
        sys.step(trace);
        let now = sys.cycle;

        // Leaders forward the tile to their group mates once the memory
        // engine reports their copy delivered.
        pending_leaders.retain(|(leader, tag)| {
            match sys.llc_agent_ref().completion_of(*tag).map(|c| c.cycle) {
                Some(arrival) => {
                    for local in 1..topo.clusters_per_group {
                        let dest = leader + local;
                        sys.cluster_transfer(
                            *leader,
                            TransferDescriptor {
                                target: AddrSet::unicast(
                                    topo.cluster_addr(dest, current_b_offset(&phase)),
                                ),
                                bytes: b_bytes,
                                tag: next_fwd_tag,
                                available_at: arrival + detect,
                            },
                        );
                        fetch_fwd_tags.push((*leader, next_fwd_tag));
                        next_fwd_tag += 1;
                    }
                    false
                }
                None => true,
            }
        });

        let fetch_done = pending_leaders.is_empty()
            && fetch_llc_tags
                .iter()
                .all(|t| sys.llc_agent_ref().completion_of(*t).is_some())
            && fetch_fwd_tags
                .iter()
                .all(|(a, t)| sys.cluster_agent_ref(*a).completion_of(*t).is_some());

        match phase {
            Phase::Prologue => {
                let a_done =
                    (0..n).all(|c| sys.llc_agent_ref().completion_of(tag_a(c)).is_some());
                if a_done && fetch_done {
                    match barrier_at {
                        None => barrier_at = Some(now + barrier),
                        Some(at) if now >= at => {
                            barrier_at = None;
                            phase = Phase::Iter(0);
                            compute_done = now + compute;
                            fetch_llc_tags.clear();
                            fetch_fwd_tags.clear();
                            if iters > 1 {
                                let (tags, leaders) = issue_tile_fetch(&mut sys, 1, now);
                                fetch_llc_tags = tags;
                                pending_leaders = leaders;
                            }
                        }
                        Some(_) => {}
                    }
                }
            }
            Phase::Iter(t) => {
                if now == compute_done {
                    // Computation over: write the output tile back.
                    for c in 0..n {
                        let off = (c * iters + t) as u64 * c_bytes;
                        sys.cluster_transfer(
                            c,
                            TransferDescriptor {
                                target: AddrSet::unicast(topo.llc_base + off),
                                bytes: c_bytes,
                                tag: tag_wb(t, c),
                                available_at: now,
                            },
                        );
                        wb_tags.push((c, tag_wb(t, c)));
                    }
                }
                if now >= compute_done && fetch_done {
                    match barrier_at {
                        None => barrier_at = Some(now + barrier),
                        Some(at) if now >= at => {
                            barrier_at = None;
                            if t + 1 < iters {
                                phase = Phase::Iter(t + 1);
                                compute_done = now + compute;
                                fetch_llc_tags.clear();
                                fetch_fwd_tags.clear();
                                if t + 2 < iters {
                                    let (tags, leaders) =
                                        issue_tile_fetch(&mut sys, t + 2, now);
                                    fetch_llc_tags = tags;
                                    pending_leaders = leaders;
                                }
                            } else {
                                phase = Phase::Drain;
                            }
                        }
                        Some(_) => {}
                    }
                }
            }
            Phase::Drain => {
                let wbs_done = wb_tags
                    .iter()
                    .all(|(a, t)| sys.cluster_agent_ref(*a).completion_of(*t).is_some());
                if wbs_done && sys.quiesced() {
                    phase = Phase::Done;
                }
            }
            Phase::Done => break,
        }

        if now > cap {
            return Err(ConfigError::BadParameter(format!(
                "matmul did not finish within {cap} cycles"
            )));
        }
    }

    let last_wb = wb_tags
        .iter()
        .map(|(a, t)| sys.cluster_agent_ref(*a).completion_of(*t).unwrap().cycle)
        .max()
        .unwrap_or(sys.cycle);

    Ok(TrafficReport {
        cycles: last_wb + (topo.sw_overhead - detect),
        llc_read_bytes: sys.llc_read_bytes(),
        llc_write_bytes: sys.llc_write_bytes(),
        per_link_beats: sys.pool.w_traffic(),
        flops: schedule.total_flops(),
        delivered: (0..n)
            .map(|c| (c, sys.cluster_sink(c).bytes_received))
            .collect(),
    })
}

fn current_b_offset(phase: &Phase) -> u64 {
    match phase {
        Phase::Prologue => b_offset(0),
        Phase::Iter(t) => b_offset(t + 1),
        _ => b_offset(0),
    }
}
