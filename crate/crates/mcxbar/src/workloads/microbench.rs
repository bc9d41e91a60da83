//! One-to-all copy microbenchmark: cluster 0 sends the same data to every
//! other participating cluster, by repeated unicast, by hierarchical
//! software multicast through one leader per group, or by a single
//! hardware multicast transfer.

use crate::dma::TransferDescriptor;
use crate::network::build_network;
use crate::sim::Cycle;
use crate::topology::{ConfigError, Topology};
use crate::xbar::TraceConsumer;

use super::TrafficReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MicrobenchMode {
    Unicast,
    SwMcast,
    HwMcast,
}

impl MicrobenchMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MicrobenchMode::Unicast => "unicast",
            MicrobenchMode::SwMcast => "sw_mcast",
            MicrobenchMode::HwMcast => "hw_mcast",
        }
    }
}

impl std::str::FromStr for MicrobenchMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unicast" => Ok(MicrobenchMode::Unicast),
            "sw_mcast" | "sw" => Ok(MicrobenchMode::SwMcast),
            "hw_mcast" | "hw" => Ok(MicrobenchMode::HwMcast),
            other => Err(ConfigError::BadParameter(format!(
                "unknown microbenchmark mode {other:?}"
            ))),
        }
    }
}

/// Destination buffer offset inside a cluster region.
const DEST_OFFSET: u64 = 0x0;

/// Runs the microbenchmark on a fresh system instance.
///
/// `n_clusters` counts the participating clusters including the source, so
/// the data travels to `n_clusters - 1` destinations. The reported cycle
/// count runs to the last destination's final response plus the software's
/// completion poll.
pub fn run_microbenchmark(
    topo: &Topology,
    mode: MicrobenchMode,
    n_clusters: usize,
    bytes_per_dest: u64,
    trace: &mut dyn TraceConsumer,
) -> Result<TrafficReport, ConfigError> {
    if n_clusters == 0 || n_clusters > topo.num_clusters() {
        return Err(ConfigError::BadParameter(format!(
            "n_clusters {n_clusters} outside 1..={}",
            topo.num_clusters()
        )));
    }
    if bytes_per_dest == 0 {
        return Err(ConfigError::BadParameter("zero-byte transfer".into()));
    }
    if mode == MicrobenchMode::SwMcast && n_clusters <= topo.clusters_per_group {
        return Err(ConfigError::BadParameter(format!(
            "software multicast needs more than one group ({n_clusters} <= {})",
            topo.clusters_per_group
        )));
    }
    if mode == MicrobenchMode::HwMcast && !topo.multicast_enabled {
        return Err(ConfigError::BadParameter(
            "hardware multicast is disabled in this configuration".into(),
        ));
    }

    let mut sys = build_network(topo)?;
    let poll = topo.sw_overhead - topo.sw_overhead / 2;
    let detect = topo.sw_overhead / 2;
    let cap: Cycle =
        200_000 + (bytes_per_dest / topo.beat_bytes as u64 + 2) * n_clusters as u64 * 64;

    let mut expected_tags: Vec<(usize, u64)> = Vec::new(); // (agent cluster, tag)
    let mut next_tag = 1u64;
    // Leaders still owing their forwards, with the source-side tag whose
    // completion signals the leader's copy has landed.
    let mut pending_leaders: Vec<(usize, u64)> = Vec::new();

    match mode {
        MicrobenchMode::Unicast => {
            for dest in 1..n_clusters {
                sys.cluster_transfer(
                    0,
                    TransferDescriptor {
                        target: crate::addr::AddrSet::unicast(
                            topo.cluster_addr(dest, DEST_OFFSET),
                        ),
                        bytes: bytes_per_dest,
                        tag: next_tag,
                        available_at: 0,
                    },
                );
                expected_tags.push((0, next_tag));
                next_tag += 1;
            }
        }
        MicrobenchMode::HwMcast => {
            if n_clusters >= 2 {
                // Minimal mask-form cover of the destinations: a single
                // remote cluster for n = 2, otherwise the aligned span of
                // all participants (the source receives its own copy).
                let target = if n_clusters == 2 {
                    crate::addr::AddrSet::unicast(topo.cluster_addr(1, DEST_OFFSET))
                } else {
                    topo.cluster_span(n_clusters, DEST_OFFSET)?
                };
                sys.cluster_transfer(
                    0,
                    TransferDescriptor {
                        target,
                        bytes: bytes_per_dest,
                        tag: next_tag,
                        available_at: 0,
                    },
                );
                expected_tags.push((0, next_tag));
                next_tag += 1;
            }
        }
        MicrobenchMode::SwMcast => {
            // Phase 1: the source covers every other group's leader, then
            // its own group mates; leaders forward within their groups.
            let cpg = topo.clusters_per_group;
            let groups_involved = n_clusters.div_ceil(cpg);
            for g in 1..groups_involved {
                let leader = g * cpg;
                sys.cluster_transfer(
                    0,
                    TransferDescriptor {
                        target: crate::addr::AddrSet::unicast(
                            topo.cluster_addr(leader, DEST_OFFSET),
                        ),
                        bytes: bytes_per_dest,
                        tag: next_tag,
                        available_at: 0,
                    },
                );
                expected_tags.push((0, next_tag));
                pending_leaders.push((leader, next_tag));
                next_tag += 1;
            }
            for dest in 1..cpg.min(n_clusters) {
                sys.cluster_transfer(
                    0,
                    TransferDescriptor {
                        target: crate::addr::AddrSet::unicast(
                            topo.cluster_addr(dest, DEST_OFFSET),
                        ),
                        bytes: bytes_per_dest,
                        tag: next_tag,
                        available_at: 0,
                    },
                );
                expected_tags.push((0, next_tag));
                next_tag += 1;
            }
        }
    }

    loop {
        sys.step(trace);
        let now = sys.cycle;

        // Trigger leader forwards once their copy has arrived (observed via
        // the source's completion of that transfer, then a local poll).
        pending_leaders.retain(|(leader, tag)| {
            let done = sys
                .cluster_agent_ref(0)
                .completion_of(*tag)
                .map(|c| c.cycle);
            match done {
                Some(arrival) => {
                    let cpg = topo.clusters_per_group;
                    for local in 1..cpg {
                        let dest = leader + local;
                        if dest >= n_clusters {
                            break;
                        }
                        sys.cluster_transfer(
                            *leader,
                            TransferDescriptor {
                                target: crate::addr::AddrSet::unicast(
                                    topo.cluster_addr(dest, DEST_OFFSET),
                                ),
                                bytes: bytes_per_dest,
                                tag: next_tag,
                                available_at: arrival + detect,
                            },
                        );
                        expected_tags.push((*leader, next_tag));
                        next_tag += 1;
                    }
                    false
                }
                None => true,
            }
        });

        let all_done = pending_leaders.is_empty()
            && expected_tags
                .iter()
                .all(|(agent, tag)| sys.cluster_agent_ref(*agent).completion_of(*tag).is_some());
        if all_done && sys.quiesced() {
            break;
        }
        if now > cap {
            return Err(ConfigError::BadParameter(format!(
                "microbenchmark did not finish within {cap} cycles"
            )));
        }
    }

    let last = expected_tags
        .iter()
        .map(|(agent, tag)| sys.cluster_agent_ref(*agent).completion_of(*tag).unwrap().cycle)
        .max()
        .unwrap_or(0);

    Ok(TrafficReport {
        cycles: if expected_tags.is_empty() { 0 } else { last + poll },
        llc_read_bytes: sys.llc_read_bytes(),
        llc_write_bytes: sys.llc_write_bytes(),
        per_link_beats: sys.pool.w_traffic(),
        flops: 0,
        delivered: (0..topo.num_clusters())
            .map(|c| (c, sys.cluster_sink(c).bytes_received))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xbar::NullTrace;

    fn topo() -> Topology {
        Topology::default()
    }

    #[test]
    fn destinations_receive_identical_bytes_in_every_mode() {
        let t = topo();
        let bytes = 4096u64;
        let n = 8;
        for mode in [
            MicrobenchMode::Unicast,
            MicrobenchMode::SwMcast,
            MicrobenchMode::HwMcast,
        ] {
            let r = run_microbenchmark(&t, mode, n, bytes, &mut NullTrace).unwrap();
            for dest in 1..n {
                assert_eq!(
                    r.delivered_to(dest),
                    bytes,
                    "{mode:?} shorted cluster {dest}"
                );
            }
            for dest in n..t.num_clusters() {
                assert_eq!(r.delivered_to(dest), 0, "{mode:?} leaked to {dest}");
            }
        }
    }

    #[test]
    fn modes_order_as_expected_at_32_clusters() {
        let t = topo();
        let bytes = 8192u64;
        let uni =
            run_microbenchmark(&t, MicrobenchMode::Unicast, 32, bytes, &mut NullTrace).unwrap();
        let sw =
            run_microbenchmark(&t, MicrobenchMode::SwMcast, 32, bytes, &mut NullTrace).unwrap();
        let hw =
            run_microbenchmark(&t, MicrobenchMode::HwMcast, 32, bytes, &mut NullTrace).unwrap();
        assert!(hw.cycles <= sw.cycles, "hw {} > sw {}", hw.cycles, sw.cycles);
        assert!(sw.cycles <= uni.cycles, "sw {} > uni {}", sw.cycles, uni.cycles);
    }

    #[test]
    fn single_cluster_is_a_no_op_and_two_clusters_degenerate_to_unicast() {
        let t = topo();
        let uni1 =
            run_microbenchmark(&t, MicrobenchMode::Unicast, 1, 4096, &mut NullTrace).unwrap();
        let hw1 =
            run_microbenchmark(&t, MicrobenchMode::HwMcast, 1, 4096, &mut NullTrace).unwrap();
        assert_eq!(uni1.cycles, hw1.cycles);
        assert_eq!(uni1.cycles, 0);

        let uni2 =
            run_microbenchmark(&t, MicrobenchMode::Unicast, 2, 4096, &mut NullTrace).unwrap();
        let hw2 =
            run_microbenchmark(&t, MicrobenchMode::HwMcast, 2, 4096, &mut NullTrace).unwrap();
        assert_eq!(uni2.cycles, hw2.cycles);
        assert!(uni2.cycles > 0);
    }

    #[test]
    fn sw_mode_needs_more_than_one_group() {
        let t = topo();
        assert!(run_microbenchmark(&t, MicrobenchMode::SwMcast, 4, 4096, &mut NullTrace).is_err());
        assert!(run_microbenchmark(&t, MicrobenchMode::SwMcast, 8, 4096, &mut NullTrace).is_ok());
    }
}
