//! Builds and steps the full simulated system: a two-level crossbar tree
//! with cluster memories, DMA engines, a shared last-level memory and its
//! serving engine.
//!
//! Port conventions. Group crossbar `g`: masters `0..cpg` are the local
//! cluster DMAs, master `cpg` is the downlink from the top level; slaves
//! `0..cpg` are the local cluster memories, slave `cpg` is the uplink.
//! Top crossbar: masters `0..G` are the group uplinks, master `G` is the
//! memory-side engine; slaves `0..G` are the group downlinks, slave `G` is
//! the memory. Each crossbar also has its built-in decode-error slave.
//!
//! The downlink master suppresses the uplink port and each top-level master
//! suppresses its own group's downlink, so a multicast never re-enters the
//! subtree it came from and no destination is served twice.

use crate::dma::{DmaEngine, TransferDescriptor};
use crate::protocol::RespCode;
use crate::sim::Cycle;
use crate::topology::{ConfigError, Topology};
use crate::xbar::{
    BItem, LinkPool, SlavePort, TraceConsumer, Xbar, XbarConfig,
};

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkKind {
    ClusterL1(usize),
    Llc,
    ErrorSlave,
}

/// Memory endpoint: accepts one request and one beat per cycle, answers
/// every completed burst with a single response after its accept latency.
#[derive(Debug)]
pub struct Sink {
    pub kind: SinkKind,
    port: SlavePort,
    accept_latency: Cycle,
    resp: RespCode,
    bursts: VecDeque<(u64, crate::protocol::TxnId, u32)>,
    pending_b: VecDeque<(Cycle, BItem)>,
    pub bytes_received: u64,
}

impl Sink {
    pub fn new(kind: SinkKind, port: SlavePort, accept_latency: Cycle) -> Self {
        let resp = match kind {
            SinkKind::ErrorSlave => RespCode::DecErr,
            _ => RespCode::Okay,
        };
        Sink {
            kind,
            port,
            accept_latency,
            resp,
            bursts: VecDeque::new(),
            pending_b: VecDeque::new(),
            bytes_received: 0,
        }
    }

    pub fn idle(&self) -> bool {
        self.bursts.is_empty() && self.pending_b.is_empty()
    }

    fn step(&mut self, now: Cycle, pool: &mut LinkPool) {
        if let Some(aw) = pool.aw[self.port.aw_out].pop_ready(now) {
            self.bursts.push_back((aw.uid, aw.id, aw.beats));
        }
        if let Some(front) = self.bursts.front() {
            // Beats arrive in request-acceptance order; serve the front.
            let expect_uid = front.0;
            if let Some(beat) = pool.w[self.port.w_out].peek_ready(now) {
                debug_assert_eq!(beat.uid, expect_uid, "beat order at sink");
                if beat.uid == expect_uid {
                    let beat = pool.w[self.port.w_out].pop_ready(now).unwrap();
                    self.bytes_received += beat.bytes as u64;
                    let (uid, id, beats_left) = self.bursts.front_mut().map(|b| {
                        b.2 -= 1;
                        *b
                    }).unwrap();
                    if beats_left == 0 {
                        debug_assert!(beat.last);
                        self.bursts.pop_front();
                        self.pending_b.push_back((
                            now + self.accept_latency,
                            BItem {
                                uid,
                                id,
                                resp: self.resp,
                            },
                        ));
                    }
                }
            }
        }
        if let Some((ready_at, _)) = self.pending_b.front() {
            if *ready_at <= now && pool.b[self.port.b_in].can_accept(now, false) {
                let (_, b) = self.pending_b.pop_front().unwrap();
                pool.b[self.port.b_in].push(now, false, b);
            }
        }
    }
}

/// The simulated system.
pub struct System {
    pub topo: Topology,
    pub pool: LinkPool,
    pub xbars: Vec<Xbar>,
    pub sinks: Vec<Sink>,
    pub agents: Vec<DmaEngine>,
    pub cycle: Cycle,
    next_uid: u64,
    /// Sink index per cluster, then the memory sink.
    cluster_sinks: Vec<usize>,
    llc_sink: usize,
    /// Agent index per cluster; the memory-side engine is last.
    cluster_agents: Vec<usize>,
    llc_agent: usize,
}

/// Builds the hierarchical system for a topology.
///
/// One top-level crossbar connects the groups and the shared memory; one
/// group-level crossbar per group connects its clusters. All cluster and
/// group regions are multicast-targetable.
pub fn build_network(topo: &Topology) -> Result<System, ConfigError> {
    topo.validate()?;
    let mut pool = LinkPool::default();
    let cpg = topo.clusters_per_group;
    let groups = topo.num_groups;

    // Group crossbars.
    let mut xbars: Vec<Xbar> = (0..groups)
        .map(|g| {
            let mut cfg = XbarConfig::new(
                &format!("g{g}"),
                cpg + 1,
                cpg + 1,
                topo.group_map(g),
            );
            cfg.max_mcast_outstanding = topo.max_mcast_outstanding;
            cfg.latency = topo.latency;
            cfg.multicast_enabled = topo.multicast_enabled;
            // The downlink must not route back up.
            cfg.suppressed[cpg].insert(cpg);
            Xbar::new(cfg, &mut pool)
        })
        .collect();

    // Top crossbar; master g must not route back down into group g.
    let mut top_cfg = XbarConfig::new("top", groups + 1, groups + 1, topo.top_map());
    top_cfg.max_mcast_outstanding = topo.max_mcast_outstanding;
    top_cfg.latency = topo.latency;
    top_cfg.multicast_enabled = topo.multicast_enabled;
    for g in 0..groups {
        top_cfg.suppressed[g].insert(g);
    }
    let mut top = Xbar::new(top_cfg, &mut pool);

    // Boundary W stages are strict: the multicast path has no spill
    // buffering across hierarchy levels.
    for g in 0..groups {
        xbars[g].make_boundary(cpg, &mut pool);
        top.make_boundary(g, &mut pool);
    }

    // Wire uplinks and downlinks by sharing stages.
    for g in 0..groups {
        let up = xbars[g].slave_port(cpg);
        top.wire_master(
            g,
            crate::xbar::MasterPort {
                aw_in: up.aw_out,
                w_in: up.w_out,
                b_out: up.b_in,
            },
        );
        let down = top.slave_port(g);
        xbars[g].wire_master(
            cpg,
            crate::xbar::MasterPort {
                aw_in: down.aw_out,
                w_in: down.w_out,
                b_out: down.b_in,
            },
        );
    }

    // Endpoints.
    let mut sinks = Vec::new();
    let mut cluster_sinks = Vec::new();
    for c in 0..topo.num_clusters() {
        let g = topo.group_of(c);
        let port = xbars[g].slave_port(c % cpg);
        sinks.push(Sink::new(
            SinkKind::ClusterL1(c),
            port,
            topo.cluster_accept_latency,
        ));
        cluster_sinks.push(sinks.len() - 1);
    }
    sinks.push(Sink::new(
        SinkKind::Llc,
        top.slave_port(groups),
        topo.llc_latency,
    ));
    let llc_sink = sinks.len() - 1;
    for g in 0..groups {
        sinks.push(Sink::new(
            SinkKind::ErrorSlave,
            xbars[g].slave_port(cpg + 1),
            1,
        ));
    }
    sinks.push(Sink::new(
        SinkKind::ErrorSlave,
        top.slave_port(groups + 1),
        1,
    ));

    // DMA engines.
    let mut agents = Vec::new();
    let mut cluster_agents = Vec::new();
    for c in 0..topo.num_clusters() {
        let g = topo.group_of(c);
        let port = xbars[g].master_port(c % cpg);
        agents.push(DmaEngine::new(
            &format!("dma{c}"),
            port,
            topo.beat_bytes,
            topo.dma_max_burst,
            topo.sw_overhead / 2,
            topo.dma_max_outstanding,
            topo.id_count,
        ));
        cluster_agents.push(agents.len() - 1);
    }
    // The memory-side engine serves pull requests one at a time; every
    // transfer pays the memory access latency before data flows.
    let mut llc_engine = DmaEngine::new(
        "llc",
        top.master_port(groups),
        topo.beat_bytes,
        topo.dma_max_burst,
        topo.llc_latency,
        topo.dma_max_outstanding,
        topo.id_count,
    );
    llc_engine.serial_descriptors = true;
    agents.push(llc_engine);
    let llc_agent = agents.len() - 1;

    xbars.push(top);
    Ok(System {
        topo: topo.clone(),
        pool,
        xbars,
        sinks,
        agents,
        cycle: 0,
        next_uid: 0,
        cluster_sinks,
        llc_sink,
        cluster_agents,
        llc_agent,
    })
}

impl System {
    /// One simulation cycle for the whole system.
    pub fn step(&mut self, trace: &mut dyn TraceConsumer) {
        let now = self.cycle;
        self.pool.begin_cycle();
        for a in &mut self.agents {
            a.step(now, &mut self.pool, &mut self.next_uid);
        }
        for x in &mut self.xbars {
            x.step(now, &mut self.pool, trace);
        }
        for s in &mut self.sinks {
            s.step(now, &mut self.pool);
        }
        self.cycle += 1;
    }

    pub fn quiesced(&self) -> bool {
        self.agents.iter().all(|a| a.idle())
            && self.xbars.iter().all(|x| x.idle())
            && self.sinks.iter().all(|s| s.idle())
            && self.pool.all_empty()
    }

    /// Steps until quiescence; errors if `max_cycles` elapse first.
    pub fn run_to_quiescence(
        &mut self,
        max_cycles: Cycle,
        trace: &mut dyn TraceConsumer,
    ) -> Result<Cycle, ConfigError> {
        let start = self.cycle;
        while !self.quiesced() {
            if self.cycle - start > max_cycles {
                return Err(ConfigError::BadParameter(format!(
                    "no quiescence after {max_cycles} cycles"
                )));
            }
            self.step(trace);
        }
        Ok(self.cycle)
    }

    pub fn cluster_agent(&mut self, c: usize) -> &mut DmaEngine {
        &mut self.agents[self.cluster_agents[c]]
    }

    pub fn cluster_agent_ref(&self, c: usize) -> &DmaEngine {
        &self.agents[self.cluster_agents[c]]
    }

    pub fn llc_agent(&mut self) -> &mut DmaEngine {
        &mut self.agents[self.llc_agent]
    }

    pub fn llc_agent_ref(&self) -> &DmaEngine {
        &self.agents[self.llc_agent]
    }

    pub fn cluster_sink(&self, c: usize) -> &Sink {
        &self.sinks[self.cluster_sinks[c]]
    }

    pub fn llc_sink(&self) -> &Sink {
        &self.sinks[self.llc_sink]
    }

    /// Bytes read out of the shared memory (streamed by its engine).
    pub fn llc_read_bytes(&self) -> u64 {
        self.llc_agent_ref().bytes_streamed
    }

    /// Bytes written into the shared memory.
    pub fn llc_write_bytes(&self) -> u64 {
        self.llc_sink().bytes_received
    }

    /// Convenience: enqueue a cluster-issued transfer.
    pub fn cluster_transfer(&mut self, c: usize, desc: TransferDescriptor) {
        self.cluster_agent(c).enqueue(desc);
    }

    /// Convenience: enqueue a memory-side push (a pull served by the
    /// memory engine); `available_at` should include the request travel.
    pub fn llc_push(&mut self, desc: TransferDescriptor) {
        self.llc_agent().enqueue(desc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::AddrSet;
    use crate::xbar::NullTrace;

    fn small_system() -> System {
        build_network(&Topology::default()).unwrap()
    }

    #[test]
    fn default_build_shape() {
        let sys = small_system();
        // 8 group crossbars + top; 32 cluster sinks + memory + 9 error
        // sinks; 32 cluster engines + memory engine.
        assert_eq!(sys.xbars.len(), 9);
        assert_eq!(sys.sinks.len(), 32 + 1 + 9);
        assert_eq!(sys.agents.len(), 33);
    }

    #[test]
    fn degenerate_single_group() {
        let topo = Topology {
            num_groups: 1,
            ..Topology::default()
        };
        let mut sys = build_network(&topo).unwrap();
        sys.cluster_transfer(
            0,
            TransferDescriptor {
                target: AddrSet::unicast(topo.cluster_addr(3, 0)),
                bytes: 128,
                tag: 1,
                available_at: 0,
            },
        );
        sys.run_to_quiescence(10_000, &mut NullTrace).unwrap();
        assert_eq!(sys.cluster_sink(3).bytes_received, 128);
    }

    #[test]
    fn unicast_same_group_completes() {
        let mut sys = small_system();
        sys.cluster_transfer(
            0,
            TransferDescriptor {
                target: AddrSet::unicast(sys.topo.cluster_addr(1, 0x100)),
                bytes: 256,
                tag: 7,
                available_at: 0,
            },
        );
        sys.run_to_quiescence(10_000, &mut NullTrace).unwrap();
        assert_eq!(sys.cluster_sink(1).bytes_received, 256);
        let done = sys.cluster_agent_ref(0).completion_of(7).unwrap();
        assert_eq!(done.resp, RespCode::Okay);
    }

    #[test]
    fn unicast_cross_group_completes() {
        let mut sys = small_system();
        sys.cluster_transfer(
            0,
            TransferDescriptor {
                target: AddrSet::unicast(sys.topo.cluster_addr(5, 0)),
                bytes: 1024,
                tag: 9,
                available_at: 0,
            },
        );
        sys.run_to_quiescence(10_000, &mut NullTrace).unwrap();
        assert_eq!(sys.cluster_sink(5).bytes_received, 1024);
        assert_eq!(sys.cluster_sink(4).bytes_received, 0);
    }

    #[test]
    fn multicast_reaches_every_cluster_once() {
        let mut sys = small_system();
        let target = sys.topo.cluster_span(32, 0).unwrap();
        sys.cluster_transfer(
            0,
            TransferDescriptor {
                target,
                bytes: 512,
                tag: 3,
                available_at: 0,
            },
        );
        sys.run_to_quiescence(20_000, &mut NullTrace).unwrap();
        for c in 0..32 {
            assert_eq!(sys.cluster_sink(c).bytes_received, 512, "cluster {c}");
        }
        let done = sys.cluster_agent_ref(0).completion_of(3).unwrap();
        assert_eq!(done.resp, RespCode::Okay);
    }

    #[test]
    fn unicast_to_unmapped_gets_decode_error() {
        let mut sys = small_system();
        sys.cluster_transfer(
            0,
            TransferDescriptor {
                target: AddrSet::unicast(0xF000_0000),
                bytes: 64,
                tag: 4,
                available_at: 0,
            },
        );
        sys.run_to_quiescence(10_000, &mut NullTrace).unwrap();
        let done = sys.cluster_agent_ref(0).completion_of(4).unwrap();
        // The engine folds any error response into SLVERR per the join
        // rule; the raw route answered DECERR.
        assert_eq!(done.resp, RespCode::SlvErr);
    }

    #[test]
    fn llc_write_and_read_paths() {
        let mut sys = small_system();
        let llc_base = sys.topo.llc_base;
        sys.cluster_transfer(
            2,
            TransferDescriptor {
                target: AddrSet::unicast(llc_base + 0x40),
                bytes: 2048,
                tag: 11,
                available_at: 0,
            },
        );
        sys.llc_push(TransferDescriptor {
            target: AddrSet::unicast(sys.topo.cluster_addr(17, 0)),
            bytes: 4096,
            tag: 12,
            available_at: 0,
        });
        sys.run_to_quiescence(20_000, &mut NullTrace).unwrap();
        assert_eq!(sys.llc_write_bytes(), 2048);
        assert_eq!(sys.llc_read_bytes(), 4096);
        assert_eq!(sys.cluster_sink(17).bytes_received, 4096);
    }
}
