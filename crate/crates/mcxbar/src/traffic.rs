//! Randomized traffic scenarios for deadlock and invariant testing.
//!
//! Every scenario runs with the trace checker attached online and a hard
//! cycle cap; the outcome reports whether the system quiesced and which
//! violations, if any, the monitors raised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::addr::{AddrSet, AddressRule};
use crate::dma::{DmaEngine, TransferDescriptor};
use crate::monitors::{CheckConfig, TraceChecker, Violation};
use crate::network::{build_network, Sink, SinkKind};
use crate::sim::Cycle;
use crate::topology::Topology;
use crate::xbar::{LinkPool, Xbar, XbarConfig};

#[derive(Debug)]
pub struct FuzzOutcome {
    pub quiesced: bool,
    pub cycles: Cycle,
    pub transfers: usize,
    pub violations: Vec<Violation>,
}

impl FuzzOutcome {
    pub fn clean(&self) -> bool {
        self.quiesced && self.violations.is_empty()
    }
}

const REGION: u64 = 0x1000;

/// A standalone crossbar with one traffic driver per master and one memory
/// per slave.
struct XbarRig {
    pool: LinkPool,
    xbar: Xbar,
    agents: Vec<DmaEngine>,
    sinks: Vec<Sink>,
    next_uid: u64,
    cycle: Cycle,
}

impl XbarRig {
    fn new(nm: usize, ns: usize, max_window: usize, rng: &mut ChaCha8Rng) -> XbarRig {
        let map: Vec<AddressRule> = (0..ns)
            .map(|s| AddressRule::new(s as u64 * REGION, (s as u64 + 1) * REGION, s, true))
            .collect();
        let mut pool = LinkPool::default();
        let mut cfg = XbarConfig::new("fuzz", nm, ns, map);
        cfg.max_mcast_outstanding = max_window;
        let xbar = Xbar::new(cfg, &mut pool);
        let agents = (0..nm)
            .map(|m| {
                DmaEngine::new(
                    &format!("drv{m}"),
                    xbar.master_port(m),
                    64,
                    4096,
                    rng.gen_range(0..8),
                    rng.gen_range(1..=8),
                    16,
                )
            })
            .collect();
        let sinks = (0..ns + 1)
            .map(|s| {
                let kind = if s == ns {
                    SinkKind::ErrorSlave
                } else {
                    SinkKind::ClusterL1(s)
                };
                Sink::new(kind, xbar.slave_port(s), rng.gen_range(1..=4))
            })
            .collect();
        XbarRig {
            pool,
            xbar,
            agents,
            sinks,
            next_uid: 0,
            cycle: 0,
        }
    }

    fn quiesced(&self) -> bool {
        self.agents.iter().all(|a| a.idle())
            && self.xbar.idle()
            && self.sinks.iter().all(|s| s.idle())
            && self.pool.all_empty()
    }

    fn run(&mut self, cap: Cycle, checker: &mut TraceChecker) -> (bool, Cycle) {
        while !self.quiesced() {
            if self.cycle > cap {
                return (false, self.cycle);
            }
            self.pool.begin_cycle();
            for a in &mut self.agents {
                a.step(self.cycle, &mut self.pool, &mut self.next_uid);
            }
            self.xbar.step(self.cycle, &mut self.pool, checker);
            for s in &mut self.sinks {
                s.step(self.cycle, &mut self.pool);
            }
            self.cycle += 1;
        }
        (true, self.cycle)
    }
}

/// A random aligned multicast span over slave regions; may deliberately
/// reach past the mapped slaves, exercising the decode-error route.
fn random_target(rng: &mut ChaCha8Rng, ns: usize) -> AddrSet {
    let offset = rng.gen_range(0..REGION / 64) * 64;
    if rng.gen_bool(0.35) {
        let max_log = (usize::BITS - ns.leading_zeros()) as u32;
        let k = rng.gen_range(1..=max_log);
        let span = 1usize << k;
        let align = rng.gen_range(0..ns.div_ceil(span).max(1)) * span;
        AddrSet::new(
            align as u64 * REGION + offset,
            (span as u64 - 1) * REGION,
        )
    } else if rng.gen_bool(0.05) {
        // Unmapped unicast.
        AddrSet::unicast((ns as u64 + 2 + rng.gen_range(0..4)) * REGION + offset)
    } else {
        AddrSet::unicast(rng.gen_range(0..ns) as u64 * REGION + offset)
    }
}

/// Mixed unicast/multicast traffic over a random crossbar of up to 16
/// masters and 16 slaves.
pub fn fuzz_single_xbar(seed: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nm = rng.gen_range(2..=16);
    let ns = rng.gen_range(2..=16);
    let window = rng.gen_range(1..=4);
    let mut rig = XbarRig::new(nm, ns, window, &mut rng);

    let mut transfers = 0;
    for m in 0..nm {
        let n_desc = rng.gen_range(1..=12);
        for i in 0..n_desc {
            rig.agents[m].enqueue(TransferDescriptor {
                target: random_target(&mut rng, ns),
                bytes: rng.gen_range(1..=64) * 64,
                tag: i as u64,
                available_at: rng.gen_range(0..400),
            });
            transfers += 1;
        }
    }

    let mut checker = TraceChecker::new(CheckConfig::default());
    let (quiesced, cycles) = rig.run(400_000, &mut checker);
    checker.finish();
    FuzzOutcome {
        quiesced,
        cycles,
        transfers,
        violations: checker.violations().to_vec(),
    }
}

/// The crossing-multicast scenario: two masters multicast to the same two
/// slaves with randomized arrival skew, burst lengths and background
/// unicasts, giving the slaves opposite natural acceptance orders.
pub fn fuzz_crossing_multicast(seed: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2E2E_2E2E);
    let nm = 2;
    let ns = 2;
    let mut rig = XbarRig::new(nm, ns, rng.gen_range(1..=4), &mut rng);

    let pair = AddrSet::new(0, REGION * 2 - 1);
    let skew = rng.gen_range(0..6);
    let beats0 = rng.gen_range(1..=32);
    let beats1 = rng.gen_range(1..=32);
    rig.agents[0].enqueue(TransferDescriptor {
        target: pair,
        bytes: beats0 * 64,
        tag: 0,
        available_at: 0,
    });
    rig.agents[1].enqueue(TransferDescriptor {
        target: pair,
        bytes: beats1 * 64,
        tag: 0,
        available_at: skew,
    });
    let mut transfers = 2;
    // Background unicasts keep the slaves busy in opposite orders.
    for m in 0..nm {
        for i in 0..rng.gen_range(0..4) {
            rig.agents[m].enqueue(TransferDescriptor {
                target: AddrSet::unicast(((m + i) % ns) as u64 * REGION),
                bytes: rng.gen_range(1..=8) * 64,
                tag: 1 + i as u64,
                available_at: rng.gen_range(0..40),
            });
            transfers += 1;
        }
    }

    let mut checker = TraceChecker::new(CheckConfig::default());
    let (quiesced, cycles) = rig.run(100_000, &mut checker);
    checker.finish();
    FuzzOutcome {
        quiesced,
        cycles,
        transfers,
        violations: checker.violations().to_vec(),
    }
}

/// Random cluster-to-cluster traffic over the full two-level hierarchy.
pub fn fuzz_hierarchy(seed: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xH1ER_u64_placeholder());
    let topo = Topology {
        num_groups: rng.gen_range(2..=4),
        clusters_per_group: [2usize, 4][rng.gen_range(0..2)],
        ..Topology::default()
    };
    let mut sys = build_network(&topo).expect("fuzz topology is valid");
    let n = topo.num_clusters();

    let mut transfers = 0;
    for c in 0..n {
        for i in 0..rng.gen_range(0..6) {
            let target = if rng.gen_bool(0.4) {
                let k = 1 << rng.gen_range(0..=n.trailing_zeros());
                let offset = rng.gen_range(0..64) * 64;
                topo.cluster_span(k as usize, offset).unwrap()
            } else {
                AddrSet::unicast(topo.cluster_addr(rng.gen_range(0..n), 0))
            };
            sys.cluster_transfer(
                c,
                TransferDescriptor {
                    target,
                    bytes: rng.gen_range(1..=32) * 64,
                    tag: i as u64,
                    available_at: rng.gen_range(0..300),
                },
            );
            transfers += 1;
        }
    }

    let mut checker = TraceChecker::new(CheckConfig::default());
    let mut quiesced = true;
    let cap = 400_000;
    while !sys.quiesced() {
        if sys.cycle > cap {
            quiesced = false;
            break;
        }
        sys.step(&mut checker);
    }
    checker.finish();
    FuzzOutcome {
        quiesced,
        cycles: sys.cycle,
        transfers,
        violations: checker.violations().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_random_scenarios_are_clean() {
        for seed in 0..10 {
            let out = fuzz_single_xbar(seed);
            assert!(
                out.clean(),
                "seed {seed}: quiesced={} violations={:?}",
                out.quiesced,
                out.violations
            );
        }
    }

    #[test]
    fn crossing_multicasts_never_deadlock() {
        for seed in 0..10 {
            let out = fuzz_crossing_multicast(seed);
            assert!(out.clean(), "seed {seed}: {out:?}");
        }
    }

    #[test]
    fn hierarchy_scenarios_are_clean() {
        for seed in 0..5 {
            let out = fuzz_hierarchy(seed);
            assert!(out.clean(), "seed {seed}: {out:?}");
        }
    }
}
