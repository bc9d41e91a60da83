//! Online invariant checkers over simulation traces.
//!
//! One rule engine serves both paths: during simulation it is attached as
//! the trace consumer for fail-fast randomized testing, offline it replays
//! a trace file. It checks, per crossbar: per-slave W order against request
//! acceptance order, conservation (one response per accepted request, one
//! acceptance and a full burst per addressed slave), atomic multicast
//! acquisition, and a starvation watchdog.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::addr::PortSet;
use crate::protocol::{Channel, TraceParseError, TraceRecord};
use crate::sim::Cycle;
use crate::xbar::TraceConsumer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    OrderViolation,
    ConservationViolation,
    AcquisitionViolation,
    StarvationViolation,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub cycle: Cycle,
    pub uid: u64,
    pub narrative: String,
}

impl Violation {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("violation serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckConfig {
    /// Fixed starvation bound in cycles; otherwise ten times the analytic
    /// worst-case service time of the transaction at acceptance.
    pub starvation_bound: Option<Cycle>,
}

#[derive(Debug)]
struct TxnState {
    awm_cycle: Cycle,
    beats: u32,
    dests: PortSet,
    aws_seen: BTreeMap<usize, Cycle>,
    w_counts: BTreeMap<usize, (u32, u32)>,
    bj: Option<Cycle>,
    deadline: Cycle,
    starved_flagged: bool,
}

#[derive(Debug, Default)]
struct SlaveState {
    grant_holder: Option<(usize, u64)>,
    order_queue: VecDeque<(u64, u32)>,
    current: Option<(u64, u32)>,
}

#[derive(Debug, Default)]
struct NodeState {
    txns: BTreeMap<u64, TxnState>,
    slaves: BTreeMap<usize, SlaveState>,
}

/// Incremental checker; feed records in cycle order, then call `finish`.
#[derive(Debug)]
pub struct TraceChecker {
    cfg: CheckConfig,
    nodes: BTreeMap<String, NodeState>,
    violations: Vec<Violation>,
    last_cycle: Cycle,
    inflight_beats: u64,
    finished: bool,
}

const SERVICE_FLOOR: u64 = 64;

impl TraceChecker {
    pub fn new(cfg: CheckConfig) -> Self {
        TraceChecker {
            cfg,
            nodes: BTreeMap::new(),
            violations: Vec::new(),
            last_cycle: 0,
            inflight_beats: 0,
            finished: false,
        }
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    fn flag(&mut self, kind: ViolationKind, cycle: Cycle, uid: u64, narrative: String) {
        self.violations.push(Violation {
            kind,
            cycle,
            uid,
            narrative,
        });
    }

    pub fn feed(&mut self, rec: &TraceRecord) {
        self.last_cycle = self.last_cycle.max(rec.cycle);
        match rec.channel {
            Channel::Awm => self.on_awm(rec),
            Channel::Aws => self.on_aws(rec),
            Channel::Gnt => self.on_gnt(rec),
            Channel::Cmt => self.on_cmt(rec),
            Channel::W => self.on_w(rec),
            Channel::B => {}
            Channel::Bj => self.on_bj(rec),
        }
        self.check_starvation(rec.cycle);
    }

    fn on_awm(&mut self, rec: &TraceRecord) {
        let replicated = rec.beats as u64 * rec.dests.len() as u64;
        let bound = self.cfg.starvation_bound.unwrap_or_else(|| {
            10 * (SERVICE_FLOOR + 2 * (self.inflight_beats + replicated))
        });
        self.inflight_beats += replicated;
        let node = self.nodes.entry(rec.node.clone()).or_default();
        let prev = node.txns.insert(
            rec.uid,
            TxnState {
                awm_cycle: rec.cycle,
                beats: rec.beats,
                dests: rec.dests,
                aws_seen: BTreeMap::new(),
                w_counts: BTreeMap::new(),
                bj: None,
                deadline: rec.cycle + bound,
                starved_flagged: false,
            },
        );
        if prev.is_some() {
            self.flag(
                ViolationKind::ConservationViolation,
                rec.cycle,
                rec.uid,
                format!("uid {} accepted twice at {}", rec.uid, rec.node),
            );
        }
    }

    fn on_aws(&mut self, rec: &TraceRecord) {
        let slave = rec.slave.expect("AWS carries a slave");
        let mut flags: Vec<(ViolationKind, String)> = Vec::new();
        {
            let node = self.nodes.entry(rec.node.clone()).or_default();
            let sl = node.slaves.entry(slave).or_default();
            // Another master's held acquisition must exclude this acceptance.
            if let Some((holder, held_uid)) = sl.grant_holder {
                if held_uid != rec.uid {
                    flags.push((
                        ViolationKind::AcquisitionViolation,
                        format!(
                            "slave {} of {} accepted master {} uid {} while master {} held the grant for uid {}",
                            slave, rec.node, rec.master, rec.uid, holder, held_uid
                        ),
                    ));
                }
            }
            sl.order_queue.push_back((rec.uid, rec.beats));

            match node.txns.get_mut(&rec.uid) {
                Some(txn) => {
                    if rec.mcast {
                        if let Some((_, first_cycle)) = txn.aws_seen.iter().next() {
                            if *first_cycle != rec.cycle {
                                flags.push((
                                    ViolationKind::AcquisitionViolation,
                                    format!(
                                        "multicast uid {} released non-atomically at {}",
                                        rec.uid, rec.node
                                    ),
                                ));
                            }
                        }
                    }
                    if txn.aws_seen.insert(slave, rec.cycle).is_some() {
                        flags.push((
                            ViolationKind::ConservationViolation,
                            format!("slave {slave} accepted uid {} twice", rec.uid),
                        ));
                    }
                }
                None => flags.push((
                    ViolationKind::ConservationViolation,
                    format!("slave acceptance for unknown uid {}", rec.uid),
                )),
            }
        }
        for (kind, narrative) in flags {
            self.flag(kind, rec.cycle, rec.uid, narrative);
        }
    }

    fn on_gnt(&mut self, rec: &TraceRecord) {
        let slave = rec.slave.expect("GNT carries a slave");
        let node = self.nodes.entry(rec.node.clone()).or_default();
        node.slaves.entry(slave).or_default().grant_holder = Some((rec.master, rec.uid));
    }

    fn on_cmt(&mut self, rec: &TraceRecord) {
        let node = self.nodes.entry(rec.node.clone()).or_default();
        for s in rec.dests.iter() {
            if let Some(sl) = node.slaves.get_mut(&s) {
                if sl.grant_holder.map(|(_, u)| u) == Some(rec.uid) {
                    sl.grant_holder = None;
                }
            }
        }
    }

    fn on_w(&mut self, rec: &TraceRecord) {
        let slave = rec.slave.expect("W carries a slave");
        let node = self.nodes.entry(rec.node.clone()).or_default();
        let sl = node.slaves.entry(slave).or_default();
        if sl.current.is_none() {
            match sl.order_queue.pop_front() {
                Some((uid, beats)) => sl.current = Some((uid, beats)),
                None => {
                    self.flag(
                        ViolationKind::OrderViolation,
                        rec.cycle,
                        rec.uid,
                        format!("W beat at slave {slave} of {} before any acceptance", rec.node),
                    );
                    return;
                }
            }
        }
        let (cur_uid, left) = self.nodes.get_mut(&rec.node).unwrap().slaves.get_mut(&slave).unwrap().current.unwrap();
        if rec.uid != cur_uid {
            self.flag(
                ViolationKind::OrderViolation,
                rec.cycle,
                rec.uid,
                format!(
                    "W beat of uid {} interleaved into burst of uid {} at slave {} of {}",
                    rec.uid, cur_uid, slave, rec.node
                ),
            );
            return;
        }
        let left = left - 1;
        let expect_last = left == 0;
        if rec.last != expect_last {
            self.flag(
                ViolationKind::OrderViolation,
                rec.cycle,
                rec.uid,
                format!(
                    "last flag {} with {} beats outstanding at slave {} of {}",
                    rec.last, left, slave, rec.node
                ),
            );
        }
        {
            let node = self.nodes.get_mut(&rec.node).unwrap();
            let sl = node.slaves.get_mut(&slave).unwrap();
            sl.current = if left == 0 { None } else { Some((cur_uid, left)) };
            if let Some(txn) = node.txns.get_mut(&rec.uid) {
                let e = txn.w_counts.entry(slave).or_insert((0, 0));
                e.0 += 1;
                if rec.last {
                    e.1 += 1;
                }
            }
        }
    }

    fn on_bj(&mut self, rec: &TraceRecord) {
        let node = self.nodes.entry(rec.node.clone()).or_default();
        match node.txns.get_mut(&rec.uid) {
            Some(txn) => {
                if txn.bj.is_some() {
                    self.flag(
                        ViolationKind::ConservationViolation,
                        rec.cycle,
                        rec.uid,
                        format!("uid {} answered twice at {}", rec.uid, rec.node),
                    );
                } else {
                    txn.bj = Some(rec.cycle);
                    let replicated = txn.beats as u64 * txn.dests.len() as u64;
                    self.inflight_beats = self.inflight_beats.saturating_sub(replicated);
                }
            }
            None => self.flag(
                ViolationKind::ConservationViolation,
                rec.cycle,
                rec.uid,
                format!("response for unknown uid {} at {}", rec.uid, rec.node),
            ),
        }
    }

    fn check_starvation(&mut self, now: Cycle) {
        let mut flagged = Vec::new();
        for (node, ns) in &mut self.nodes {
            for (uid, txn) in &mut ns.txns {
                if txn.bj.is_none() && !txn.starved_flagged && now > txn.deadline {
                    txn.starved_flagged = true;
                    flagged.push((node.clone(), *uid, txn.awm_cycle, txn.deadline));
                }
            }
        }
        for (node, uid, accepted, deadline) in flagged {
            self.flag(
                ViolationKind::StarvationViolation,
                now,
                uid,
                format!(
                    "uid {uid} at {node} accepted at {accepted} still in flight past its service bound ({deadline})"
                ),
            );
        }
    }

    /// End-of-trace checks: every accepted request answered, every
    /// addressed slave saw one acceptance and a complete burst.
    pub fn finish(&mut self) -> &[Violation] {
        if self.finished {
            return &self.violations;
        }
        self.finished = true;
        let mut flags = Vec::new();
        for (node, ns) in &self.nodes {
            for (uid, txn) in &ns.txns {
                if txn.bj.is_none() {
                    flags.push((
                        ViolationKind::ConservationViolation,
                        txn.awm_cycle,
                        *uid,
                        format!("uid {uid} at {node} never answered"),
                    ));
                    continue;
                }
                if txn.aws_seen.len() != txn.dests.len()
                    || !txn.dests.iter().all(|s| txn.aws_seen.contains_key(&s))
                {
                    flags.push((
                        ViolationKind::ConservationViolation,
                        txn.awm_cycle,
                        *uid,
                        format!(
                            "uid {uid} at {node} addressed {:?} but slaves {:?} accepted",
                            txn.dests,
                            txn.aws_seen.keys().collect::<Vec<_>>()
                        ),
                    ));
                }
                for s in txn.dests.iter() {
                    let (count, lasts) = txn.w_counts.get(&s).copied().unwrap_or((0, 0));
                    if count != txn.beats || lasts != 1 {
                        flags.push((
                            ViolationKind::ConservationViolation,
                            txn.awm_cycle,
                            *uid,
                            format!(
                                "uid {uid} at {node}: slave {s} received {count}/{} beats, {lasts} last flags",
                                txn.beats
                            ),
                        ));
                    }
                }
            }
        }
        for (kind, cycle, uid, narrative) in flags {
            self.flag(kind, cycle, uid, narrative);
        }
        &self.violations
    }
}

impl TraceConsumer for TraceChecker {
    fn enabled(&self) -> bool {
        true
    }
    fn push(&mut self, rec: TraceRecord) {
        self.feed(&rec);
    }
}

/// Offline check of a textual trace.
pub fn check_trace(text: &str, cfg: &CheckConfig) -> Result<Vec<Violation>, TraceParseError> {
    let mut checker = TraceChecker::new(cfg.clone());
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = TraceRecord::parse(line)?;
        checker.feed(&rec);
    }
    checker.finish();
    Ok(checker.violations)
}

/// Check of an in-memory record stream.
pub fn check_records(records: &[TraceRecord], cfg: &CheckConfig) -> Vec<Violation> {
    let mut checker = TraceChecker::new(cfg.clone());
    for rec in records {
        checker.feed(rec);
    }
    checker.finish();
    checker.violations
}
