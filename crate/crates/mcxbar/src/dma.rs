//! DMA engine model: descriptor queue, burst splitting, outstanding-burst
//! budget, and write-burst issue over a crossbar master port.
//!
//! Descriptor programming is serial at the engine (one descriptor every
//! `issue_overhead` cycles) while issued bursts pipeline up to the
//! outstanding budget, so back-to-back transfers stream without gaps once
//! launched. A transfer completes when the responses of all its bursts have
//! returned.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::addr::{AddrSet, AddressRule};
use crate::protocol::{validate_multicast, AwRequest, McastViolation, RespCode, TxnId};
use crate::sim::Cycle;
use crate::xbar::{AwItem, BItem, LinkPool, MasterPort, WItem};

#[derive(Debug, Error, PartialEq)]
pub enum DmaError {
    #[error("zero-byte transfer")]
    ZeroBytes,
    #[error("illegal transfer target: {0}")]
    IllegalTarget(McastViolation),
}

/// One queued transfer.
#[derive(Debug, Clone)]
pub struct TransferDescriptor {
    pub target: AddrSet,
    pub bytes: u64,
    /// Caller-chosen identity reported back on completion.
    pub tag: u64,
    /// Earliest cycle the engine may start programming it.
    pub available_at: Cycle,
}

/// Checks a descriptor before it is handed to an engine.
pub fn validate_descriptor(
    desc: &TransferDescriptor,
    address_map: &[AddressRule],
) -> Result<(), DmaError> {
    if desc.bytes == 0 {
        return Err(DmaError::ZeroBytes);
    }
    let probe = AwRequest {
        id: 0,
        target: desc.target,
        burst_beats: 1,
        beat_bytes: 64,
        exclusive: false,
        master_index: 0,
    };
    validate_multicast(&probe, address_map).map_err(DmaError::IllegalTarget)
}

/// Splits a byte count into burst beat counts.
pub fn split_bursts(bytes: u64, max_burst_bytes: u64, beat_bytes: u32) -> Vec<u32> {
    debug_assert!(bytes > 0);
    let mut bursts = Vec::new();
    let mut left = bytes;
    while left > 0 {
        let chunk = left.min(max_burst_bytes);
        bursts.push(chunk.div_ceil(beat_bytes as u64) as u32);
        left -= chunk;
    }
    bursts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub cycle: Cycle,
    pub tag: u64,
    pub resp: RespCode,
}

#[derive(Debug)]
struct ActiveTransfer {
    tag: u64,
    target: AddrSet,
    bursts: VecDeque<u32>,
    bytes: u64,
}

#[derive(Debug)]
struct Progress {
    pending_bursts: usize,
    issued_all: bool,
    worst: RespCode,
}

#[derive(Debug)]
pub struct DmaEngine {
    pub name: String,
    port: MasterPort,
    pub beat_bytes: u32,
    pub max_burst_bytes: u64,
    pub issue_overhead: Cycle,
    pub max_outstanding: usize,
    /// Serve one descriptor at a time: the next transfer's handling starts
    /// only once the current one has fully streamed. Models a memory port
    /// that pays its access latency per transfer.
    pub serial_descriptors: bool,
    id_count: usize,
    queue: VecDeque<TransferDescriptor>,
    programming: Option<(Cycle, ActiveTransfer)>,
    launched: VecDeque<ActiveTransfer>,
    w_stream: VecDeque<(u64, u32, u64)>,
    outstanding: usize,
    burst_tags: BTreeMap<u64, u64>,
    progress: BTreeMap<u64, Progress>,
    id_seq: u64,
    pub completions: Vec<Completion>,
    /// Total bytes streamed out of this port.
    pub bytes_streamed: u64,
}

impl DmaEngine {
    pub fn new(
        name: &str,
        port: MasterPort,
        beat_bytes: u32,
        max_burst_bytes: u64,
        issue_overhead: Cycle,
        max_outstanding: usize,
        id_count: usize,
    ) -> Self {
        DmaEngine {
            name: name.to_string(),
            port,
            beat_bytes,
            max_burst_bytes,
            issue_overhead,
            max_outstanding,
            serial_descriptors: false,
            id_count,
            queue: VecDeque::new(),
            programming: None,
            launched: VecDeque::new(),
            w_stream: VecDeque::new(),
            outstanding: 0,
            burst_tags: BTreeMap::new(),
            progress: BTreeMap::new(),
            id_seq: 0,
            completions: Vec::new(),
            bytes_streamed: 0,
        }
    }

    pub fn enqueue(&mut self, desc: TransferDescriptor) {
        debug_assert!(desc.bytes > 0);
        self.queue.push_back(desc);
    }

    pub fn idle(&self) -> bool {
        self.queue.is_empty()
            && self.programming.is_none()
            && self.launched.is_empty()
            && self.w_stream.is_empty()
            && self.outstanding == 0
    }

    pub fn completion_of(&self, tag: u64) -> Option<&Completion> {
        self.completions.iter().find(|c| c.tag == tag)
    }

    pub fn last_completion_cycle(&self) -> Option<Cycle> {
        self.completions.iter().map(|c| c.cycle).max()
    }

    pub fn step(&mut self, now: Cycle, pool: &mut LinkPool, next_uid: &mut u64) {
        // Finish programming the current descriptor.
        if let Some((done_at, _)) = &self.programming {
            if *done_at <= now {
                let (_, xfer) = self.programming.take().unwrap();
                self.progress.insert(
                    xfer.tag,
                    Progress {
                        pending_bursts: xfer.bursts.len(),
                        issued_all: false,
                        worst: RespCode::Okay,
                    },
                );
                self.launched.push_back(xfer);
            }
        }

        // Start programming the next one.
        let blocked = self.serial_descriptors
            && !(self.launched.is_empty() && self.w_stream.is_empty());
        if self.programming.is_none() && !blocked {
            if let Some(front) = self.queue.front() {
                if front.available_at <= now {
                    let desc = self.queue.pop_front().unwrap();
                    let bursts =
                        split_bursts(desc.bytes, self.max_burst_bytes, self.beat_bytes);
                    self.programming = Some((
                        now + self.issue_overhead,
                        ActiveTransfer {
                            tag: desc.tag,
                            target: desc.target,
                            bursts: bursts.into(),
                            bytes: desc.bytes,
                        },
                    ));
                }
            }
        }

        // Issue one burst AW.
        if self.outstanding < self.max_outstanding {
            if let Some(front) = self.launched.front_mut() {
                if let Some(&beats) = front.bursts.front() {
                    if pool.aw[self.port.aw_in].can_accept(now, false) {
                        front.bursts.pop_front();
                        let uid = *next_uid;
                        *next_uid += 1;
                        let id = (self.id_seq % self.id_count as u64) as TxnId;
                        self.id_seq += 1;
                        let burst_bytes =
                            (beats as u64 * self.beat_bytes as u64).min(front.bytes);
                        front.bytes -= burst_bytes;
                        pool.aw[self.port.aw_in].push(
                            now,
                            false,
                            AwItem {
                                uid,
                                id,
                                target: front.target,
                                beats,
                                beat_bytes: self.beat_bytes,
                                exclusive: false,
                            },
                        );
                        self.w_stream.push_back((uid, beats, burst_bytes));
                        self.outstanding += 1;
                        self.burst_tags.insert(uid, front.tag);
                        if front.bursts.is_empty() {
                            let tag = front.tag;
                            self.launched.pop_front();
                            self.progress.get_mut(&tag).unwrap().issued_all = true;
                        }
                    }
                }
            }
        }

        // Stream one W beat.
        if let Some((uid, beats_left, bytes_left)) = self.w_stream.front_mut() {
            if pool.w[self.port.w_in].can_accept(now, false) {
                let beat_bytes = (*bytes_left).min(self.beat_bytes as u64) as u32;
                *bytes_left -= beat_bytes as u64;
                *beats_left -= 1;
                let last = *beats_left == 0;
                let uid = *uid;
                pool.w[self.port.w_in].push(
                    now,
                    false,
                    WItem {
                        uid,
                        bytes: beat_bytes,
                        last,
                    },
                );
                self.bytes_streamed += beat_bytes as u64;
                if last {
                    self.w_stream.pop_front();
                }
            }
        }

        // Harvest one response.
        if let Some(b) = pool.b[self.port.b_out].pop_ready(now) {
            let BItem { uid, resp, .. } = b;
            let tag = self
                .burst_tags
                .remove(&uid)
                .expect("B for burst this engine never issued");
            self.outstanding -= 1;
            let done = {
                let p = self.progress.get_mut(&tag).unwrap();
                p.pending_bursts -= 1;
                if resp != RespCode::Okay {
                    p.worst = RespCode::SlvErr;
                }
                p.pending_bursts == 0 && p.issued_all
            };
            if done {
                let worst = self.progress.remove(&tag).unwrap().worst;
                self.completions.push(Completion {
                    cycle: now,
                    tag,
                    resp: worst,
                });
            }
        }
    }
}
