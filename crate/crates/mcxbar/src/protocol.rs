//! Write-channel transaction types, response reduction and trace records.
//!
//! Only the AW/W/B channels are modelled; read channels take no part in
//! multicast. Payload contents are not carried, only byte counts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::addr::{decode, AddrSet, AddressRule, DecodeError, PortSet};

/// AXI transaction identifier. Drawn from a small configurable space
/// (default 16) so the ID occupancy tables see realistic reuse.
pub type TxnId = u8;

pub const DEFAULT_ID_COUNT: usize = 16;

/// Write response code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RespCode {
    Okay,
    ExOkay,
    SlvErr,
    DecErr,
}

impl fmt::Display for RespCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RespCode::Okay => "OKAY",
            RespCode::ExOkay => "EXOKAY",
            RespCode::SlvErr => "SLVERR",
            RespCode::DecErr => "DECERR",
        };
        f.write_str(s)
    }
}

impl FromStr for RespCode {
    type Err = TraceParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "OKAY" => Ok(RespCode::Okay),
            "EXOKAY" => Ok(RespCode::ExOkay),
            "SLVERR" => Ok(RespCode::SlvErr),
            "DECERR" => Ok(RespCode::DecErr),
            _ => Err(TraceParseError::BadField {
                field: "resp".into(),
                got: s.into(),
            }),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("EXOKAY response in a multicast join")]
    ExclusiveInJoin,
    #[error("W beat for unknown transaction uid {0}")]
    OrphanBeat(u64),
    #[error("B response for unknown transaction uid {0}")]
    OrphanResponse(u64),
}

/// Typed outcome of multicast validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum McastViolation {
    #[error("exclusive multicast transactions are not allowed")]
    ExclusiveMulticast,
    #[error("target {0} is not fully covered by the address map")]
    UnmappedTarget(AddrSet),
    #[error("decode rejected target: {0}")]
    NonMulticastRegion(DecodeError),
}

/// Write request as carried on the AW channel, with the destination set in
/// the user-signal mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AwRequest {
    pub id: TxnId,
    pub target: AddrSet,
    pub burst_beats: u32,
    pub beat_bytes: u32,
    pub exclusive: bool,
    pub master_index: usize,
}

impl AwRequest {
    pub fn is_multicast(&self) -> bool {
        self.target.is_multicast()
    }

    pub fn bytes(&self) -> u64 {
        self.burst_beats as u64 * self.beat_bytes as u64
    }
}

/// One W-channel data beat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WBeat {
    pub master_index: usize,
    pub byte_count: u32,
    pub last: bool,
}

/// One B-channel response from a slave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BResponse {
    pub id: TxnId,
    pub resp: RespCode,
    pub source_slave: usize,
}

/// Reduces the responses of a multicast into a single code.
///
/// Any SLVERR or DECERR folds to SLVERR; otherwise OKAY. Exclusive
/// multicasts are disallowed, so an EXOKAY input is a protocol error.
pub fn join_responses(resps: &[RespCode]) -> Result<RespCode, ProtocolError> {
    debug_assert!(!resps.is_empty());
    if resps.iter().any(|r| *r == RespCode::ExOkay) {
        return Err(ProtocolError::ExclusiveInJoin);
    }
    let any_err = resps
        .iter()
        .any(|r| matches!(r, RespCode::SlvErr | RespCode::DecErr));
    Ok(if any_err {
        RespCode::SlvErr
    } else {
        RespCode::Okay
    })
}

/// Selects the ID propagated with a joined response: all responses carry the
/// same ID, so the one from the lowest-indexed addressed slave is taken.
pub fn pick_join_id(
    addressed_slaves: &PortSet,
    per_slave_ids: &BTreeMap<usize, TxnId>,
) -> Option<TxnId> {
    let first = addressed_slaves.lowest()?;
    debug_assert!(
        addressed_slaves
            .iter()
            .filter_map(|s| per_slave_ids.get(&s))
            .all(|id| Some(id) == per_slave_ids.get(&first)),
        "joined responses must carry one ID"
    );
    per_slave_ids.get(&first).copied()
}

/// Checks a request for multicast legality against an address map.
pub fn validate_multicast(
    aw: &AwRequest,
    address_map: &[AddressRule],
) -> Result<(), McastViolation> {
    if aw.exclusive && aw.is_multicast() {
        return Err(McastViolation::ExclusiveMulticast);
    }
    match decode(&aw.target, address_map) {
        Ok(res) => {
            if res.error_route || res.select.is_empty() {
                Err(McastViolation::UnmappedTarget(aw.target))
            } else {
                Ok(())
            }
        }
        Err(e) => Err(McastViolation::NonMulticastRegion(e)),
    }
}

/// Trace channels. AWM/BJ are the master-port view of a transaction, the
/// rest are per-slave-port events; GNT/CMT expose the acquisition handshake
/// to the monitors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Request accepted at a master port (demux head retired).
    Awm,
    /// Forked request accepted at a slave port.
    Aws,
    /// Multicast grant taken by a slave-port arbiter.
    Gnt,
    /// Commit asserted: all addressed slave ports acquired.
    Cmt,
    /// W beat delivered at a slave port.
    W,
    /// B response produced at a slave port.
    B,
    /// Joined/forwarded B response delivered to the master.
    Bj,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Channel::Awm => "AWM",
            Channel::Aws => "AWS",
            Channel::Gnt => "GNT",
            Channel::Cmt => "CMT",
            Channel::W => "W",
            Channel::B => "B",
            Channel::Bj => "BJ",
        };
        f.write_str(s)
    }
}

impl FromStr for Channel {
    type Err = TraceParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "AWM" => Ok(Channel::Awm),
            "AWS" => Ok(Channel::Aws),
            "GNT" => Ok(Channel::Gnt),
            "CMT" => Ok(Channel::Cmt),
            "W" => Ok(Channel::W),
            "B" => Ok(Channel::B),
            "BJ" => Ok(Channel::Bj),
            _ => Err(TraceParseError::BadField {
                field: "channel".into(),
                got: s.into(),
            }),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("trace line {0:?}: too few fields")]
    TooShort(String),
    #[error("bad trace field {field}: {got:?}")]
    BadField { field: String, got: String },
}

/// One trace record; emitted one per line as
/// `cycle channel node master slave id uid key=value...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub channel: Channel,
    /// Emitting crossbar, e.g. `top` or `g3`.
    pub node: String,
    pub master: usize,
    pub slave: Option<usize>,
    pub id: TxnId,
    /// Network-unique transaction identity, stable across hierarchy levels.
    pub uid: u64,
    /// Burst length in beats (AWM/AWS records).
    pub beats: u32,
    pub mcast: bool,
    /// Addressed slave set at this crossbar (AWM/CMT records).
    pub dests: PortSet,
    pub last: bool,
    pub resp: RespCode,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        let slave = match self.slave {
            Some(s) => s.to_string(),
            None => "-".to_string(),
        };
        format!(
            "{} {} {} {} {} {} {} beats={} mcast={} dests={:#x} last={} resp={}",
            self.cycle,
            self.channel,
            self.node,
            self.master,
            slave,
            self.id,
            self.uid,
            self.beats,
            self.mcast as u8,
            self.dests.bits(),
            self.last as u8,
            self.resp,
        )
    }

    pub fn parse(line: &str) -> Result<TraceRecord, TraceParseError> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 7 {
            return Err(TraceParseError::TooShort(line.to_string()));
        }
        let num = |s: &str, name: &str| -> Result<u64, TraceParseError> {
            s.parse().map_err(|_| TraceParseError::BadField {
                field: name.into(),
                got: s.into(),
            })
        };
        let cycle = num(fields[0], "cycle")?;
        let channel: Channel = fields[1].parse()?;
        let node = fields[2].to_string();
        let master = num(fields[3], "master")? as usize;
        let slave = match fields[4] {
            "-" => None,
            s => Some(num(s, "slave")? as usize),
        };
        let id = num(fields[5], "id")? as TxnId;
        let uid = num(fields[6], "uid")?;

        let mut rec = TraceRecord {
            cycle,
            channel,
            node,
            master,
            slave,
            id,
            uid,
            beats: 0,
            mcast: false,
            dests: PortSet::EMPTY,
            last: false,
            resp: RespCode::Okay,
        };
        for kv in &fields[7..] {
            let (key, value) = kv.split_once('=').ok_or_else(|| TraceParseError::BadField {
                field: "pair".into(),
                got: kv.to_string(),
            })?;
            match key {
                "beats" => rec.beats = num(value, "beats")? as u32,
                "mcast" => rec.mcast = value == "1",
                "last" => rec.last = value == "1",
                "resp" => rec.resp = value.parse()?,
                "dests" => {
                    let t = value.trim_start_matches("0x");
                    let bits =
                        u64::from_str_radix(t, 16).map_err(|_| TraceParseError::BadField {
                            field: "dests".into(),
                            got: value.into(),
                        })?;
                    rec.dests = PortSet::from_bits(bits);
                }
                _ => {
                    return Err(TraceParseError::BadField {
                        field: key.into(),
                        got: value.into(),
                    })
                }
            }
        }
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_folds_errors_to_slverr() {
        use RespCode::*;
        assert_eq!(join_responses(&[Okay, Okay, Okay]), Ok(Okay));
        assert_eq!(join_responses(&[Okay, SlvErr]), Ok(SlvErr));
        assert_eq!(join_responses(&[DecErr, Okay, Okay]), Ok(SlvErr));
        assert_eq!(
            join_responses(&[Okay, ExOkay]),
            Err(ProtocolError::ExclusiveInJoin)
        );
    }

    #[test]
    fn join_is_order_insensitive_and_never_exokay_or_decerr() {
        use RespCode::*;
        let codes = [Okay, SlvErr, DecErr];
        // All multisets of size <= 4 over the joinable codes.
        for len in 1..=4usize {
            let mut idx = vec![0usize; len];
            loop {
                let resps: Vec<RespCode> = idx.iter().map(|i| codes[*i]).collect();
                let joined = join_responses(&resps).unwrap();
                assert!(matches!(joined, Okay | SlvErr));
                // Reversal is enough to catch order dependence in an
                // OR-reduction; idempotence: doubling every element.
                let mut rev = resps.clone();
                rev.reverse();
                assert_eq!(join_responses(&rev).unwrap(), joined);
                let doubled: Vec<RespCode> =
                    resps.iter().flat_map(|r| [*r, *r]).collect();
                assert_eq!(join_responses(&doubled).unwrap(), joined);

                // Advance the multi-index.
                let mut k = 0;
                loop {
                    idx[k] += 1;
                    if idx[k] < codes.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                    if k == len {
                        break;
                    }
                }
                if k == len {
                    break;
                }
            }
        }
    }

    #[test]
    fn join_id_comes_from_first_addressed_slave() {
        let slaves: PortSet = [1usize, 3].into_iter().collect();
        let ids: BTreeMap<usize, TxnId> = [(1, 7), (3, 7)].into_iter().collect();
        assert_eq!(pick_join_id(&slaves, &ids), Some(7));

        let single: PortSet = [2usize].into_iter().collect();
        let ids: BTreeMap<usize, TxnId> = [(2, 0)].into_iter().collect();
        assert_eq!(pick_join_id(&single, &ids), Some(0));

        let all: PortSet = [0usize, 1, 2, 3].into_iter().collect();
        let ids: BTreeMap<usize, TxnId> =
            [(0, 5), (1, 5), (2, 5), (3, 5)].into_iter().collect();
        assert_eq!(pick_join_id(&all, &ids), Some(5));
    }

    fn rule(start: u64, end: u64, idx: usize, mc: bool) -> AddressRule {
        AddressRule::new(start, end, idx, mc)
    }

    #[test]
    fn validate_multicast_cases() {
        let map = vec![
            rule(0x0100_0000, 0x0104_0000, 0, true),
            rule(0x0104_0000, 0x0108_0000, 1, true),
            rule(0x8000_0000, 0x8040_0000, 2, false),
        ];
        let aw = |target: AddrSet, exclusive: bool| AwRequest {
            id: 0,
            target,
            burst_beats: 1,
            beat_bytes: 64,
            exclusive,
            master_index: 0,
        };

        let mc = AddrSet::new(0x0100_0000, 0x4_0000);
        assert_eq!(
            validate_multicast(&aw(mc, true), &map),
            Err(McastViolation::ExclusiveMulticast)
        );
        assert_eq!(validate_multicast(&aw(mc, false), &map), Ok(()));
        // Exclusive unicast stays legal.
        assert_eq!(
            validate_multicast(&aw(AddrSet::unicast(0x0100_0000), true), &map),
            Ok(())
        );
        assert!(matches!(
            validate_multicast(&aw(AddrSet::new(0x8000_0000, 0x1000), false), &map),
            Err(McastViolation::NonMulticastRegion(_))
        ));
        assert!(matches!(
            validate_multicast(&aw(AddrSet::unicast(0xF000_0000), false), &map),
            Err(McastViolation::UnmappedTarget(_))
        ));
    }

    #[test]
    fn unicast_requests_never_hit_multicast_rules_logic() {
        // Mask zero classifies as unicast regardless of map contents.
        let aw = AwRequest {
            id: 3,
            target: AddrSet::unicast(0x0100_0040),
            burst_beats: 4,
            beat_bytes: 64,
            exclusive: false,
            master_index: 1,
        };
        assert!(!aw.is_multicast());
        assert_eq!(aw.bytes(), 256);
    }

    #[test]
    fn trace_record_round_trip() {
        let rec = TraceRecord {
            cycle: 123,
            channel: Channel::Aws,
            node: "g3".into(),
            master: 2,
            slave: Some(4),
            id: 7,
            uid: 99,
            beats: 8,
            mcast: true,
            dests: [0usize, 1, 4].into_iter().collect(),
            last: false,
            resp: RespCode::Okay,
        };
        let line = rec.to_line();
        assert_eq!(TraceRecord::parse(&line).unwrap(), rec);

        assert!(TraceRecord::parse("12 AWS g0").is_err());
        assert!(TraceRecord::parse("x AWS g0 0 0 0 0").is_err());
        assert!(TraceRecord::parse("1 ZZZ g0 0 0 0 0").is_err());
    }
}
