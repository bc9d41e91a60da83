//! Multi-address mask encoding and address-map decode.
//!
//! An [`AddrSet`] is a base address plus a don't-care mask: every mask bit
//! set to 1 makes the corresponding address bit wild, so a set with `n`
//! masked bits denotes `2^n` addresses. Matching, intersection and decode
//! against an address map are all plain bit operations; the exhaustive
//! enumeration oracles in the test suite check them against brute-force set
//! arithmetic at reduced address widths.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Byte address on the interconnect. Masks are as wide as the address.
pub type Addr = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("region [{start:#x}, {end:#x}) is not a power of two in size")]
    NotPowerOfTwo { start: Addr, end: Addr },
    #[error("region [{start:#x}, {end:#x}) is not aligned to its size")]
    Misaligned { start: Addr, end: Addr },
    #[error("empty region [{start:#x}, {end:#x})")]
    EmptyRegion { start: Addr, end: Addr },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("multicast request {req} overlaps non-multicast region [{start:#x}, {end:#x})")]
    NonMulticastRegion { req: AddrSet, start: Addr, end: Addr },
    #[error("multicast request {req} matches several rules of slave {slave}; subset is not representable")]
    AmbiguousSubset { req: AddrSet, slave: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("set of {cardinality} addresses exceeds enumeration limit {limit}")]
pub struct CapacityError {
    pub cardinality: u128,
    pub limit: usize,
}

/// A set of addresses encoded as base plus don't-care mask.
///
/// Canonical form keeps masked base bits at zero, which makes equality and
/// hashing meaningful.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AddrSet {
    base: Addr,
    mask: u64,
}

impl fmt::Debug for AddrSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AddrSet({:#x}/{:#x})", self.base, self.mask)
    }
}

impl fmt::Display for AddrSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}/{:#x}", self.base, self.mask)
    }
}

impl AddrSet {
    /// Builds a set in canonical form; masked bits of `base` are cleared.
    pub fn new(base: Addr, mask: u64) -> Self {
        AddrSet {
            base: base & !mask,
            mask,
        }
    }

    /// Single-address set.
    pub fn unicast(addr: Addr) -> Self {
        AddrSet {
            base: addr,
            mask: 0,
        }
    }

    pub fn base(&self) -> Addr {
        self.base
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    /// True when the set holds more than one address.
    pub fn is_multicast(&self) -> bool {
        self.mask != 0
    }

    /// Number of addresses in the set: `2^popcount(mask)`.
    pub fn cardinality(&self) -> u128 {
        1u128 << self.mask.count_ones()
    }

    pub fn contains(&self, addr: Addr) -> bool {
        addr & !self.mask == self.base
    }

    /// Whether two sets share at least one address.
    ///
    /// A bit position can only distinguish the sets if it is wild in
    /// neither; the sets intersect iff base bits agree everywhere else.
    pub fn matches(&self, other: &AddrSet) -> bool {
        let masked_bits = self.mask | other.mask;
        let match_bits = !(self.base ^ other.base);
        (masked_bits | match_bits) == u64::MAX
    }

    /// Set intersection of two matching sets.
    ///
    /// Bits wild in both stay wild; bits fixed in either side take the fixed
    /// value. Must only be called when `matches` holds.
    pub fn intersect(&self, other: &AddrSet) -> AddrSet {
        debug_assert!(self.matches(other), "intersect on disjoint sets");
        let mask = self.mask & other.mask;
        let base = (!self.mask & self.base) | (self.mask & other.base);
        AddrSet::new(base, mask)
    }

    /// All member addresses in ascending order.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<Addr>, CapacityError> {
        let n = self.cardinality();
        if n > limit as u128 {
            return Err(CapacityError {
                cardinality: n,
                limit,
            });
        }
        let mut out = Vec::with_capacity(n as usize);
        // Submasks of `mask` in ascending numeric order; adding the base
        // keeps the order ascending because base and mask are disjoint.
        let mut sub: u64 = 0;
        loop {
            out.push(self.base | sub);
            if sub == self.mask {
                break;
            }
            sub = (sub | !self.mask).wrapping_add(1) & self.mask;
        }
        Ok(out)
    }
}

/// One entry of an address map: a half-open interval routed to a slave port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressRule {
    pub start: Addr,
    /// Exclusive end of the interval.
    pub end: Addr,
    pub slave_index: usize,
    /// Multicast-targetable regions must be power-of-two sized and aligned.
    pub multicast: bool,
}

impl AddressRule {
    pub fn new(start: Addr, end: Addr, slave_index: usize, multicast: bool) -> Self {
        AddressRule {
            start,
            end,
            slave_index,
            multicast,
        }
    }

    pub fn size(&self) -> u64 {
        self.end - self.start
    }

    pub fn contains(&self, addr: Addr) -> bool {
        addr >= self.start && addr < self.end
    }

    /// Converts the interval form to mask form.
    ///
    /// Only legal for power-of-two sized, size-aligned regions; such a
    /// region is exactly `{base = start, mask = end - start - 1}`.
    pub fn to_addr_set(&self) -> Result<AddrSet, EncodingError> {
        if self.end <= self.start {
            return Err(EncodingError::EmptyRegion {
                start: self.start,
                end: self.end,
            });
        }
        let size = self.end - self.start;
        if !size.is_power_of_two() {
            return Err(EncodingError::NotPowerOfTwo {
                start: self.start,
                end: self.end,
            });
        }
        if self.start % size != 0 {
            return Err(EncodingError::Misaligned {
                start: self.start,
                end: self.end,
            });
        }
        Ok(AddrSet::new(self.start, size - 1))
    }
}

/// Small bit set over crossbar ports (masters or slaves). Port indices are
/// limited to 64, which covers every configuration modelled here.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct PortSet(u64);

impl fmt::Debug for PortSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl PortSet {
    pub const EMPTY: PortSet = PortSet(0);

    pub fn single(idx: usize) -> Self {
        assert!(idx < 64);
        PortSet(1 << idx)
    }

    pub fn from_bits(bits: u64) -> Self {
        PortSet(bits)
    }

    pub fn bits(&self) -> u64 {
        self.0
    }

    pub fn insert(&mut self, idx: usize) {
        assert!(idx < 64);
        self.0 |= 1 << idx;
    }

    pub fn remove(&mut self, idx: usize) {
        self.0 &= !(1 << idx);
    }

    pub fn contains(&self, idx: usize) -> bool {
        idx < 64 && self.0 & (1 << idx) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    /// Lowest set index; the priority-encoder selection.
    pub fn lowest(&self) -> Option<usize> {
        if self.0 == 0 {
            None
        } else {
            Some(self.0.trailing_zeros() as usize)
        }
    }

    pub fn union(&self, other: PortSet) -> PortSet {
        PortSet(self.0 | other.0)
    }

    pub fn intersection(&self, other: PortSet) -> PortSet {
        PortSet(self.0 & other.0)
    }

    pub fn difference(&self, other: PortSet) -> PortSet {
        PortSet(self.0 & !other.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(move |i| self.contains(*i))
    }
}

impl FromIterator<usize> for PortSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut s = PortSet::EMPTY;
        for i in iter {
            s.insert(i);
        }
        s
    }
}

/// Result of decoding a request against an address map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeResult {
    /// Slave ports containing at least one destination address.
    pub select: PortSet,
    /// Per-slave subset of the request set, where representable.
    pub per_slave: BTreeMap<usize, AddrSet>,
    /// True when part of the request set falls outside every rule; such
    /// traffic is routed to the decode-error slave and answered with DECERR.
    pub error_route: bool,
}

impl DecodeResult {
    pub fn is_error_only(&self) -> bool {
        self.select.is_empty() && self.error_route
    }
}

/// Decomposes `[start, end)` into maximal size-aligned power-of-two blocks.
///
/// Used to match requests against arbitrary (non-multicast) interval rules
/// with exact set semantics.
pub fn interval_blocks(start: Addr, end: Addr) -> Vec<AddrSet> {
    let mut blocks = Vec::new();
    let mut cur = start;
    while cur < end {
        let align = if cur == 0 {
            1u64 << 63
        } else {
            cur & cur.wrapping_neg()
        };
        let mut size = align;
        while size > end - cur {
            size >>= 1;
        }
        blocks.push(AddrSet::new(cur, size - 1));
        cur += size;
    }
    blocks
}

/// Whether the request set intersects the interval `[start, end)`.
pub fn intersects_interval(req: &AddrSet, start: Addr, end: Addr) -> bool {
    interval_blocks(start, end).iter().any(|b| req.matches(b))
}

/// Decodes a request against an address map.
///
/// The select mask gets one bit per slave with at least one destination
/// address; `per_slave` holds the intersected subset for each. Requests (or
/// parts of requests) that no rule covers are flagged for the decode-error
/// route rather than silently dropped. A multicast request touching a
/// non-multicast region is a configuration error and is rejected.
pub fn decode(req: &AddrSet, address_map: &[AddressRule]) -> Result<DecodeResult, DecodeError> {
    let mut select = PortSet::EMPTY;
    let mut per_slave: BTreeMap<usize, AddrSet> = BTreeMap::new();
    let mut covered: u128 = 0;

    for rule in address_map {
        if rule.multicast {
            let rule_set = rule
                .to_addr_set()
                .expect("multicast rule violates alignment invariants");
            if req.matches(&rule_set) {
                let sub = req.intersect(&rule_set);
                select.insert(rule.slave_index);
                covered += sub.cardinality();
                if let Some(prev) = per_slave.get(&rule.slave_index) {
                    // Two regions of one slave can both intersect a multicast
                    // request; a single AddrSet cannot hold the union.
                    if req.is_multicast() && *prev != sub {
                        return Err(DecodeError::AmbiguousSubset {
                            req: *req,
                            slave: rule.slave_index,
                        });
                    }
                } else {
                    per_slave.insert(rule.slave_index, sub);
                }
            }
        } else if req.is_multicast() {
            if intersects_interval(req, rule.start, rule.end) {
                return Err(DecodeError::NonMulticastRegion {
                    req: *req,
                    start: rule.start,
                    end: rule.end,
                });
            }
        } else if rule.contains(req.base) {
            select.insert(rule.slave_index);
            per_slave.insert(rule.slave_index, *req);
            covered += 1;
        }
    }

    let error_route = covered < req.cardinality();
    Ok(DecodeResult {
        select,
        per_slave,
        error_route,
    })
}

#[derive(Debug, Error)]
pub enum MapParseError {
    #[error("line {line}: expected `start end slave mcast`, got {got:?}")]
    BadShape { line: usize, got: String },
    #[error("line {line}: bad field {field:?}: {reason}")]
    BadField {
        line: usize,
        field: String,
        reason: String,
    },
}

/// Parses the textual address-map format: one rule per line,
/// `start end slave_index multicast_flag`, addresses in hexadecimal,
/// `#` comments allowed.
pub fn parse_address_map(text: &str) -> Result<Vec<AddressRule>, MapParseError> {
    let mut rules = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(MapParseError::BadShape {
                line: line_no,
                got: line.to_string(),
            });
        }
        let parse_addr = |s: &str| -> Result<u64, MapParseError> {
            let t = s.trim_start_matches("0x").trim_start_matches("0X");
            u64::from_str_radix(t, 16).map_err(|e| MapParseError::BadField {
                line: line_no,
                field: s.to_string(),
                reason: e.to_string(),
            })
        };
        let start = parse_addr(fields[0])?;
        let end = parse_addr(fields[1])?;
        let slave: usize = fields[2].parse().map_err(|e: std::num::ParseIntError| {
            MapParseError::BadField {
                line: line_no,
                field: fields[2].to_string(),
                reason: e.to_string(),
            }
        })?;
        let multicast = match fields[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(MapParseError::BadField {
                    line: line_no,
                    field: other.to_string(),
                    reason: "multicast flag must be 0 or 1".to_string(),
                })
            }
        };
        rules.push(AddressRule::new(start, end, slave, multicast));
    }
    Ok(rules)
}

/// Renders rules in the same textual format `parse_address_map` accepts.
pub fn format_address_map(rules: &[AddressRule]) -> String {
    let mut out = String::new();
    for r in rules {
        out.push_str(&format!(
            "{:#x} {:#x} {} {}\n",
            r.start,
            r.end,
            r.slave_index,
            if r.multicast { 1 } else { 0 }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster_map_32() -> Vec<AddressRule> {
        (0..32)
            .map(|i| {
                AddressRule::new(
                    0x0100_0000 + i as u64 * 0x4_0000,
                    0x0100_0000 + (i as u64 + 1) * 0x4_0000,
                    i,
                    true,
                )
            })
            .collect()
    }

    #[test]
    fn interval_to_mask_form() {
        let r = AddressRule::new(0x0100_0000, 0x0104_0000, 0, true);
        assert_eq!(r.to_addr_set().unwrap(), AddrSet::new(0x0100_0000, 0x3FFFF));

        let single = AddressRule::new(0x0, 0x1, 0, true);
        assert_eq!(single.to_addr_set().unwrap(), AddrSet::new(0, 0));

        let bad = AddressRule::new(0x1000, 0x2800, 0, true);
        assert_eq!(
            bad.to_addr_set(),
            Err(EncodingError::NotPowerOfTwo {
                start: 0x1000,
                end: 0x2800
            })
        );

        let misaligned = AddressRule::new(0x1000, 0x3000, 0, true);
        assert_eq!(
            misaligned.to_addr_set(),
            Err(EncodingError::Misaligned {
                start: 0x1000,
                end: 0x3000
            })
        );
    }

    #[test]
    fn mask_form_round_trip_enumerates_interval() {
        // Exhaustive at 12-bit width: every legal power-of-two rule.
        let width = 12u32;
        let space = 1u64 << width;
        for log_size in 0..=width {
            let size = 1u64 << log_size;
            let mut start = 0;
            while start + size <= space {
                let rule = AddressRule::new(start, start + size, 0, true);
                let set = rule.to_addr_set().unwrap();
                let members = set.enumerate(1 << 13).unwrap();
                let expect: Vec<Addr> = (start..start + size).collect();
                assert_eq!(members, expect, "rule [{start:#x},{:#x})", start + size);
                start += size;
            }
        }
    }

    #[test]
    fn matches_examples() {
        let req = AddrSet::new(0x0100_0000, 0x0004_0000);
        let rule = AddrSet::new(0x0104_0000, 0x3FFFF);
        assert!(req.matches(&rule));

        let a = AddrSet::new(0xDEAD_0000, 0x0000_F0F0);
        assert!(a.matches(&a));

        let left = AddrSet::new(0x0100_0000, 0x3FFFF);
        let right = AddrSet::new(0x0104_0000, 0x3FFFF);
        assert!(!left.matches(&right));
    }

    #[test]
    fn intersect_examples() {
        let req = AddrSet::new(0x0100_0000, 0x0004_0000);
        let rule = AddrSet::new(0x0104_0000, 0x3FFFF);
        assert_eq!(req.intersect(&rule), AddrSet::new(0x0104_0000, 0x0));

        let set = AddrSet::new(0x4200, 0xFF);
        assert_eq!(set.intersect(&set), set);

        // {0,1,4,5} ∩ {0,1,2,3} = {0,1}
        let a = AddrSet::new(0b0000, 0b0101);
        let b = AddrSet::new(0b0000, 0b0011);
        assert_eq!(a.intersect(&b), AddrSet::new(0b0000, 0b0001));
    }

    #[test]
    fn cardinality_and_enumerate() {
        assert_eq!(AddrSet::new(0x42, 0).cardinality(), 1);
        assert_eq!(AddrSet::new(0, 0b0101).cardinality(), 4);
        assert_eq!(AddrSet::new(0, 0x3FFFF).cardinality(), 1 << 18);

        assert_eq!(
            AddrSet::new(0, 0b0101).enumerate(16).unwrap(),
            vec![0, 1, 4, 5]
        );
        assert_eq!(AddrSet::new(0x42, 0).enumerate(16).unwrap(), vec![0x42]);
        assert_eq!(
            AddrSet::new(0, 0b0011).enumerate(16).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            AddrSet::new(0, 0xFF).enumerate(4),
            Err(CapacityError {
                cardinality: 256,
                limit: 4
            })
        );
    }

    #[test]
    fn full_width_mask_cardinality() {
        assert_eq!(AddrSet::new(0, u64::MAX).cardinality(), 1u128 << 64);
    }

    #[test]
    fn canonical_form_is_enforced() {
        let s = AddrSet::new(0xFFFF, 0x00FF);
        assert_eq!(s.base(), 0xFF00);
        assert_eq!(s, AddrSet::new(0xFF00, 0x00FF));
    }

    #[test]
    fn decode_all_clusters() {
        let map = cluster_map_32();
        let req = AddrSet::new(0x0100_0000, 0x007C_0000);
        let res = decode(&req, &map).unwrap();
        assert_eq!(res.select.len(), 32);
        assert!(!res.error_route);
        for i in 0..32 {
            let sub = res.per_slave[&i];
            assert_eq!(sub, AddrSet::unicast(0x0100_0000 + i as u64 * 0x4_0000));
        }
    }

    #[test]
    fn decode_unicast_single_cluster() {
        let map = cluster_map_32();
        let req = AddrSet::unicast(0x0108_0000);
        let res = decode(&req, &map).unwrap();
        assert_eq!(res.select, PortSet::single(2));
        assert!(!res.error_route);
    }

    #[test]
    fn decode_unmapped_goes_to_error_route() {
        let map = cluster_map_32();
        let req = AddrSet::unicast(0xF000_0000);
        let res = decode(&req, &map).unwrap();
        assert!(res.is_error_only());
    }

    #[test]
    fn decode_multicast_into_plain_region_is_rejected() {
        let mut map = cluster_map_32();
        map.push(AddressRule::new(0x8000_0000, 0x8040_0000, 32, false));
        let req = AddrSet::new(0x8000_0000, 0x1_0000);
        assert!(matches!(
            decode(&req, &map),
            Err(DecodeError::NonMulticastRegion { .. })
        ));
    }

    #[test]
    fn decode_straddling_request_flags_residue() {
        let map = cluster_map_32();
        // Covers cluster space and beyond: bit 23 reaches past the last rule.
        let req = AddrSet::new(0x0100_0000, 0x0080_0000);
        let res = decode(&req, &map).unwrap();
        assert_eq!(res.select, PortSet::single(0));
        assert!(res.error_route);
    }

    #[test]
    fn interval_decomposition_covers_exactly() {
        for (start, end) in [(0u64, 5u64), (3, 17), (5, 6), (0, 256), (7, 129)] {
            let blocks = interval_blocks(start, end);
            let mut members: Vec<Addr> = blocks
                .iter()
                .flat_map(|b| b.enumerate(1 << 10).unwrap())
                .collect();
            members.sort_unstable();
            assert_eq!(members, (start..end).collect::<Vec<_>>());
        }
    }

    #[test]
    fn map_text_round_trip() {
        let text = "# cluster map\n0x01000000 0x01040000 0 1\n0x01040000, 0x01080000, 1, 0\n";
        let rules = parse_address_map(text).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].slave_index, 0);
        assert!(rules[0].multicast);
        assert!(!rules[1].multicast);
        let rendered = format_address_map(&rules);
        assert_eq!(parse_address_map(&rendered).unwrap(), rules);

        assert!(parse_address_map("0x0 0x1 0").is_err());
        assert!(parse_address_map("0x0 0x1 0 yes").is_err());
    }
}
