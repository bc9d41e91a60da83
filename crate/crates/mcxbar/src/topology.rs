//! Hierarchical network description: groups of clusters behind a two-level
//! crossbar tree, with a shared last-level memory on the top level.
//!
//! The topology also carries the timing calibration knobs. Values load from
//! a TOML file and individual keys can be overridden from the command line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{decode, Addr, AddrSet, AddressRule, PortSet};
use crate::sim::Cycle;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cluster_stride {0:#x} is not a power of two")]
    StrideNotPowerOfTwo(u64),
    #[error("cluster_base {0:#x} is not aligned to the group region size {1:#x}")]
    GroupMisaligned(Addr, u64),
    #[error("{0} ports exceed the 63-port limit of one crossbar")]
    TooManyPorts(usize),
    #[error("{0}")]
    BadParameter(String),
}

fn default_num_groups() -> usize {
    8
}
fn default_clusters_per_group() -> usize {
    4
}
fn default_cluster_base() -> u64 {
    0x0100_0000
}
fn default_cluster_stride() -> u64 {
    0x4_0000
}
fn default_llc_base() -> u64 {
    0x8000_0000
}
fn default_llc_size() -> u64 {
    4 << 20
}
fn default_beat_bytes() -> u32 {
    64
}
fn default_clock_ghz() -> f64 {
    1.0
}
fn default_latency() -> Cycle {
    1
}
fn default_llc_latency() -> Cycle {
    20
}
fn default_round_trip() -> Cycle {
    30
}
fn default_sw_overhead() -> Cycle {
    50
}
fn default_cluster_accept_latency() -> Cycle {
    2
}
fn default_max_mcast_outstanding() -> usize {
    4
}
fn default_dma_max_burst() -> u64 {
    4096
}
fn default_dma_max_outstanding() -> usize {
    8
}
fn default_flops_per_cycle() -> u64 {
    16
}
fn default_id_count() -> usize {
    16
}
fn default_true() -> bool {
    true
}

/// Static description of the simulated system plus timing parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "default_num_groups")]
    pub num_groups: usize,
    #[serde(default = "default_clusters_per_group")]
    pub clusters_per_group: usize,
    #[serde(default = "default_cluster_base")]
    pub cluster_base: Addr,
    #[serde(default = "default_cluster_stride")]
    pub cluster_stride: u64,
    #[serde(default = "default_llc_base")]
    pub llc_base: Addr,
    #[serde(default = "default_llc_size")]
    pub llc_size: u64,
    #[serde(default = "default_beat_bytes")]
    pub beat_bytes: u32,
    #[serde(default = "default_clock_ghz")]
    pub clock_ghz: f64,

    /// Per-channel crossbar traversal latency in cycles.
    #[serde(default = "default_latency")]
    pub latency: Cycle,
    /// Access latency of the last-level memory; also its per-transfer
    /// descriptor handling time (one port, serial service).
    #[serde(default = "default_llc_latency")]
    pub llc_latency: Cycle,
    /// Source-to-memory-and-back latency, charged as request travel when a
    /// cluster pulls data served by the memory-side engine.
    #[serde(default = "default_round_trip")]
    pub round_trip: Cycle,
    /// Per-transfer software overhead: descriptor programming plus
    /// completion polling. Programming is charged per descriptor at the
    /// issuing engine, polling once per observed completion or barrier.
    #[serde(default = "default_sw_overhead")]
    pub sw_overhead: Cycle,
    /// Cycles between the last beat landing in a cluster memory and its B
    /// response.
    #[serde(default = "default_cluster_accept_latency")]
    pub cluster_accept_latency: Cycle,
    #[serde(default = "default_max_mcast_outstanding")]
    pub max_mcast_outstanding: usize,
    #[serde(default = "default_dma_max_burst")]
    pub dma_max_burst: u64,
    /// Outstanding-burst budget per DMA engine.
    #[serde(default = "default_dma_max_outstanding")]
    pub dma_max_outstanding: usize,
    /// Peak per-cluster compute rate (FLOP/cycle).
    #[serde(default = "default_flops_per_cycle")]
    pub flops_per_cycle: u64,
    /// Size of the AXI ID space used by the DMA engines.
    #[serde(default = "default_id_count")]
    pub id_count: usize,
    #[serde(default = "default_true")]
    pub multicast_enabled: bool,
}

impl Default for Topology {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

impl Topology {
    pub fn from_toml(text: &str) -> Result<Topology, ConfigError> {
        let topo: Topology =
            toml::from_str(text).map_err(|e| ConfigError::BadParameter(e.to_string()))?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.cluster_stride.is_power_of_two() {
            return Err(ConfigError::StrideNotPowerOfTwo(self.cluster_stride));
        }
        if self.num_groups == 0 || self.clusters_per_group == 0 {
            return Err(ConfigError::BadParameter(
                "need at least one group and one cluster per group".into(),
            ));
        }
        if self.cluster_base % self.cluster_stride != 0 {
            return Err(ConfigError::GroupMisaligned(
                self.cluster_base,
                self.cluster_stride,
            ));
        }
        if self.clusters_per_group.is_power_of_two() {
            let group_size = self.group_size();
            if self.cluster_base % group_size != 0 {
                return Err(ConfigError::GroupMisaligned(self.cluster_base, group_size));
            }
        } else {
            // Group super-regions would not be multicast-targetable.
            return Err(ConfigError::BadParameter(format!(
                "clusters_per_group {} must be a power of two",
                self.clusters_per_group
            )));
        }
        let group_ports = self.clusters_per_group + 2;
        let top_ports = self.num_groups + 2;
        if group_ports > 63 || top_ports > 63 {
            return Err(ConfigError::TooManyPorts(group_ports.max(top_ports)));
        }
        if self.beat_bytes == 0 || !self.beat_bytes.is_power_of_two() {
            return Err(ConfigError::BadParameter(format!(
                "beat_bytes {} must be a power of two",
                self.beat_bytes
            )));
        }
        Ok(())
    }

    pub fn num_clusters(&self) -> usize {
        self.num_groups * self.clusters_per_group
    }

    pub fn group_size(&self) -> u64 {
        self.clusters_per_group as u64 * self.cluster_stride
    }

    pub fn group_of(&self, cluster: usize) -> usize {
        cluster / self.clusters_per_group
    }

    pub fn cluster_region(&self, cluster: usize) -> (Addr, Addr) {
        let start = self.cluster_base + cluster as u64 * self.cluster_stride;
        (start, start + self.cluster_stride)
    }

    pub fn cluster_addr(&self, cluster: usize, offset: u64) -> Addr {
        debug_assert!(offset < self.cluster_stride);
        self.cluster_base + cluster as u64 * self.cluster_stride + offset
    }

    pub fn group_region(&self, group: usize) -> (Addr, Addr) {
        let start = self.cluster_base + group as u64 * self.group_size();
        (start, start + self.group_size())
    }

    /// A mask-form set covering clusters `0..n` at a common local offset.
    /// `n` must be a power of two and the base aligned to the covered span.
    pub fn cluster_span(&self, n: usize, offset: u64) -> Result<AddrSet, ConfigError> {
        if n == 0 || !n.is_power_of_two() {
            return Err(ConfigError::BadParameter(format!(
                "{n} clusters cannot be covered by one mask-form set"
            )));
        }
        let span = n as u64 * self.cluster_stride;
        let base = self.cluster_base + offset;
        let mask = (n as u64 - 1) * self.cluster_stride;
        if self.cluster_base % span != 0 {
            return Err(ConfigError::GroupMisaligned(self.cluster_base, span));
        }
        Ok(AddrSet::new(base, mask))
    }

    /// Flat address map over all clusters plus the shared memory; slave `i`
    /// is cluster `i`, the memory is slave `num_clusters()`.
    pub fn flat_map(&self) -> Vec<AddressRule> {
        let mut rules: Vec<AddressRule> = (0..self.num_clusters())
            .map(|c| {
                let (start, end) = self.cluster_region(c);
                AddressRule::new(start, end, c, true)
            })
            .collect();
        rules.push(AddressRule::new(
            self.llc_base,
            self.llc_base + self.llc_size,
            self.num_clusters(),
            false,
        ));
        rules
    }

    /// Address map of group `g`'s crossbar: local clusters on ports
    /// `0..clusters_per_group`, everything else (other groups, the shared
    /// memory) on the uplink port `clusters_per_group`.
    pub fn group_map(&self, g: usize) -> Vec<AddressRule> {
        let uplink = self.clusters_per_group;
        let mut rules = Vec::new();
        for local in 0..self.clusters_per_group {
            let c = g * self.clusters_per_group + local;
            let (start, end) = self.cluster_region(c);
            rules.push(AddressRule::new(start, end, local, true));
        }
        for h in 0..self.num_groups {
            if h == g {
                continue;
            }
            let (start, end) = self.group_region(h);
            rules.push(AddressRule::new(start, end, uplink, true));
        }
        rules.push(AddressRule::new(
            self.llc_base,
            self.llc_base + self.llc_size,
            uplink,
            false,
        ));
        rules
    }

    /// Address map of the top-level crossbar: group regions on ports
    /// `0..num_groups`, the shared memory on port `num_groups`.
    pub fn top_map(&self) -> Vec<AddressRule> {
        let mut rules: Vec<AddressRule> = (0..self.num_groups)
            .map(|h| {
                let (start, end) = self.group_region(h);
                AddressRule::new(start, end, h, true)
            })
            .collect();
        rules.push(AddressRule::new(
            self.llc_base,
            self.llc_base + self.llc_size,
            self.num_groups,
            false,
        ));
        rules
    }
}

/// One crossbar traversal of a routed request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteHop {
    /// Crossbar name, `g<i>` or `top`.
    pub xbar: String,
    /// Slave ports selected at this crossbar.
    pub fanout: usize,
}

/// Walks the crossbar hierarchy for a request issued by `source_cluster`.
///
/// Unicast requests yield the linear hop path; multicast requests fork at
/// the source group crossbar, again at the top level for every remote group,
/// and once more inside each remote group. Unmapped targets route to the
/// source group's error slave.
pub fn route_path(
    topo: &Topology,
    source_cluster: usize,
    target: &AddrSet,
) -> Result<Vec<RouteHop>, ConfigError> {
    if source_cluster >= topo.num_clusters() {
        return Err(ConfigError::BadParameter(format!(
            "source cluster {source_cluster} out of range"
        )));
    }
    let flat = topo.flat_map();
    let res = decode(target, &flat).map_err(|e| ConfigError::BadParameter(e.to_string()))?;
    let src_group = topo.group_of(source_cluster);
    let mut dest_groups: Vec<usize> = Vec::new();
    let mut local = 0usize;
    let mut llc = false;
    for s in res.select.iter() {
        if s == topo.num_clusters() {
            llc = true;
        } else if topo.group_of(s) == src_group {
            local += 1;
        } else if !dest_groups.contains(&topo.group_of(s)) {
            dest_groups.push(topo.group_of(s));
        }
    }
    let mut hops = Vec::new();
    let uplink = if !dest_groups.is_empty() || llc { 1 } else { 0 };
    let err_local = if res.error_route { 1 } else { 0 };
    hops.push(RouteHop {
        xbar: format!("g{src_group}"),
        fanout: local + uplink + err_local,
    });
    if uplink > 0 {
        hops.push(RouteHop {
            xbar: "top".to_string(),
            fanout: dest_groups.len() + usize::from(llc),
        });
        for h in &dest_groups {
            let locals = res
                .select
                .iter()
                .filter(|s| *s < topo.num_clusters() && topo.group_of(*s) == *h)
                .count();
            hops.push(RouteHop {
                xbar: format!("g{h}"),
                fanout: locals,
            });
        }
    }
    Ok(hops)
}

/// Destination cluster set of a request, per the flat address map.
pub fn flat_destinations(topo: &Topology, target: &AddrSet) -> PortSet {
    let flat = topo.flat_map();
    let res = decode(target, &flat).expect("flat map has no non-multicast cluster rules");
    let mut out = PortSet::EMPTY;
    for s in res.select.iter() {
        if s < topo.num_clusters() {
            out.insert(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let t = Topology::default();
        assert_eq!(t.num_groups, 8);
        assert_eq!(t.clusters_per_group, 4);
        assert_eq!(t.num_clusters(), 32);
        t.validate().unwrap();
    }

    #[test]
    fn bad_stride_is_rejected() {
        let mut t = Topology::default();
        t.cluster_stride = 0x30000;
        assert_eq!(
            t.validate(),
            Err(ConfigError::StrideNotPowerOfTwo(0x30000))
        );
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let t = Topology::from_toml("num_groups = 2\nclusters_per_group = 4\n").unwrap();
        assert_eq!(t.num_clusters(), 8);
        assert_eq!(t.llc_latency, 20);
        assert!(Topology::from_toml("nonsense_key = 1").is_err());
    }

    #[test]
    fn cluster_span_masks() {
        let t = Topology::default();
        assert_eq!(
            t.cluster_span(32, 0).unwrap(),
            AddrSet::new(0x0100_0000, 0x7C_0000)
        );
        assert_eq!(
            t.cluster_span(8, 0x40).unwrap(),
            AddrSet::new(0x0100_0040, 0x1C_0000)
        );
        assert!(t.cluster_span(3, 0).is_err());
    }

    #[test]
    fn flat_map_rules() {
        let t = Topology::default();
        let map = t.flat_map();
        assert_eq!(map.len(), 33);
        assert_eq!(map[2].start, 0x0108_0000);
        assert!(map[31].multicast);
        assert!(!map[32].multicast);
    }

    #[test]
    fn route_path_examples() {
        let t = Topology::default();
        // Same group: one hop.
        let hops = route_path(&t, 0, &AddrSet::unicast(t.cluster_addr(1, 0))).unwrap();
        assert_eq!(hops.len(), 1);
        assert_eq!(hops[0], RouteHop { xbar: "g0".into(), fanout: 1 });

        // Cross-group unicast: source group, top, destination group.
        let hops = route_path(&t, 0, &AddrSet::unicast(t.cluster_addr(5, 0))).unwrap();
        let names: Vec<&str> = hops.iter().map(|h| h.xbar.as_str()).collect();
        assert_eq!(names, vec!["g0", "top", "g1"]);
        assert!(hops.iter().all(|h| h.fanout == 1));

        // Full broadcast: forks to 4 local + uplink, 7 remote groups at the
        // top (the source group is served below), 4 clusters in each.
        let all = t.cluster_span(32, 0).unwrap();
        let hops = route_path(&t, 0, &all).unwrap();
        assert_eq!(hops.len(), 9);
        assert_eq!(hops[0], RouteHop { xbar: "g0".into(), fanout: 5 });
        assert_eq!(hops[1], RouteHop { xbar: "top".into(), fanout: 7 });
        for h in &hops[2..] {
            assert_eq!(h.fanout, 4);
        }
        let total: usize = hops[2..].iter().map(|h| h.fanout).sum::<usize>() + 4;
        assert_eq!(total, 32);

        // Unmapped: error route at the source group.
        let hops = route_path(&t, 0, &AddrSet::unicast(0xF000_0000)).unwrap();
        assert_eq!(hops.len(), 1);
        assert_eq!(hops[0].fanout, 1);
    }

    #[test]
    fn per_level_decode_matches_flat_decode() {
        let t = Topology::default();
        // The union of destinations reached through the hierarchy equals the
        // flat decode for a variety of spans.
        for (n, offset) in [(2usize, 0u64), (4, 0x80), (8, 0), (16, 0x1000), (32, 0)] {
            let target = t.cluster_span(n, offset).unwrap();
            let flat = flat_destinations(&t, &target);
            assert_eq!(flat.len(), n);

            // Per-level walk: the top level selects groups, each group
            // crossbar's local rules select the delivered clusters.
            let top_res = decode(&target, &t.top_map()).unwrap();
            let mut reached = PortSet::EMPTY;
            for g in 0..t.num_groups {
                let local: Vec<AddressRule> = t
                    .group_map(g)
                    .into_iter()
                    .filter(|r| r.slave_index < t.clusters_per_group)
                    .collect();
                let res = decode(&target, &local).unwrap();
                if !res.select.is_empty() {
                    assert!(top_res.select.contains(g));
                }
                for s in res.select.iter() {
                    reached.insert(g * t.clusters_per_group + s);
                }
            }
            assert_eq!(reached, flat);
        }
    }
}
