//! Cycle-stepped simulator and analysis toolkit for a multicast-capable
//! AXI-style crossbar network.
//!
//! The crate models the write channels (AW, W, B) of a hierarchical
//! crossbar interconnect in which a request can carry multiple destination
//! addresses as a base/don't-care-mask pair. On top of the network model it
//! provides DMA-driven workloads (a one-to-all copy microbenchmark and a
//! double-buffered tiled matrix multiplication), traffic monitors that
//! check the protocol's ordering and conservation rules, and roofline /
//! scaling analytics over the measured traffic.

pub mod addr;
pub mod dma;
pub mod monitors;
pub mod network;
pub mod protocol;
pub mod sim;
pub mod topology;
pub mod workloads;
pub mod xbar;
