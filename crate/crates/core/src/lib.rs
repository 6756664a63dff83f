//! Synchronous-round simulator for building bounded-degree expander overlays
//! on top of an arbitrary connected gossip network.
//!
//! The crate is layered bottom-up: [`graph`] holds the multigraph and the
//! measurements, [`engine`] runs rounds and random walks with message
//! accounting, [`sketch`] and [`pushsum`] let a cluster sample an outgoing
//! edge, [`expander`] turns a cluster into a bounded-degree expander, and
//! [`overlay`] stitches everything into the staged protocol. [`harness`]
//! generates inputs and runs experiments.

pub mod engine;
pub mod expander;
pub mod graph;
pub mod harness;
pub mod overlay;
pub mod pushsum;
pub mod rng;
pub mod sketch;

pub use graph::{NodeId, OverlayGraph};
