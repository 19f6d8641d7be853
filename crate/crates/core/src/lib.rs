//! Learnable heterogeneous convolution (LHC).
//!
//! Convolution layers whose per-block kernel-slice topology is learned
//! together with the weights under a global density target, plus tooling
//! around them: FLOP accounting, constructors that reduce an LHC layer to
//! grouped, depthwise and heterogeneous-kernel convolutions, a clock-level
//! simulator of a structured-sparse inference datapath, and topology
//! diagnostics.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod degeneration;
pub mod error;
pub mod hw_sim;
pub mod layer;
pub mod model;
pub mod objective;
pub mod shapes;
pub mod tensor;
pub mod train;

pub use error::{LhcError, Result};
