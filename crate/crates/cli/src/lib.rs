//! File formats, plotting and experiment pipelines behind the `msg` binary.
//!
//! The algorithmic substance lives in `msg-core`; this crate adds everything
//! that touches the filesystem: demo files, checkpoints, manifests, result
//! tables, SVG figures, and the gen/train/eval/ablate/toy commands.

pub mod commands;
pub mod config;
pub mod formats;
pub mod pipeline;
pub mod plot;
