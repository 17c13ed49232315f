//! Heatmap feedback pooling, multi-stream skeleton graph co-learning, text
//! refinement and text-video score fusion for action recognition.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod fpm;
pub mod fsutil;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod seed;
pub mod smclm;
pub mod synthgen;
pub mod topology;
pub mod train;
pub mod trmm;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
