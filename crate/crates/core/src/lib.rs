#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod components;
pub mod config;
pub mod maxflow;
pub mod error;
pub mod evaluation;
pub mod geodesic;
pub mod gmm;
pub mod grabcut;
pub mod mvol;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod render;
pub mod scribble;
pub mod tps;
pub mod tracker;
pub mod volume;

pub use error::{Result, SegError};
pub use volume::{Frame, Label, LabelVolume, SliceAxis, Volume};
