//! Frame + event multi-domain object tracking.
//!
//! The crate covers the whole pipeline: synthesizing event streams from
//! frames ([`simulator`]), stacking events into count and timestamp images
//! ([`repr`]), a Spike Response Model branch for raw events ([`snn`]), a
//! hand-written CNN engine ([`nn`]) assembled into the fused three-branch
//! classifier ([`net`]), an online tracker ([`tracker`]) and benchmark
//! metrics ([`metrics`]).

pub mod bbox;
pub mod error;
pub mod events;
pub mod frames;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod repr;
pub mod simulator;
pub mod snn;
pub mod tensor;
pub mod tracker;

pub use bbox::{iou, BBox};
pub use error::{Error, Result};
pub use events::{Event, EventStream, Polarity, TimeWindow};
pub use tensor::Tensor;
