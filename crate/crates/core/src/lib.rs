//! Block-parallel prefill attention for long multimodal prompts.
//!
//! A prompt of system text, video frames and a question is split into a sink
//! block, frame-aligned context blocks and a question block. Context blocks
//! are encoded independently against the shared sink, which reduces prefill
//! attention from quadratic to linear in the number of frames. The crate
//! provides:
//!
//! - [`attention`]: dense masked multi-head attention, the reference path;
//! - [`layout`]: token layouts, partitions and their equivalent dense masks;
//! - [`positions`]: sequential or reused position ids and rotary embeddings;
//! - [`engine`]: the partitioned prefill and decode steps;
//! - [`costmodel`]: analytic operation counts and latency-budget search.

pub mod attention;
pub mod costmodel;
pub mod engine;
mod error;
pub mod layout;
pub mod method;
pub mod positions;

pub use attention::{mha, sdpa, stable_softmax, HeadLayout, MaskSpec, Matrix, Real};
pub use costmodel::{op_from_mask, op_full, op_pevlm, CostParams, CostReport};
pub use engine::{generate_states, Engine, KvCache, Prefill, Qkv, Schedule};
pub use error::{Error, Result};
pub use layout::{encode_mask, partition, BlockPartition, SequenceLayout, Span};
pub use method::{MethodConfig, Preset, SinkMode};
pub use positions::{assign_positions, FrameGrid, MRopeSplit, PositionMap, PositionMode, RopeScheme};
