//! Dual chunk attention (DCA): training-free context extension for RoPE
//! models by remapping query and key position indices per chunk.
//!
//! * [`schedules`]: position-index schedules and the relative position matrix.
//! * [`rope`]: rotary embedding with real-valued positions.
//! * [`attention`]: brute-force oracle, the three-pass chunked kernel and a KV cache.
//! * [`model`], [`train`], [`checkpoint`]: a byte-level toy transformer.
//! * [`eval`]: sliding-window perplexity, passkey retrieval and ablations.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod model;
pub mod rope;
pub mod schedules;
pub mod tensor;
pub mod train;

pub use attention::{AttentionMode, AttentionPartial};
pub use error::{Error, Result};
pub use model::{init_model, ModelCheckpoint, ModelConfig, ToyModel};
pub use schedules::{ChunkConfig, ConfigError};
pub use tensor::{Matrix, Real};
