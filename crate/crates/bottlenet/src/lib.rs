//! Split-computing toolkit: small dense conv nets with reverse-mode autodiff,
//! an insertable bottleneck unit with a lossy feature codec, cost profiling
//! over wireless network models, partition planning, and a framed TCP split
//! inference runtime.

pub mod bottleneck;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod planner;
pub mod profile;
pub mod protocol;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
