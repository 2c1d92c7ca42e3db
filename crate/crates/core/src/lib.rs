//! Mixture-of-memories linear recurrent layers.
//!
//! The layer keeps several matrix-valued memory states, routes each token
//! to the top-k of them, updates only those (plus an always-on shared
//! memory) and reads the routing-weighted mixture with a shared query.
//!
//! Modules, bottom-up:
//! - [`kernels`]: the update rules (linear attention, RetNet, GLA, DeltaNet,
//!   Gated DeltaNet, TTT, Titans, Mamba2, HGRN2, RWKV6, RWKV7), `read`, `scan`
//! - [`router`]: softmax top-k routing and the load-balance loss
//! - [`layer`]: parameters, state, and the token-by-token reference forward
//! - [`varlen`]: bucketed execution (gather, per-memory scans, scatter)
//! - [`grad`]: analytic backward, the parallel-form oracle, finite differences
//! - [`recall`]: associative recall data, model stack, training and comparisons
//! - [`checks`]: randomized equivalence and gradient checks used by the CLI
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `*F32`/`*F64`
//! aliases below name the common instantiations.

pub mod checks;
pub mod error;
pub mod grad;
pub mod kernels;
pub mod layer;
pub mod params;
pub mod recall;
pub mod router;
pub mod scalar;
pub mod tensor;
pub mod varlen;

pub use error::{Error, Result};
pub use kernels::{GateValues, MemoryState, RuleKind, UpdateRule};
pub use layer::{LayerConfig, MomLayerParams, MomState};
pub use params::Parameters;
pub use router::{RouterDecision, RouterParams};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type MatrixF32 = Matrix<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type MomLayerF32 = MomLayerParams<f32>;
pub type MomLayerF64 = MomLayerParams<f64>;
pub type MemoryStateF64 = MemoryState<f64>;
