//! Gradient engines with exact cost accounting.
//!
//! Three interchangeable ways to obtain a descent direction for a chain
//! model or a synthetic objective:
//!
//! * [`reverse_ad`]: backpropagation, vanilla or with segment checkpointing.
//! * [`forward_ad`]: tangent propagation giving a Jacobian-vector product and
//!   the forward gradient `jvp·v`.
//! * [`zero_order`]: central finite differences along seeded random
//!   directions.
//!
//! [`variants`] wraps the two estimators with perturbation averaging,
//! accumulation, adaptive directions, SVRG and sparse masks. Every engine
//! charges a [`FlopCounter`] and reports peak activation memory in
//! activation units (stored `f64` scalars).

pub mod analysis;
pub mod error;
pub mod estimate;
pub mod forward_ad;
pub mod memory;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod reverse_ad;
pub mod seed;
pub mod tensor;
pub mod variants;
pub mod zero_order;

pub use error::{Error, Result};
pub use estimate::{GradEstimate, Method};
pub use memory::MemoryMeter;
pub use objective::{Eval, Objective};
pub use tensor::{FlopCounter, Tensor};
