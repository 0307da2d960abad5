//! Functional simulator and cost model for look-up-table based FP-INT GEMM.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] - floating-point format emulation, matrices, seeded data and
//!   the `FGLT` matrix file format.
//! * [`bcq`] - binary-coding quantization (with offset), RTN uniform
//!   quantization and the exact uniform-to-BCQ embedding.
//! * [`lut`] - full and half flip-flop look-up tables and the adder tree that
//!   generates them.
//! * [`engines`] - the GEMM engines and the weight-stationary bit-plane
//!   dataflow that drives them.
//! * [`perf`] - event traces, cycle/energy/area models, the bank-conflict
//!   simulator and derived efficiency metrics.

pub mod bcq;
pub mod engines;
pub mod lut;
pub mod numerics;
pub mod perf;

pub use bcq::{BcqMatrix, UniformQuant};
pub use engines::{EngineConfig, EngineKind, GemmResult, Weights};
pub use perf::{CostModel, EventTrace, GemmDims};

pub use numerics::{FpFormat, Matrix};
