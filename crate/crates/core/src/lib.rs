//! Automatic fixed-point quantization of time-stepped simulations.
//!
//! A full-precision run records per-quantity ranges; a reverse sweep
//! accumulates squared adjoints of the evaluation function; closed-form
//! solvers then pick fraction bits for an error bound or a memory budget,
//! and the quantized run stores every quantity with dithered rounding in
//! bit-packed buffers.

pub mod adjoint;
pub mod bitpack;
pub mod qtypes;
pub mod quantity;
pub mod quantizer;
pub mod sims;
