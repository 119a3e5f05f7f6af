//! Desk-scale laboratory for attention-intervention experiments: a minimal
//! multi-head causal decoder with an AFIP score-modulation hook, the
//! attention diagnostics used to motivate it, a synthetic grounding harness
//! that induces and measures a hallucination analog, and property checks for
//! the associated generalization bounds.

pub mod afip;
pub mod attn_core;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod theory;

pub use error::{CoreError, Result};
