//! Semantic appearance matching for dual-branch diffusion sampling.
//!
//! A reference branch (an inverted example image) and a target branch are
//! denoised side by side. At each gated step the engine matches decoder
//! features between the branches, warps the reference self-attention values
//! onto the target layout, keeps only matches that survive a cycle check
//! inside the subject mask, and nudges the target noise prediction toward
//! the warped reference clean latent.

pub mod attention;
pub mod backend;
pub mod consistency;
pub mod error;
pub mod guidance;
pub mod matching;
pub mod sampler;
pub mod tensors;

pub use error::{Error, Result};
