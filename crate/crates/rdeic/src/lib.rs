//! Relay residual diffusion image codec.
//!
//! An end-to-end learned image codec whose decoder starts its denoising
//! loop from the compressed latent features (plus schedule-level noise)
//! instead of pure noise, removes the compression residual and the noise
//! jointly, and writes real entropy-coded bitstreams.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`schedule`]: beta/alpha sequences and the relay weight sequence.
//! - [`sampler`]: forward mixing, reverse steps, step plans, guidance,
//!   and the reconstruction loop.
//! - [`nn`]: small trainable networks with a tape-based reverse-mode
//!   differentiator, validated against finite differences.
//! - [`entropy`]: quantization, vector-quantized side information, the
//!   checkerboard context model, and differentiable rate estimation.
//! - [`coder`]: the lossless range coder behind the rate model.
//! - [`train`]: the two-stage training pipeline.
//! - [`codec`]: the bitstream format and compress/decompress entry
//!   points.
//! - [`metrics`] / [`eval`]: PSNR, MS-SSIM, bpp, and grid evaluation.
//!
//! The `rrd` binary exposes `compress`, `decompress`, `eval`, `train`,
//! and `gen-corpus` subcommands; the book under `book/` walks through
//! the math with runnable snippets.

pub mod codec;
pub mod coder;
pub mod element;
pub mod entropy;
pub mod eval;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod schedule;

pub use error::{Error, Result};

// Book chapters run as doc-tests so the guide stays in sync with the
// code. `cfg(doctest)` keeps these out of the compiled library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }
    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Schedule, "../../../book/src/schedule.md");
    chapter!(Sampler, "../../../book/src/sampler.md");
    chapter!(Entropy, "../../../book/src/entropy.md");
    chapter!(Coder, "../../../book/src/coder.md");
    chapter!(Bitstream, "../../../book/src/bitstream.md");
    chapter!(Training, "../../../book/src/training.md");
    chapter!(Cli, "../../../book/src/cli.md");
    chapter!(Acceptance, "../../../book/src/acceptance.md");
}
