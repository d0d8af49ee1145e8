//! Region-aware interaction attention for latent video diffusion, at desk
//! scale.
//!
//! The crate is built on a small deterministic tensor type ([`Tensor`]) and a
//! reverse-mode tape ([`Tape`]). On top of those sit the learnable interaction
//! latents and their orthogonality penalty ([`latents`]), soft
//! nearest-neighbor quantization ([`softquant`]), the region attention block
//! ([`attention`]), identity injection ([`id_preserver`]) and the
//! region-amplified objective ([`losses`]). [`pipeline`] wires them into a
//! toy denoiser trained on synthetic interaction clips from [`synthdata`].
//!
//! The guide under `book/` walks through each piece; its snippets are
//! compiled and run as doctests of this crate.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod id_preserver;
pub mod latents;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod softquant;
pub mod suite;
pub mod synthdata;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/region-attention.md")]
    mod region_attention {}
    #[doc = include_str!("../../../book/src/identity.md")]
    mod identity {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
