//! A self-contained, desk-scale text-to-speech stack built from four
//! cooperating models: a spectrogram tokenizer, an autoregressive prior over
//! speech tokens, a contrastive text/speech reranker, and a diffusion
//! decoder, plus the end-to-end training and inference pipeline.

pub mod error;
pub mod ar;
pub mod audio;
pub mod clvp;
pub mod diffusion;
pub mod nn;
pub mod numerics;
pub mod par;
pub mod textdata;
pub mod vqvae;

pub use error::{Error, Result};
