//! Blur-aware attention network (BANet) for single-image motion deblurring.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: NCHW tensors and primitive operators with explicit backward passes.
//! - [`attention`]: strip pooling (SP), multi-kernel strip pooling (MKSP),
//!   attention refinement (AR) and the blur-aware attention (BA) block.
//! - [`blocks`]: parallel dilated convolutions (PDC, CPDC), the blur-aware
//!   module (BAM), the full network and its ablation variants, plus analytic
//!   parameter and FLOP counters.
//! - [`loss`], [`fft`], [`metrics`]: Charbonnier + frequency-domain training
//!   loss, PSNR and SSIM.
//! - [`train`]: Adam, cosine learning-rate schedule, augmentation, synthetic
//!   motion blur, datasets, the training loop and evaluation.
//! - [`checkpoint`]: versioned binary checkpoints.
//! - [`infer`], [`io`]: padded and tiled inference, PNG input and output.
//! - [`oracle`]: slow, independent reference implementations and the
//!   finite-difference gradient checker; [`gradcheck`] runs it over every
//!   operator and block.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod infer;
pub mod instrument;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod oracle;
pub mod params;
mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Block, Module};
pub use scalar::Scalar;
pub use tensor::{ConvParams, ConvSpec, Shape4, Tensor};
