//! An untrained, underparameterized, non-convolutional image-generating
//! network and its optimization-based fitting procedure.
//!
//! A fixed random tensor is pushed through a handful of layers, each a
//! per-pixel linear combination of channels followed by upsampling, ReLU,
//! and channel normalization, with a sigmoid head producing the image. The
//! only trainable state is the small set of mixing weights, so fitting the
//! network to a single observation acts as an image prior: it can compress
//! an image into its weights and regularize denoising, super-resolution,
//! and inpainting without any training data.
//!
//! Modules:
//! - [`tensor`]: dense arrays and elementwise/linear-algebra kernels
//! - [`decoder`]: the architecture, parameter counting, upsampler family
//! - [`autograd`]: exact reverse-mode gradients and a finite-difference check
//! - [`optim`]: Adam / gradient descent and the fit loop
//! - [`inverse`]: measurement operators, noise synthesis, PSNR
//! - [`baselines`]: wavelet thresholding and bicubic interpolation
//! - [`theory`]: executable versions of the analytical guarantees
//! - [`synth`]: deterministic procedural test images
//! - [`imgio`]: 8-bit PNG input/output

pub mod autograd;
pub mod baselines;
pub mod decoder;
pub mod error;
pub mod imgio;
pub mod inverse;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod theory;

pub use autograd::{finite_diff_check, loss_and_grad, FiniteDiffReport, GradSet};
pub use decoder::{
    channel_norm, forward, layer_activations, make_input, param_count, param_count_conv,
    upsample, DecoderConfig, FixedInput, ParamSet, Upsampler,
};
pub use error::{Error, Result};
pub use inverse::{add_noise, mse, psnr, sigma_for_input_psnr, ForwardOp, Observation};
pub use optim::{fit, FitOptions, FitReport, Method, SnapshotPolicy};
pub use tensor::{matmul_channels, relu, sigmoid, ChannelStack, Matrix};
