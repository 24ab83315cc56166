//! Deformable kernel-region pixel synthesis for video frame interpolation.
//!
//! Two reference frames are warped towards a missing middle frame using
//! flow, per-pixel 4×4 interpolation kernels and per-reference-point offsets,
//! then blended with an occlusion map. Every learnable input has an analytic
//! gradient, audited against finite differences in [`gradcheck`].
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the working precision to `f64`.

pub mod blend;
pub mod demo;
pub mod error;
pub mod flow;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod warp;

pub use blend::{blend, blend_frames, blend_grads, BlendGradients};
pub use error::{Error, Result};
pub use flow::{fill_holes, project_flow, synthetic_flow, FlowPattern, HoleMask, ProjectionReport};
pub use grad::{grad_flow, grad_image, grad_kernel, grad_offset, warp_backward};
pub use gradcheck::{finite_difference_audit, AuditConfig, AuditReport, Family};
pub use io::{read_image, read_tensor, write_image, write_tensor};
pub use loss::{charbonnier, charbonnier_derivative, total_loss, LossConfig};
pub use metrics::{format_metrics, psnr, ssim};
pub use scalar::Scalar;
pub use tensor::bilinear_sample;
pub use warp::{
    classify_quadrant, fractional_parts, quadrant_weights, synthesize_pixel, warp_frame, warp_plane,
    KernelGeometry, Quadrant,
};

pub type Plane = tensor::Plane<f64>;
pub type FieldMap = tensor::FieldMap<f64>;
pub type PixelCoord = tensor::PixelCoord<f64>;
pub type FlowField = flow::FlowField<f64>;
pub type KernelCoeffMap = warp::KernelCoeffMap<f64>;
pub type OffsetField = warp::OffsetField<f64>;
pub type WarpParams = warp::WarpParams<f64>;
pub type WarpInputs<'a> = warp::WarpInputs<'a, f64>;
pub type WarpGradients = grad::WarpGradients<f64>;
pub type OcclusionMap = blend::OcclusionMap<f64>;
pub type FrameTriple = demo::FrameTriple<f64>;
pub type TrainableMaps = demo::TrainableMaps<f64>;

pub type Plane32 = tensor::Plane<f32>;
pub type FieldMap32 = tensor::FieldMap<f32>;
