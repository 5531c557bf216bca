//! Convolution, deformable convolution and position-sensitive ROI pooling.

pub mod conv;
pub mod deform;
pub(crate) mod gemm;
pub mod psroi;
