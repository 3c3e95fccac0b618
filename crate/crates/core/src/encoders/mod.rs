//! Frozen image/text encoders and the trainable point-cloud encoder.

mod frozen;
mod point;

pub use frozen::{
    frozen_image_embed, frozen_text_embed, orthonormal_rows, DomainShift, FrozenEncoderSpec,
    LatentSplit, MAX_SHIFT_CONDITION,
};
pub use point::{
    point_encode, point_encode_batch, point_encode_traced, PointCloud, PointEncoderGrads,
    PointEncoderParams, PointTrace, MIN_POINTS,
};
