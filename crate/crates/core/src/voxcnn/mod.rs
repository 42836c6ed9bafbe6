//! The volumetric regressor, its input assembly and its checkpoint format.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{parse_extent, HeadInput, Stage, VoxCnnConfig};
pub use model::{ConvBn, Dense, ForwardOutput, Predictions, VoxCnnModel};

use crate::volgrad::Tensor;
use crate::{Error, Result, Scalar};

/// Stacks a T1 volume and its gray-matter mask as channels 0 and 1.
pub fn stack_channels<T: Scalar>(subject: &str, t1: &Tensor<T>, gm_mask: &Tensor<T>) -> Result<Tensor<T>> {
    if t1.rank() != 3 || t1.shape() != gm_mask.shape() {
        return Err(Error::data(format!(
            "subject {subject}: T1 extents {:?} and gray-matter mask extents {:?} differ",
            t1.shape(),
            gm_mask.shape()
        )));
    }
    let s = t1.shape();
    let mut data = Vec::with_capacity(2 * t1.numel());
    data.extend_from_slice(t1.data());
    data.extend_from_slice(gm_mask.data());
    Tensor::new(&[2, s[0], s[1], s[2]], data)
}

/// Inverse of [`stack_channels`].
pub fn unstack_channels<T: Scalar>(stacked: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = stacked.shape();
    if s.len() != 4 || s[0] != 2 {
        return Err(Error::config(format!("expected a [2, D, H, W] tensor, got {s:?}")));
    }
    let half = stacked.numel() / 2;
    let ext = &s[1..];
    Ok((
        Tensor::new(ext, stacked.data()[..half].to_vec())?,
        Tensor::new(ext, stacked.data()[half..].to_vec())?,
    ))
}
