//! Multi-stream fusion network with baseline, modified, multi-task,
//! two-stream, and hierarchical action prediction variants, optional
//! self-attention over the pairs of an image, and an object-embedding
//! regression head.

pub mod config;
pub mod network;
pub mod pair;

pub use config::{ModelConfig, Variant, N_STREAMS};
pub use network::{
    compose_hierarchical, joint_hoi, joint_hoi_backward, ActionPrediction, HoiModel, ImageForward,
    ImageGrads,
};
pub use pair::{group_by_image, EmbeddingTable, PairExample, RawPairExample};

use crate::error::Result;

/// Finite-difference check of whatever gradients are currently accumulated
/// in the model's store, against a loss evaluated on perturbed copies of
/// the model.
pub fn finite_diff_check_model<F>(model: &mut HoiModel, step: f64, loss: F) -> Result<f64>
where
    F: Fn(&HoiModel) -> Result<f64>,
{
    let base = model.clone();
    crate::nn::finite_diff_check(&mut model.store, step, |store| {
        let mut scratch = base.clone();
        scratch.store = store.clone();
        loss(&scratch)
    })
}
