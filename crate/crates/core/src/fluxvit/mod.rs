//! The FluxViT video transformer.
//!
//! Tokens pass through dual patch normalization (layer norm before and after
//! the patch projection), receive a global-local positional embedding (a
//! sine-cosine table resized to the current grid, smoothed by a depthwise 3-D
//! convolution and gathered at the selected coordinates), and then run through
//! pre-norm blocks whose attention adds a per-head linear projection of the
//! values: `Z = softmax(QKᵀ/√d)·V + V·W_lpe`.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex};
pub use model::{
    attention_lpe, bind, embed_pool, forward, glpe, gradcheck_model, patch_embed_dpn, project, AttentionOutput,
    Bound, ForwardOutput,
};
pub use params::{init_params, sincos_3d, FluxViTParams, ParamSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FluxViTConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Largest token grid `(T', Gh, Gw)` the positional table covers.
    pub pe_grid: [usize; 3],
    pub patch: [usize; 3],
    pub channels: usize,
    pub dw_kernel: usize,
    pub num_classes: usize,
    /// Output width of the alignment projection head.
    pub proj_dim: usize,
    #[serde(default = "yes")]
    pub use_pre_ln: bool,
    #[serde(default = "yes")]
    pub use_dw_conv: bool,
    #[serde(default = "yes")]
    pub use_lpe: bool,
}

fn yes() -> bool {
    true
}

impl FluxViTConfig {
    /// Student used for desk-scale fine-tuning on 56×56 clips.
    pub fn desk_student() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            pe_grid: [16, 4, 4],
            patch: [1, 14, 14],
            channels: 3,
            dw_kernel: 3,
            num_classes: 4,
            proj_dim: 128,
            use_pre_ln: true,
            use_dw_conv: true,
            use_lpe: true,
        }
    }

    /// Wider, deeper model used as the frozen alignment teacher.
    pub fn desk_teacher() -> Self {
        Self {
            d_model: 128,
            proj_dim: 128,
            ..Self::desk_student()
        }
    }

    /// Small model for finite-difference checks: 10×2×2 = 40 tokens of 14×14 clips.
    pub fn tiny() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            depth: 2,
            mlp_ratio: 4,
            pe_grid: [12, 3, 3],
            patch: [1, 7, 7],
            channels: 3,
            dw_kernel: 3,
            num_classes: 4,
            proj_dim: 16,
            use_pre_ln: true,
            use_dw_conv: true,
            use_lpe: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid_config(format!(
                "model: d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(16) {
            return Err(invalid_config(format!(
                "model: d_model {} must be a positive multiple of 16 for the 3-D sine-cosine table",
                self.d_model
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes == 0 || self.proj_dim == 0 {
            return Err(invalid_config("model: depth, mlp_ratio, num_classes, proj_dim must be positive"));
        }
        if self.pe_grid.contains(&0) || self.patch.contains(&0) || self.channels == 0 {
            return Err(invalid_config("model: pe_grid, patch and channels must be positive"));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(invalid_config("model: dw_kernel must be odd"));
        }
        Ok(())
    }
}
