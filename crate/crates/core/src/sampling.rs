//! Flexible spatiotemporal sampling and patchification.
//!
//! A [`SamplerConfig`] spans a lattice of frame counts and square resolutions;
//! only lattice points whose token pool falls inside `[pool_min, pool_max]`
//! are candidates. Sampling is uniform over the filtered lattice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, FluxError, Result};
use crate::rng::rng_for;
use crate::tensor::{kernels, Tensor};
use crate::videogen::VideoSample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub f_min: usize,
    pub f_max: usize,
    pub t_step: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub r_step: usize,
    pub pool_min: usize,
    pub pool_max: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl Default for SamplerConfig {
    /// The full-scale defaults: frames 4..=24 step 2, resolutions 168..=252
    /// step 28, pool within [2048, 4096], patch 1×14×14.
    fn default() -> Self {
        Self {
            f_min: 4,
            f_max: 24,
            t_step: 2,
            r_min: 168,
            r_max: 252,
            r_step: 28,
            pool_min: 2048,
            pool_max: 4096,
            patch_t: 1,
            patch_h: 14,
            patch_w: 14,
        }
    }
}

impl SamplerConfig {
    /// Desk-scale lattice for 56×56, 16-frame clips.
    pub fn desk() -> Self {
        Self {
            f_min: 4,
            f_max: 16,
            t_step: 2,
            r_min: 28,
            r_max: 56,
            r_step: 14,
            pool_min: 32,
            pool_max: 256,
            patch_t: 1,
            patch_h: 14,
            patch_w: 14,
        }
    }

    pub fn patch(&self) -> [usize; 3] {
        [self.patch_t, self.patch_h, self.patch_w]
    }

    pub fn frame_values(&self) -> Vec<usize> {
        lattice(self.f_min, self.f_max, self.t_step)
    }

    pub fn resolution_values(&self) -> Vec<usize> {
        lattice(self.r_min, self.r_max, self.r_step)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_t == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(invalid_config("sampler: patch dims must be positive"));
        }
        if self.f_min == 0 || self.f_min > self.f_max {
            return Err(invalid_config("sampler: need 0 < f_min <= f_max"));
        }
        if self.r_min == 0 || self.r_min > self.r_max {
            return Err(invalid_config("sampler: need 0 < r_min <= r_max"));
        }
        if (self.f_min < self.f_max && self.t_step == 0) || (self.r_min < self.r_max && self.r_step == 0) {
            return Err(invalid_config("sampler: steps must be positive for non-degenerate ranges"));
        }
        if self.pool_min > self.pool_max {
            return Err(invalid_config("sampler: pool_min > pool_max"));
        }
        if let Some(f) = self.frame_values().into_iter().find(|f| f % self.patch_t != 0) {
            return Err(invalid_config(format!(
                "sampler: frame count {f} not divisible by patch_t {}",
                self.patch_t
            )));
        }
        if let Some(r) = self
            .resolution_values()
            .into_iter()
            .find(|r| r % self.patch_h != 0 || r % self.patch_w != 0)
        {
            return Err(invalid_config(format!(
                "sampler: resolution {r} not divisible by patch {}x{}",
                self.patch_h, self.patch_w
            )));
        }
        if self.unfiltered().iter().all(|g| !self.admits(g.pool)) {
            return Err(invalid_config("sampler: no (frames, resolution) candidate inside the pool threshold"));
        }
        Ok(())
    }

    fn admits(&self, pool: usize) -> bool {
        (self.pool_min..=self.pool_max).contains(&pool)
    }

    fn unfiltered(&self) -> Vec<SamplingGrid> {
        let mut out = Vec::new();
        for f in self.frame_values() {
            for r in self.resolution_values() {
                out.push(SamplingGrid::new(f, r, self.patch()));
            }
        }
        out
    }
}

fn lattice(min: usize, max: usize, step: usize) -> Vec<usize> {
    if step == 0 {
        return vec![min];
    }
    (min..=max).step_by(step).collect()
}

/// A concrete (frames, resolution) choice and the token grid it induces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub frames: usize,
    pub resolution: usize,
    pub patch: [usize; 3],
    pub t: usize,
    pub gh: usize,
    pub gw: usize,
    pub pool: usize,
}

impl SamplingGrid {
    /// Assumes the divisibility checked by [`SamplerConfig::validate`].
    pub fn new(frames: usize, resolution: usize, patch: [usize; 3]) -> Self {
        let t = frames / patch[0];
        let gh = resolution / patch[1];
        let gw = resolution / patch[2];
        Self {
            frames,
            resolution,
            patch,
            t,
            gh,
            gw,
            pool: t * gh * gw,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.t, self.gh, self.gw]
    }

    pub fn spatial(&self) -> usize {
        self.gh * self.gw
    }

    pub fn index_of(&self, coord: [usize; 3]) -> usize {
        (coord[0] * self.gh + coord[1]) * self.gw + coord[2]
    }

    pub fn coord_of(&self, index: usize) -> [usize; 3] {
        let s = self.spatial();
        [index / s, (index % s) / self.gw, index % self.gw]
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch.iter().product::<usize>() * channels
    }
}

/// Every admissible grid, frames ascending then resolution ascending.
pub fn candidates(cfg: &SamplerConfig) -> Result<Vec<SamplingGrid>> {
    cfg.validate()?;
    Ok(cfg.unfiltered().into_iter().filter(|g| cfg.admits(g.pool)).collect())
}

/// Uniform draw over [`candidates`].
pub fn sample_grid(seed: u64, cfg: &SamplerConfig) -> Result<SamplingGrid> {
    let cands = candidates(cfg)?;
    let mut rng = rng_for(seed, "sampler.grid");
    Ok(cands[rng.random_range(0..cands.len())])
}

/// Patchified clip: one row of raw pixels per token, in row-major `(t,h,w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPool {
    pub features: Tensor,
    pub coords: Vec<[usize; 3]>,
    pub grid: SamplingGrid,
    pub channels: usize,
}

impl TokenPool {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Frame indices spaced uniformly over the clip, starting at 0.
pub fn frame_indices(source_frames: usize, frames: usize) -> Vec<usize> {
    (0..frames).map(|i| i * source_frames / frames).collect()
}

/// Temporal selection plus bilinear (align-corners) spatial resize, giving a
/// `[F, R, R, C]` tensor.
pub fn resample_video(video: &VideoSample, grid: &SamplingGrid) -> Result<Tensor> {
    let (t, h, w, c) = (video.t(), video.h(), video.w(), video.c());
    if t < grid.frames {
        return Err(FluxError::InvalidInput(format!(
            "video has {t} frames but the grid needs {}",
            grid.frames
        )));
    }
    let frame_len = h * w * c;
    let mut picked = Vec::with_capacity(grid.frames * frame_len);
    for fi in frame_indices(t, grid.frames) {
        picked.extend(video.frames[fi * frame_len..(fi + 1) * frame_len].iter().map(|&v| v as f64));
    }
    let r = grid.resolution;
    let data = if (h, w) == (r, r) {
        picked
    } else {
        kernels::resize3d(&picked, [grid.frames, h, w], [grid.frames, r, r], c)
    };
    Tensor::new(vec![grid.frames, r, r, c], data)
}

/// Rearranges a `[F,R,R,C]` clip into `[P, pt·ph·pw·C]` patch rows.
pub fn patchify_tensor(clip: &Tensor, grid: &SamplingGrid) -> Result<TokenPool> {
    let s = clip.shape();
    if s.len() != 4 || s[0] != grid.frames || s[1] != grid.resolution || s[2] != grid.resolution {
        return Err(FluxError::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![grid.frames, grid.resolution, grid.resolution],
        });
    }
    let c = s[3];
    let [pt, ph, pw] = grid.patch;
    let r = grid.resolution;
    let cp = grid.patch_dim(c);
    let mut features = Vec::with_capacity(grid.pool * cp);
    let mut coords = Vec::with_capacity(grid.pool);
    let d = clip.data();
    for ti in 0..grid.t {
        for hi in 0..grid.gh {
            for wi in 0..grid.gw {
                coords.push([ti, hi, wi]);
                for dt in 0..pt {
                    for dh in 0..ph {
                        let base = (((ti * pt + dt) * r + hi * ph + dh) * r + wi * pw) * c;
                        features.extend_from_slice(&d[base..base + pw * c]);
                    }
                }
            }
        }
    }
    Ok(TokenPool {
        features: Tensor::new(vec![grid.pool, cp], features)?,
        coords,
        grid: *grid,
        channels: c,
    })
}

pub fn patchify(video: &VideoSample, grid: &SamplingGrid) -> Result<TokenPool> {
    let clip = resample_video(video, grid)?;
    patchify_tensor(&clip, grid)
}

/// Ground-truth motion per token: the motion mask goes through the same
/// temporal selection and resize as the pixels, and a token counts as moving
/// when any of its resampled mask values reaches 0.5.
pub fn motion_tokens(video: &VideoSample, grid: &SamplingGrid) -> Result<Vec<bool>> {
    let (t, h, w) = (video.t(), video.h(), video.w());
    if t < grid.frames {
        return Err(FluxError::InvalidInput(format!(
            "video has {t} frames but the grid needs {}",
            grid.frames
        )));
    }
    let mut picked = Vec::with_capacity(grid.frames * h * w);
    for fi in frame_indices(t, grid.frames) {
        picked.extend(video.motion_mask[fi * h * w..(fi + 1) * h * w].iter().map(|&m| f64::from(u8::from(m))));
    }
    let r = grid.resolution;
    let mask = if (h, w) == (r, r) {
        picked
    } else {
        kernels::resize3d(&picked, [grid.frames, h, w], [grid.frames, r, r], 1)
    };
    let clip = Tensor::new(vec![grid.frames, r, r, 1], mask)?;
    let pool = patchify_tensor(&clip, grid)?;
    Ok((0..pool.len()).map(|i| pool.features.row(i).iter().any(|&v| v >= 0.5)).collect())
}

/// Inverse rearrangement of [`patchify_tensor`].
pub fn unpatchify(pool: &TokenPool) -> Tensor {
    let g = &pool.grid;
    let c = pool.channels;
    let [pt, ph, pw] = g.patch;
    let r = g.resolution;
    let mut out = vec![0.0; g.frames * r * r * c];
    let d = pool.features.data();
    let mut k = 0;
    for ti in 0..g.t {
        for hi in 0..g.gh {
            for wi in 0..g.gw {
                for dt in 0..pt {
                    for dh in 0..ph {
                        let base = (((ti * pt + dt) * r + hi * ph + dh) * r + wi * pw) * c;
                        out[base..base + pw * c].copy_from_slice(&d[k..k + pw * c]);
                        k += pw * c;
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.frames, r, r, c], out).expect("grid shape")
}
