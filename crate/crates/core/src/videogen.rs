//! Seeded synthetic videos of moving rectangular sprites over a noisy
//! background, with per-pixel motion masks.
//!
//! In motion-direction mode the label is the dominant direction of the sprites'
//! shared velocity (0 = right, 1 = left, 2 = down, 3 = up), so any classifier
//! must read motion rather than appearance. In texture mode the label picks a
//! background stripe period and sprites move in random directions.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, FluxError, Result};
use crate::rng::{hex_digest, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSemantics {
    MotionDirection,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub sprite_size_min: usize,
    pub sprite_size_max: usize,
    /// Pixels per frame along the dominant axis.
    pub speed_min: f64,
    pub speed_max: f64,
    pub noise_amplitude: f64,
    pub semantics: ClassSemantics,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            frames: 16,
            height: 56,
            width: 56,
            channels: 3,
            sprites_min: 1,
            sprites_max: 3,
            sprite_size_min: 8,
            sprite_size_max: 14,
            speed_min: 1.0,
            speed_max: 2.5,
            noise_amplitude: 0.1,
            semantics: ClassSemantics::MotionDirection,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(invalid_config("gen: frames, height, width, channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(invalid_config("gen: num_classes must be positive"));
        }
        if self.semantics == ClassSemantics::MotionDirection {
            if self.num_classes > 4 {
                return Err(invalid_config("gen: motion-direction semantics supports at most 4 classes"));
            }
            if self.sprites_min == 0 {
                return Err(invalid_config(
                    "gen: motion-direction semantics needs at least one sprite (label undefined)",
                ));
            }
        }
        if self.sprites_min > self.sprites_max {
            return Err(invalid_config("gen: sprites_min > sprites_max"));
        }
        if self.sprite_size_min == 0 || self.sprite_size_min > self.sprite_size_max {
            return Err(invalid_config("gen: invalid sprite size range"));
        }
        if self.sprite_size_max > self.height || self.sprite_size_max > self.width {
            return Err(invalid_config("gen: sprites must fit inside the frame"));
        }
        if !(self.speed_min >= 0.0) || self.speed_min > self.speed_max || !self.speed_max.is_finite() {
            return Err(invalid_config("gen: speed range must be non-negative and ordered"));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(invalid_config("gen: noise_amplitude must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One generated clip. `frames` is `T×H×W×C` row-major, `motion_mask` is `T×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<f32>,
    pub motion_mask: Vec<bool>,
    pub label: usize,
    pub seed: u64,
    pub dims: [usize; 4],
}

impl VideoSample {
    pub fn t(&self) -> usize {
        self.dims[0]
    }
    pub fn h(&self) -> usize {
        self.dims[1]
    }
    pub fn w(&self) -> usize {
        self.dims[2]
    }
    pub fn c(&self) -> usize {
        self.dims[3]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.frames[((t * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + c]
    }

    pub fn mask_at(&self, t: usize, y: usize, x: usize) -> bool {
        self.motion_mask[(t * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// Unit direction for a motion class.
fn direction(class: usize) -> (f64, f64) {
    match class {
        0 => (1.0, 0.0),
        1 => (-1.0, 0.0),
        2 => (0.0, 1.0),
        _ => (0.0, -1.0),
    }
}

/// Motion class implied by a velocity: dominant axis, then sign.
pub fn label_from_velocity(vx: f64, vy: f64) -> usize {
    if vx.abs() >= vy.abs() {
        if vx >= 0.0 {
            0
        } else {
            1
        }
    } else if vy >= 0.0 {
        2
    } else {
        3
    }
}

struct Sprite {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: usize,
    h: usize,
    color: Vec<f32>,
}

/// Start coordinate that keeps a sprite in frame for the whole clip when its
/// travel allows it; otherwise any position (it will bounce).
fn start_position(rng: &mut impl Rng, extent: usize, size: usize, v: f64, frames: usize) -> f64 {
    let room = (extent - size) as f64;
    let travel = v.abs() * (frames.saturating_sub(1)) as f64;
    if travel <= room {
        let slack = room - travel;
        let offset = if slack > 0.0 { rng.random_range(0.0..=slack) } else { 0.0 };
        if v >= 0.0 {
            offset
        } else {
            room - offset
        }
    } else if room > 0.0 {
        rng.random_range(0.0..=room)
    } else {
        0.0
    }
}

fn advance(pos: &mut f64, vel: &mut f64, room: f64) {
    *pos += *vel;
    // reflect off the edges until inside
    for _ in 0..4 {
        if *pos < 0.0 {
            *pos = -*pos;
            *vel = -*vel;
        } else if *pos > room {
            *pos = 2.0 * room - *pos;
            *vel = -*vel;
        } else {
            break;
        }
    }
    *pos = pos.clamp(0.0, room);
}

/// Generates one clip. Identical `(seed, spec)` pairs give identical output.
pub fn gen_video(seed: u64, spec: &GenSpec) -> Result<VideoSample> {
    gen_video_with_noise(seed, seed, spec)
}

/// Like [`gen_video`] but draws the background texture from `noise_seed`,
/// leaving sprites, motion and label tied to `seed`.
pub fn gen_video_with_noise(seed: u64, noise_seed: u64, spec: &GenSpec) -> Result<VideoSample> {
    spec.validate()?;
    let (t_len, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let label = (seed % spec.num_classes as u64) as usize;
    let mut rng = rng_for(seed, "video.sprites");
    let mut noise_rng = rng_for(noise_seed, "video.noise");

    let n_sprites = rng.random_range(spec.sprites_min..=spec.sprites_max);
    let mut sprites = Vec::with_capacity(n_sprites);
    for s in 0..n_sprites {
        let sw = rng.random_range(spec.sprite_size_min..=spec.sprite_size_max);
        let sh = rng.random_range(spec.sprite_size_min..=spec.sprite_size_max);
        let speed = if spec.speed_max > spec.speed_min {
            rng.random_range(spec.speed_min..=spec.speed_max)
        } else {
            spec.speed_min
        };
        let (dx, dy) = match spec.semantics {
            ClassSemantics::MotionDirection => direction(label),
            ClassSemantics::Texture => direction(rng.random_range(0..4)),
        };
        // small orthogonal drift, always weaker than the dominant component
        let drift = rng.random_range(-0.3..=0.3) * speed;
        let (vx, vy) = if dx != 0.0 { (dx * speed, drift) } else { (drift, dy * speed) };
        let x = start_position(&mut rng, w, sw, vx, t_len);
        let y = start_position(&mut rng, h, sh, vy, t_len);
        // distinct, bright colors: hue rotates with the sprite index
        let base = 0.55 + 0.4 * rng.random::<f64>();
        let color = (0..c)
            .map(|ch| {
                let phase = (s * 2 + ch) as f64 * 2.1;
                (base * (0.75 + 0.25 * phase.cos())) as f32
            })
            .collect();
        sprites.push(Sprite {
            x,
            y,
            vx,
            vy,
            w: sw,
            h: sh,
            color,
        });
    }
    if spec.semantics == ClassSemantics::MotionDirection {
        let (mvx, mvy) = sprites
            .iter()
            .fold((0.0, 0.0), |(a, b), s| (a + s.vx, b + s.vy));
        debug_assert!(spec.speed_max == 0.0 || label_from_velocity(mvx, mvy) == label);
    }

    let mut frames = vec![0f32; t_len * h * w * c];
    let mut mask = vec![false; t_len * h * w];
    let stripe_period = 2 + label;
    for t in 0..t_len {
        let fbase = t * h * w * c;
        for y in 0..h {
            let stripe = match spec.semantics {
                ClassSemantics::Texture if (y / stripe_period).is_multiple_of(2) => 0.2f32,
                _ => 0.0,
            };
            for x in 0..w {
                for ch in 0..c {
                    let n = noise_rng.random::<f64>() * spec.noise_amplitude;
                    frames[fbase + (y * w + x) * c + ch] = n as f32 + stripe;
                }
            }
        }
        for s in &sprites {
            let x0 = s.x.round() as usize;
            let y0 = s.y.round() as usize;
            for y in y0..(y0 + s.h).min(h) {
                for x in x0..(x0 + s.w).min(w) {
                    let p = fbase + (y * w + x) * c;
                    frames[p..p + c].copy_from_slice(&s.color);
                    mask[(t * h + y) * w + x] = true;
                }
            }
        }
        for s in sprites.iter_mut() {
            advance(&mut s.x, &mut s.vx, (w - s.w) as f64);
            advance(&mut s.y, &mut s.vy, (h - s.h) as f64);
        }
    }
    for v in frames.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(VideoSample {
        frames,
        motion_mask: mask,
        label,
        seed,
        dims: [t_len, h, w, c],
    })
}

/// `count` clips with seeds `seed, seed+1, …`; labels cycle through classes.
pub fn gen_dataset(seed: u64, spec: &GenSpec, count: usize) -> Result<Vec<VideoSample>> {
    if count == 0 {
        return Err(FluxError::InvalidInput("dataset count must be positive".into()));
    }
    (0..count as u64).map(|i| gen_video(seed + i, spec)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub mask_file: String,
    pub shape: [usize; 4],
    pub label: usize,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: GenSpec,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes each sample as raw little-endian f32 frames plus an f32 0/1 mask,
/// and a `manifest.json` describing them.
pub fn export_dataset(dir: &Path, spec: &GenSpec, samples: &[VideoSample]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:05}.f32");
        let mask_file = format!("sample_{i:05}.mask.f32");
        let frames = f32_bytes(s.frames.iter().copied());
        let mask = f32_bytes(s.motion_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        fs::write(dir.join(&file), &frames)?;
        fs::write(dir.join(&mask_file), &mask)?;
        entries.push(ManifestEntry {
            file,
            mask_file,
            shape: s.dims,
            label: s.label,
            seed: s.seed,
            sha256: hex_digest(&frames),
        });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        samples: entries,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(FluxError::InvalidInput(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Reads a directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<VideoSample>)> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let n: usize = e.shape.iter().product();
        let frames = read_f32(&dir.join(&e.file), n)?;
        let mask = read_f32(&dir.join(&e.mask_file), n / e.shape[3])?;
        samples.push(VideoSample {
            frames,
            motion_mask: mask.into_iter().map(|v| v > 0.5).collect(),
            label: e.label,
            seed: e.seed,
            dims: e.shape,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sprites_with_motion_labels_is_rejected() {
        let spec = GenSpec {
            sprites_min: 0,
            sprites_max: 0,
            ..GenSpec::default()
        };
        assert!(gen_video(0, &spec).is_err());
        let texture = GenSpec {
            semantics: ClassSemantics::Texture,
            ..spec
        };
        assert!(gen_video(0, &texture).is_ok());
    }

    #[test]
    fn velocity_label_rule() {
        assert_eq!(label_from_velocity(2.0, 0.5), 0);
        assert_eq!(label_from_velocity(-2.0, 0.5), 1);
        assert_eq!(label_from_velocity(0.1, 1.0), 2);
        assert_eq!(label_from_velocity(0.1, -1.0), 3);
    }

    #[test]
    fn pixels_in_unit_range() {
        let v = gen_video(3, &GenSpec::default()).unwrap();
        assert!(v.frames.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(v.label < 4);
    }
}
