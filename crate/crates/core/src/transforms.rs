//! Classification augmentation stack: to-tensor, random horizontal flip,
//! per-channel normalization and cutout, applied in that order.

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, ImageRecord};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("std must be strictly positive, got {0} for channel {1}")]
    NonPositiveStd(f32, usize),
    #[error("expected {expected} per-channel statistics, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("cutout side {side} exceeds image side {limit}")]
    CutoutTooLarge { side: usize, limit: usize },
    #[error(transparent)]
    Record(#[from] DatasetError),
}

pub type Result<T, E = TransformError> = std::result::Result<T, E>;

/// `f32` image in `(C, H, W)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorImage {
    pub data: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; channels * height * width],
            channels,
            height,
            width,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub flip_probability: f64,
    /// Per-channel; a single value is broadcast.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// `None` picks `floor(min(H, W) / 4)`.
    pub cutout_side: Option<usize>,
    pub seed: u64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            mean: vec![0.5],
            std: vec![0.5],
            cutout_side: None,
            seed: 0,
        }
    }
}

impl TransformConfig {
    /// A stack that reduces to `to_tensor`.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            mean: vec![0.0],
            std: vec![1.0],
            cutout_side: Some(0),
            seed: 0,
        }
    }

    fn per_channel(values: &[f32], channels: usize) -> Result<Vec<f32>> {
        match values.len() {
            1 => Ok(vec![values[0]; channels]),
            n if n == channels => Ok(values.to_vec()),
            got => Err(TransformError::ChannelMismatch {
                expected: channels,
                got,
            }),
        }
    }

    pub fn cutout_side_for(&self, height: usize, width: usize) -> usize {
        self.cutout_side.unwrap_or(height.min(width) / 4)
    }
}

/// Converts `(H, W, C)` bytes to `(C, H, W)` floats scaled into `[0, 1]`.
pub fn to_tensor(record: &ImageRecord) -> Result<TensorImage> {
    record.validate()?;
    let (h, w, c) = (record.height, record.width, record.channels);
    let mut out = TensorImage::zeros(c, h, w);
    let plane = h * w;
    for (pix, rgb) in record.pixels.chunks_exact(c).enumerate() {
        for (ch, &v) in rgb.iter().enumerate() {
            out.data[ch * plane + pix] = f32::from(v) / 255.0;
        }
    }
    Ok(out)
}

/// Mirrors columns (`x -> W-1-x`) when `flip` is set.
pub fn horizontal_flip(mut img: TensorImage, flip: bool) -> TensorImage {
    if flip {
        let w = img.width;
        for row in img.data.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    img
}

pub fn normalize(mut img: TensorImage, mean: &[f32], std: &[f32]) -> Result<TensorImage> {
    let mean = TransformConfig::per_channel(mean, img.channels)?;
    let std = TransformConfig::per_channel(std, img.channels)?;
    if let Some((c, &s)) = std
        .iter()
        .enumerate()
        .find(|(_, s)| s.is_nan() || **s <= 0.0)
    {
        return Err(TransformError::NonPositiveStd(s, c));
    }
    for c in 0..img.channels {
        let (m, inv) = (mean[c], 1.0 / std[c]);
        for v in img.plane_mut(c) {
            *v = (*v - m) * inv;
        }
    }
    Ok(img)
}

/// Zeroes the `side x side` square whose top-left corner is
/// `(cy - side/2, cx - side/2)`, clipped to the image, in every channel.
pub fn cutout(mut img: TensorImage, side: usize, center: (usize, usize)) -> TensorImage {
    if side == 0 {
        return img;
    }
    let (cy, cx) = (center.0 as isize, center.1 as isize);
    let half = (side / 2) as isize;
    let clip = |lo: isize, limit: usize| -> (usize, usize) {
        let a = lo.clamp(0, limit as isize) as usize;
        let b = (lo + side as isize).clamp(0, limit as isize) as usize;
        (a, b)
    };
    let (y0, y1) = clip(cy - half, img.height);
    let (x0, x1) = clip(cx - half, img.width);
    let w = img.width;
    for c in 0..img.channels {
        let plane = img.plane_mut(c);
        for y in y0..y1 {
            plane[y * w + x0..y * w + x1].fill(0.0);
        }
    }
    img
}

/// Seed for one sample's augmentation draws; independent of which worker
/// handles the sample.
pub fn sample_seed(config_seed: u64, epoch: u64, sample_id: u64) -> u64 {
    derive_seed(&[config_seed, epoch, sample_id])
}

/// to_tensor, then flip, normalize and cutout with draws from `seed`.
pub fn apply_stack(
    record: &ImageRecord,
    config: &TransformConfig,
    seed: u64,
) -> Result<TensorImage> {
    let img = to_tensor(record)?;
    let side = config.cutout_side_for(img.height, img.width);
    let limit = img.height.min(img.width);
    if side > limit {
        return Err(TransformError::CutoutTooLarge { side, limit });
    }
    let mut rng = SplitMix64::new(seed);
    let flip = rng.next_f64() < config.flip_probability;
    let center = (
        rng.below(img.height as u64) as usize,
        rng.below(img.width as u64) as usize,
    );
    let img = horizontal_flip(img, flip);
    let img = normalize(img, &config.mean, &config.std)?;
    Ok(cutout(img, side, center))
}
