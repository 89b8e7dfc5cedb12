//! Train-time crop/flip augmentation applied in place to a batch buffer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ImageShape;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Zero padding before a random crop back to the original size.
    pub crop_padding: usize,
    pub horizontal_flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            horizontal_flip: true,
        }
    }
}

/// Augments every image in `images` (batch x `shape`) independently.
pub fn augment_batch(images: &mut [f32], shape: ImageShape, aug: &Augmentation, rng: &mut Rng) {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let pad = aug.crop_padding as i64;
    let mut scratch = vec![0.0f32; shape.len()];
    for img in images.chunks_mut(shape.len()) {
        let (dy, dx) = if pad > 0 {
            (
                rng.random_range(-pad..=pad) as isize,
                rng.random_range(-pad..=pad) as isize,
            )
        } else {
            (0, 0)
        };
        let flip = aug.horizontal_flip && rng.random_bool(0.5);
        if dy == 0 && dx == 0 && !flip {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    scratch[ch * h * w + y * w + x] =
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            img[ch * h * w + sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
}
