//! Context-rich minority oversampling: a CutMix patch from a tail-biased
//! foreground batch is pasted onto the ordinary background batch.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::data::ImageShape;
use crate::rng::Rng;
use crate::{Error, Result};

/// Half-open pixel box `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Box of side `floor(dim * sqrt(1 - lambda))` centered at `(cy, cx)`,
/// clipped to the image. An empty box (`lambda = 1`) has zero area.
pub fn cut_box(height: usize, width: usize, lambda: f64, cy: usize, cx: usize) -> CutBox {
    let rat = (1.0 - lambda).clamp(0.0, 1.0).sqrt();
    let cut_h = (height as f64 * rat).floor() as usize;
    let cut_w = (width as f64 * rat).floor() as usize;
    let span = |center: usize, cut: usize, dim: usize| {
        let lo = center as isize - (cut / 2) as isize;
        let hi = lo + cut as isize;
        (lo.clamp(0, dim as isize) as usize, hi.clamp(0, dim as isize) as usize)
    };
    let (y0, y1) = span(cy, cut_h, height);
    let (x0, x1) = span(cx, cut_w, width);
    CutBox { y0, y1, x0, x1 }
}

/// Copies the box region of `fg` into `bg` for every channel.
pub fn paste_box(bg: &mut [f32], fg: &[f32], shape: ImageShape, b: CutBox) {
    let (h, w) = (shape.height, shape.width);
    for ch in 0..shape.channels {
        for y in b.y0..b.y1 {
            let off = ch * h * w + y * w;
            bg[off + b.x0..off + b.x1].copy_from_slice(&fg[off + b.x0..off + b.x1]);
        }
    }
}

/// A mixed batch with soft labels over `classes` classifier rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<f32>,
    pub soft_labels: Vec<f32>,
    pub classes: usize,
    /// Background share of every label after clipping.
    pub lambda: f64,
    pub cut: CutBox,
}

/// Mixes with an explicit `lambda` and box center; labels are classifier rows.
#[allow(clippy::too_many_arguments)]
pub fn mix_with(
    background: &[f32],
    bg_labels: &[usize],
    foreground: &[f32],
    fg_labels: &[usize],
    shape: ImageShape,
    classes: usize,
    lambda: f64,
    center: (usize, usize),
) -> Result<MixedBatch> {
    let n = bg_labels.len();
    if fg_labels.len() != n || background.len() != n * shape.len() || foreground.len() != n * shape.len() {
        return Err(Error::Contract(format!(
            "CMO batch mismatch: {n} background vs {} foreground examples",
            fg_labels.len()
        )));
    }
    if let Some(&bad) = bg_labels.iter().chain(fg_labels).find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} outside classifier range 0..{classes}"
        )));
    }
    let cut = cut_box(shape.height, shape.width, lambda, center.0, center.1);
    let lam = 1.0 - cut.area() as f64 / (shape.height * shape.width) as f64;
    let mut images = background.to_vec();
    for i in 0..n {
        let r = i * shape.len()..(i + 1) * shape.len();
        paste_box(&mut images[r.clone()], &foreground[r], shape, cut);
    }
    let mut soft = vec![0.0f32; n * classes];
    for i in 0..n {
        soft[i * classes + bg_labels[i]] += lam as f32;
        soft[i * classes + fg_labels[i]] += (1.0 - lam) as f32;
    }
    Ok(MixedBatch {
        images,
        soft_labels: soft,
        classes,
        lambda: lam,
        cut,
    })
}

/// Draws `lambda ~ Beta(beta, beta)` and a uniform box center, then mixes.
#[allow(clippy::too_many_arguments)]
pub fn cmo_mix(
    background: &[f32],
    bg_labels: &[usize],
    foreground: &[f32],
    fg_labels: &[usize],
    shape: ImageShape,
    classes: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    let dist = Beta::new(beta, beta)
        .map_err(|e| Error::Validation(format!("CMO beta {beta}: {e}")))?;
    let lambda = dist.sample(rng);
    let cy = rng.random_range(0..shape.height);
    let cx = rng.random_range(0..shape.width);
    mix_with(
        background, bg_labels, foreground, fg_labels, shape, classes, lambda, (cy, cx),
    )
}
