use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CROP_PAD: usize = 4;

/// Training-time augmentation switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    /// Probability of a horizontal flip per sample.
    pub flip_prob: f64,
    /// Zero padding before the random crop; 0 disables cropping.
    pub crop_pad: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flip_prob: 0.5,
            crop_pad: DEFAULT_CROP_PAD,
        }
    }
}

impl Augment {
    pub const NONE: Augment = Augment {
        flip_prob: 0.0,
        crop_pad: 0,
    };
}

/// Mirrors each `[H,W]` plane of `img` left to right, in place.
pub fn hflip<T: Copy>(img: &mut [T], w: usize) {
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Crop of one `[H,W]` plane after zero padding by `pad`; `(dy, dx)` is the
/// crop origin in padded coordinates, so `(pad, pad)` is the identity.
pub fn crop_padded<T: Real>(img: &[T], h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        let src_i = (i + dy).wrapping_sub(pad);
        if src_i >= h {
            continue;
        }
        for j in 0..w {
            let src_j = (j + dx).wrapping_sub(pad);
            if src_j < w {
                out[i * w + j] = img[src_i * w + src_j];
            }
        }
    }
    out
}

/// Independently flips and crops every sample of an `[N,C,H,W]` batch. The
/// same flip and offset apply to all channels of a sample.
pub fn augment<T: Real, R: Rng>(batch: &Tensor<T>, rng: &mut R, cfg: &Augment) -> Result<Tensor<T>> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("augment needs [N,C,H,W], got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if cfg.crop_pad >= h.min(w) {
        return Err(Error::Contract(format!(
            "crop padding {} must be below the image extents {h}x{w}",
            cfg.crop_pad
        )));
    }
    let mut out = batch.clone();
    let plane = h * w;
    for s in 0..n {
        let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
        let offset = (cfg.crop_pad > 0).then(|| {
            (
                rng.gen_range(0..=2 * cfg.crop_pad),
                rng.gen_range(0..=2 * cfg.crop_pad),
            )
        });
        for ch in 0..c {
            let at = (s * c + ch) * plane;
            let img = &mut out.data_mut()[at..at + plane];
            if flip {
                hflip(img, w);
            }
            if let Some((dy, dx)) = offset {
                let cropped = crop_padded(img, h, w, cfg.crop_pad, dy, dx);
                img.copy_from_slice(&cropped);
            }
        }
    }
    Ok(out)
}
