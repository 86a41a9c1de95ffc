//! Training-time augmentation: random crop with zero padding, horizontal
//! flip, per-channel normalization, and cutout.
//!
//! Order of operations: geometric transforms act on raw pixels, then
//! normalization, then cutout (which zeroes normalized values). The eval
//! path normalizes only.

use crate::data::dataset::ChannelStats;
use crate::error::{Result, TorsdError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Augmentation pipeline bound to a dataset's geometry and channel stats.
#[derive(Clone, Debug)]
pub struct Augmentor {
    pub stats: ChannelStats,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Zero padding before the random crop.
    pub pad: usize,
    /// Cutout hole side; one square hole per image.
    pub cutout_side: usize,
}

impl Augmentor {
    /// Standard recipe: pad 4, cutout side `h/4`.
    pub fn new(stats: ChannelStats, h: usize, w: usize, c: usize) -> Self {
        Augmentor {
            stats,
            h,
            w,
            c,
            pad: 4,
            cutout_side: h / 4,
        }
    }

    /// Identity-normalization pipeline (tests).
    pub fn identity(h: usize, w: usize, c: usize) -> Self {
        Augmentor::new(ChannelStats::identity(c), h, w, c)
    }

    /// Applies the pipeline to one HWC image. With `training == false` the
    /// image is returned unchanged up to normalization. RNG draw order per
    /// training image: crop y, crop x, flip, cutout center y, cutout
    /// center x.
    pub fn augment(&self, img: &[f32], training: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let (h, w, c) = (self.h, self.w, self.c);
        if img.len() != h * w * c {
            return Err(TorsdError::shape(
                format!("{}x{}x{}", h, w, c),
                format!("{} values", img.len()),
            ));
        }
        if !img.iter().all(|v| v.is_finite()) {
            return Err(TorsdError::InvalidImage(
                "non-finite pixel value".into(),
            ));
        }

        let mut out = if training {
            // Random crop out of the zero-padded frame.
            let oy = rng.gen_range(0..=2 * self.pad);
            let ox = rng.gen_range(0..=2 * self.pad);
            let flip = rng.gen_bool(0.5);
            let mut cropped = vec![0.0f32; h * w * c];
            for y in 0..h {
                let sy = y + oy;
                if sy < self.pad || sy >= h + self.pad {
                    continue;
                }
                let src_y = sy - self.pad;
                for x in 0..w {
                    let sx = x + ox;
                    if sx < self.pad || sx >= w + self.pad {
                        continue;
                    }
                    let src_x = sx - self.pad;
                    let dst_x = if flip { w - 1 - x } else { x };
                    let src = (src_y * w + src_x) * c;
                    let dst = (y * w + dst_x) * c;
                    cropped[dst..dst + c].copy_from_slice(&img[src..src + c]);
                }
            }
            cropped
        } else {
            img.to_vec()
        };

        for p in 0..h * w {
            for ch in 0..c {
                let v = &mut out[p * c + ch];
                *v = (*v - self.stats.mean[ch]) / self.stats.std[ch];
            }
        }

        if training && self.cutout_side > 0 {
            let cy = rng.gen_range(0..h);
            let cx = rng.gen_range(0..w);
            apply_cutout(&mut out, h, w, c, cy, cx, self.cutout_side);
        }
        Ok(out)
    }
}

/// Zeroes a square hole of side `side` centered at (`cy`, `cx`), clipped
/// at the image borders.
pub fn apply_cutout(img: &mut [f32], h: usize, w: usize, c: usize, cy: usize, cx: usize, side: usize) {
    let half = side / 2;
    let y0 = cy.saturating_sub(half);
    let y1 = (cy + side - half).min(h);
    let x0 = cx.saturating_sub(half);
    let x1 = (cx + side - half).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let base = (y * w + x) * c;
            for v in &mut img[base..base + c] {
                *v = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_path_is_normalization_only() {
        let aug = Augmentor::identity(4, 4, 2);
        let img: Vec<f32> = (0..32).map(|i| i as f32 / 32.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = aug.augment(&img, false, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn training_is_deterministic_under_a_fixed_seed() {
        let aug = Augmentor::identity(8, 8, 3);
        let img = vec![0.7f32; 8 * 8 * 3];
        let a = aug
            .augment(&img, true, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = aug
            .augment(&img, true, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cutout_interior_hole_zeroes_exactly_side_squared_pixels() {
        // 32x32 all-ones, side 8, fully interior hole: 64 spatial positions.
        let (h, w, c) = (32, 32, 3);
        let mut img = vec![1.0f32; h * w * c];
        apply_cutout(&mut img, h, w, c, 16, 16, 8);
        let zeroed_positions = (0..h * w)
            .filter(|p| (0..c).all(|ch| img[p * c + ch] == 0.0))
            .count();
        assert_eq!(zeroed_positions, 64);
    }

    #[test]
    fn cutout_clips_at_borders() {
        let (h, w, c) = (16, 16, 1);
        let mut img = vec![1.0f32; h * w];
        apply_cutout(&mut img, h, w, c, 0, 0, 4);
        let zeroed = img.iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeroed, 2 * 2); // only the in-bounds quadrant
    }

    #[test]
    fn nonfinite_pixels_error() {
        let aug = Augmentor::identity(2, 2, 1);
        let img = vec![0.0, f32::INFINITY, 0.0, 0.0];
        let err = aug
            .augment(&img, false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, TorsdError::InvalidImage(_)));
    }

    #[test]
    fn normalization_applies_channel_stats() {
        let stats = ChannelStats {
            mean: vec![0.5],
            std: vec![0.25],
        };
        let aug = Augmentor::new(stats, 1, 2, 1);
        let out = aug
            .augment(&[0.75, 0.5], false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
    }
}
