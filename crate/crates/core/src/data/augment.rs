//! Training-time random crop and horizontal flip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distort::reflect;
use super::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub crop: usize,
    pub flip: bool,
}

/// Random `crop × crop` window with a random horizontal flip.
pub fn augment(image: &ImageTensor, crop: usize, seed: u64) -> ImageTensor {
    augment_with(image, AugmentOptions { crop, flip: true }, seed)
}

/// Sides shorter than the crop are reflect-padded (centred) first, so any
/// crop size is accepted.
pub fn augment_with(image: &ImageTensor, opts: AugmentOptions, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (image.height(), image.width());
    let c = opts.crop;
    let (ph, pw) = (h.max(c), w.max(c));
    let (oy, ox) = ((ph - h) / 2, (pw - w) / 2);
    let y0 = rng.random_range(0..=ph - c);
    let x0 = rng.random_range(0..=pw - c);
    let flip = rng.random_bool(0.5) && opts.flip;

    let mut data = vec![0f32; 3 * c * c];
    for ch in 0..3 {
        let src = image.channel(ch);
        for y in 0..c {
            let sy = reflect(y0 as isize + y as isize - oy as isize, h);
            for x in 0..c {
                let px = if flip { c - 1 - x } else { x };
                let sx = reflect(x0 as isize + px as isize - ox as isize, w);
                data[(ch * c + y) * c + x] = src[sy * w + sx];
            }
        }
    }
    ImageTensor::new(c, c, data).expect("crop of a valid image")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::clean_image;

    #[test]
    fn full_crop_without_flip_is_identity() {
        let img = clean_image(48, 48, 1);
        for seed in 0..5 {
            let out = augment_with(&img, AugmentOptions { crop: 48, flip: false }, seed);
            assert_eq!(out, img);
        }
    }

    #[test]
    fn same_seed_same_window() {
        let img = clean_image(128, 128, 2);
        let a = augment(&img, 96, 17);
        let b = augment(&img, 96, 17);
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (96, 96));
        let differs = (0..20).any(|s| augment(&img, 96, s) != a);
        assert!(differs);
    }

    #[test]
    fn crop_is_a_window_of_the_source() {
        let img = clean_image(64, 50, 3);
        let out = augment_with(&img, AugmentOptions { crop: 40, flip: false }, 9);
        let found = (0..=24).any(|y0| {
            (0..=10).any(|x0| {
                (0..40).all(|y| (0..40).all(|x| out.get(1, y, x) == img.get(1, y0 + y, x0 + x)))
            })
        });
        assert!(found);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = clean_image(40, 40, 4);
        let flipped = (0..50)
            .map(|s| augment(&img, 40, s))
            .find(|o| *o != img)
            .expect("some seed flips");
        for y in 0..40 {
            for x in 0..40 {
                assert_eq!(flipped.get(0, y, x), img.get(0, y, 39 - x));
            }
        }
    }

    #[test]
    fn undersized_images_are_reflect_padded() {
        let img = clean_image(32, 40, 5);
        let out = augment_with(&img, AugmentOptions { crop: 48, flip: false }, 0);
        assert_eq!((out.height(), out.width()), (48, 48));
        // Rows are centred: padded row 8 is source row 0, row 7 mirrors row 1.
        assert_eq!(out.get(0, 8, 4), img.get(0, 0, 0));
        assert_eq!(out.get(0, 7, 4), img.get(0, 1, 0));
    }
}
