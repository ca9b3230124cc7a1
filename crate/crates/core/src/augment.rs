//! Standard parsing augmentation: horizontal flip with left/right label swap,
//! plus random scale, rotation and translation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, LabelMask};
use crate::preprocess::{warp_image, warp_mask, Similarity};
use crate::schema::LabelSchema;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Scale factor drawn from `[1 - max_scale, 1 + max_scale]`.
    pub max_scale: f64,
    pub max_rotation_deg: f64,
    /// Shift as a fraction of the frame size.
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            max_scale: 0.1,
            max_rotation_deg: 10.0,
            max_shift: 0.05,
        }
    }
}

/// Mirrors left and right, swapping sided labels.
pub fn flip_horizontal(image: &Image, mask: &LabelMask, schema: &LabelSchema) -> (Image, LabelMask) {
    let (h, w) = (image.height(), image.width());
    let table = schema.mirror_table();
    let flipped = Image::from_fn(h, w, |r, c| image.get(r, w - 1 - c));
    let mut m = mask.clone();
    for r in 0..h {
        for c in 0..w {
            m.set(r, c, table[mask.get(r, w - 1 - c) as usize]);
        }
    }
    (flipped, m)
}

/// One random augmentation of an aligned pair.
pub fn augment_pair(
    image: &Image,
    mask: &LabelMask,
    schema: &LabelSchema,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Image, LabelMask) {
    let (mut img, mut m) = (image.clone(), mask.clone());
    if cfg.flip && rng.random_bool(0.5) {
        (img, m) = flip_horizontal(&img, &m, schema);
    }
    let (h, w) = (img.height() as f64, img.width() as f64);
    let scale = 1.0 + rng.random_range(-cfg.max_scale..=cfg.max_scale);
    let angle = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
    let tx = rng.random_range(-cfg.max_shift..=cfg.max_shift) * w;
    let ty = rng.random_range(-cfg.max_shift..=cfg.max_shift) * h;
    // Rotate and scale about the frame center, then shift.
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let forward = Similarity::new(1.0, 0.0, cx + tx, cy + ty)
        .compose(&Similarity::new(scale, angle, 0.0, 0.0))
        .compose(&Similarity::new(1.0, 0.0, -cx, -cy));
    let back = forward.inverse().expect("nonzero scale");
    (
        warp_image(&img, &back, img.height(), img.width()),
        warp_mask(&m, &back, m.height(), m.width()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flip_swaps_sides_and_is_involution() {
        let schema = LabelSchema::toy();
        let face = crate::toy::toy_face(5, 0, 64);
        let (img, m) = flip_horizontal(&face.sample.image, &face.sample.mask, &schema);
        let left = schema.labels_of(crate::schema::ComponentId::LeftEye)[0];
        let right = schema.labels_of(crate::schema::ComponentId::RightEye)[0];
        let count = |m: &LabelMask, l: u8| m.data().iter().filter(|&&x| x == l).count();
        assert_eq!(count(&m, left), count(&face.sample.mask, right));
        let (img2, m2) = flip_horizontal(&img, &m, &schema);
        assert_eq!(img2, face.sample.image);
        assert_eq!(m2, face.sample.mask);
    }

    #[test]
    fn zero_range_without_flip_is_identity() {
        let schema = LabelSchema::toy();
        let face = crate::toy::toy_face(5, 1, 64);
        let cfg = AugmentConfig {
            flip: false,
            max_scale: 0.0,
            max_rotation_deg: 0.0,
            max_shift: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, m) = augment_pair(&face.sample.image, &face.sample.mask, &schema, &cfg, &mut rng);
        assert_eq!(m, face.sample.mask);
        assert!(img.mean_abs_diff(&face.sample.image) < 1e-6);
    }

    #[test]
    fn augmented_masks_stay_valid() {
        let schema = LabelSchema::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for face in crate::toy::toy_corpus(2, 5, 64) {
            let (_, m) = augment_pair(&face.sample.image, &face.sample.mask, &schema, &AugmentConfig::default(), &mut rng);
            m.validate(&schema).unwrap();
        }
    }
}
