//! Procedural cartoon faces with exact label masks, for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::Result;
use crate::image::{Image, LabelMask};
use crate::pipeline::Sample;
use crate::preprocess::Landmarks5;
use crate::schema::LabelSchema;

/// Toy schema label ids.
pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const LEFT_EYE: u8 = 2;
pub const RIGHT_EYE: u8 = 3;
pub const MOUTH: u8 = 4;
pub const HAIR: u8 = 5;

/// One generated face.
#[derive(Debug, Clone)]
pub struct ToyFace {
    pub sample: Sample,
    pub landmarks: Landmarks5,
    /// Index of the hair color, usable as a grouping key.
    pub hair_style: usize,
}

const HAIR_COLORS: [[f32; 3]; 5] = [
    [0.10, 0.07, 0.05],
    [0.45, 0.28, 0.12],
    [0.85, 0.70, 0.35],
    [0.65, 0.20, 0.08],
    [0.55, 0.55, 0.58],
];
const SKIN_TONES: [[f32; 3]; 4] = [
    [0.96, 0.80, 0.69],
    [0.87, 0.67, 0.52],
    [0.68, 0.48, 0.34],
    [0.45, 0.31, 0.22],
];
const EYE_COLORS: [[f32; 3]; 4] = [
    [0.15, 0.35, 0.75],
    [0.35, 0.22, 0.10],
    [0.20, 0.55, 0.30],
    [0.05, 0.05, 0.05],
];

fn jitter(rng: &mut ChaCha8Rng, c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn in_ellipse(r: f32, c: f32, cr: f32, cc: f32, rr: f32, rc: f32) -> bool {
    let dr = (r - cr) / rr;
    let dc = (c - cc) / rc;
    dr * dr + dc * dc <= 1.0
}

/// Face `index` of the corpus with `seed`, at a square `resolution`.
pub fn toy_face(seed: u64, index: usize, resolution: usize) -> ToyFace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    let s = resolution as f32 / 64.0;
    let bg = [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)];
    let tone = SKIN_TONES[rng.random_range(0..SKIN_TONES.len())];
    let skin = jitter(&mut rng, tone, 0.04);
    let hair_style = rng.random_range(0..HAIR_COLORS.len());
    let hair = jitter(&mut rng, HAIR_COLORS[hair_style], 0.04);
    let iris = EYE_COLORS[rng.random_range(0..EYE_COLORS.len())];
    let eye = jitter(&mut rng, iris, 0.03);
    let lips = jitter(&mut rng, [0.80, 0.22, 0.25], 0.08);

    let cy = (34.0 + rng.random_range(-2.0..2.0)) * s;
    let cx = (32.0 + rng.random_range(-2.0..2.0)) * s;
    let ry = rng.random_range(17.0..21.0) * s;
    let rx = rng.random_range(13.5..17.0) * s;
    let hairline = cy - ry * rng.random_range(0.35..0.6);
    let hair_len = cy + ry * rng.random_range(-0.3..0.9);
    let eye_row = cy - ry * rng.random_range(0.12..0.25);
    let eye_dx = rx * rng.random_range(0.38..0.48);
    let (eye_rr, eye_rc) = (rng.random_range(1.6..2.6) * s, rng.random_range(2.4..3.6) * s);
    let mouth_row = cy + ry * rng.random_range(0.45..0.6);
    let (mouth_rr, mouth_rc) = (rng.random_range(1.4..2.8) * s, rng.random_range(4.0..7.0) * s);

    let n = resolution;
    let mut image = Image::zeros(n, n);
    let mut labels = vec![BACKGROUND; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
            let face = in_ellipse(y, x, cy, cx, ry, rx);
            let outer = in_ellipse(y, x, cy - 2.0 * s, cx, ry + 3.5 * s, rx + 3.5 * s);
            let label = if in_ellipse(y, x, eye_row, cx - eye_dx, eye_rr, eye_rc) {
                LEFT_EYE
            } else if in_ellipse(y, x, eye_row, cx + eye_dx, eye_rr, eye_rc) {
                RIGHT_EYE
            } else if in_ellipse(y, x, mouth_row, cx, mouth_rr, mouth_rc) {
                MOUTH
            } else if (face && y < hairline) || (outer && !face && y < hair_len) {
                HAIR
            } else if face {
                SKIN
            } else {
                BACKGROUND
            };
            let base = match label {
                LEFT_EYE | RIGHT_EYE => eye,
                MOUTH => lips,
                HAIR => hair,
                SKIN => skin,
                _ => bg,
            };
            // Gentle vertical shading keeps regions from being perfectly flat.
            let shade = 1.0 - 0.12 * (y / n as f32 - 0.5);
            let px = base.map(|v| ((v * shade).clamp(0.0, 1.0)) * 2.0 - 1.0);
            image.set(r, c, px);
            labels[r * n + c] = label;
        }
    }
    let mask = LabelMask::new_unchecked(n, n, labels).expect("sized");
    // Shapes live in pixel-center coordinates; landmarks use pixel indices.
    let pt = |x: f32, y: f32| [(x - 0.5) as f64, (y - 0.5) as f64];
    let landmarks = Landmarks5([
        pt(cx - eye_dx, eye_row),
        pt(cx + eye_dx, eye_row),
        pt(cx, cy + ry * 0.15),
        pt(cx - mouth_rc, mouth_row),
        pt(cx + mouth_rc, mouth_row),
    ]);
    ToyFace {
        sample: Sample {
            id: format!("toy{index:04}"),
            image,
            mask,
        },
        landmarks,
        hair_style,
    }
}

/// `count` faces, deterministic in `seed`.
pub fn toy_corpus(seed: u64, count: usize, resolution: usize) -> Vec<ToyFace> {
    (0..count).map(|i| toy_face(seed, i, resolution)).collect()
}

/// [`toy_corpus`] as a dataset under the toy schema, grouped by hair color.
pub fn toy_dataset(seed: u64, count: usize, resolution: usize) -> Result<Dataset> {
    let faces = toy_corpus(seed, count, resolution);
    Dataset::new(
        LabelSchema::toy(),
        faces.iter().map(|f| f.sample.clone()).collect(),
        faces.iter().map(|f| Some(format!("hair{}", f.hair_style))).collect(),
        faces.iter().map(|f| f.landmarks).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ComponentId;

    #[test]
    fn deterministic_and_valid() {
        let schema = LabelSchema::toy();
        let a = toy_corpus(3, 6, 64);
        let b = toy_corpus(3, 6, 64);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample, y.sample);
            x.sample.mask.validate(&schema).unwrap();
        }
        assert_ne!(a[0].sample.image, a[1].sample.image);
        assert_ne!(toy_face(4, 0, 64).sample.image, a[0].sample.image);
    }

    #[test]
    fn every_component_present() {
        let schema = LabelSchema::toy();
        for face in toy_corpus(11, 40, 64) {
            let centers = crate::preprocess::component_centers(&face.sample.mask, &schema);
            for c in ComponentId::ALL {
                assert!(centers[c.index()].present, "{} missing {c}", face.sample.id);
            }
            assert!(centers[0].center.1 < centers[1].center.1);
        }
    }
}
