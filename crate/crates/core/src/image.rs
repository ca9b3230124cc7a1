//! Value types for images and label masks.
//!
//! Images are stored channel-major (CHW) with three channels and values in
//! `[-1, 1]`. Conversion to and from 8-bit happens only at I/O boundaries.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::schema::{ComponentId, LabelSchema};

/// RGB image, CHW layout, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image size {height}x{width}")));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                Self::CHANNELS * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("image contains {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "image size must be positive");
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                img.set(r, c, f(r, c));
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = row * self.width + col;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, px: [f32; 3]) {
        let plane = self.height * self.width;
        let i = row * self.width + col;
        self.data[i] = px[0];
        self.data[plane + i] = px[1];
        self.data[2 * plane + i] = px[2];
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for c in 0..self.width {
                for v in self.get(r, c) {
                    out.push(to_u8(v));
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "rgb buffer has {} bytes, expected {}",
                rgb.len(),
                3 * height * width
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        let mut img = Self::zeros(height, width);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            img.set(i / width, i % width, [from_u8(px[0]), from_u8(px[1]), from_u8(px[2])]);
        }
        Ok(img)
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`. Values are clamped into `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        Image::new(h, w, data)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

#[inline]
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Per-pixel label map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, schema: &LabelSchema) -> Result<Self> {
        let mask = Self::new_unchecked(height, width, data)?;
        mask.validate(schema)?;
        Ok(mask)
    }

    /// Shape-checked but not schema-checked.
    pub fn new_unchecked(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask size {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        assert!(height > 0 && width > 0, "mask size must be positive");
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        match self.data.iter().find(|&&v| schema.check_label(v).is_err()) {
            Some(&v) => schema.check_label(v),
            None => Ok(()),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    pub fn accuracy_against(&self, other: &LabelMask) -> f64 {
        let hits = self.data.iter().zip(&other.data).filter(|(a, b)| a == b).count();
        hits as f64 / self.data.len() as f64
    }
}

/// Binary per-pixel map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl RegionMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Pixels whose label belongs to component `c`.
pub fn component_region(mask: &LabelMask, c: ComponentId, schema: &LabelSchema) -> RegionMap {
    let table = schema.component_table();
    RegionMap {
        height: mask.height,
        width: mask.width,
        data: mask
            .data
            .iter()
            .map(|&l| table.get(l as usize).copied().flatten() == Some(c))
            .collect(),
    }
}

/// One-hot label encoding, CHW with one channel per label.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask {
    pub labels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn encode_onehot(mask: &LabelMask, schema: &LabelSchema) -> Result<OneHotMask> {
    mask.validate(schema)?;
    let labels = schema.len();
    let plane = mask.height * mask.width;
    let mut data = vec![0.0; labels * plane];
    for (i, &l) in mask.data.iter().enumerate() {
        data[l as usize * plane + i] = 1.0;
    }
    Ok(OneHotMask {
        labels,
        height: mask.height,
        width: mask.width,
        data,
    })
}

impl OneHotMask {
    /// Per-pixel argmax back to a label map. Ties resolve to the lowest id.
    pub fn decode(&self) -> LabelMask {
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.labels {
                    if self.data[k * plane + i] > self.data[best * plane + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `(labels, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (self.labels, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }
}

/// Argmax over the channel axis of `(L, H, W)` or `(1, L, H, W)` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMask> {
    let logits = if logits.rank() == 4 { logits.squeeze(0)? } else { logits.clone() };
    let (_, h, w) = logits.dims3()?;
    let data = logits
        .argmax(0)?
        .flatten_all()?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as u8)
        .collect();
    LabelMask::new_unchecked(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn onehot_single_pixel() {
        let schema = LabelSchema::new(
            "two",
            LabelSchema::toy().labels.into_iter().take(2).collect(),
        )
        .unwrap();
        let m = LabelMask::new(1, 1, vec![0], &schema).unwrap();
        assert_eq!(encode_onehot(&m, &schema).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn onehot_partition() {
        let schema = LabelSchema::new(
            "two",
            LabelSchema::toy().labels.into_iter().take(2).collect(),
        )
        .unwrap();
        let m = LabelMask::new(2, 2, vec![0, 1, 1, 0], &schema).unwrap();
        let oh = encode_onehot(&m, &schema).unwrap();
        for i in 0..4 {
            assert_eq!(oh.data[i] + oh.data[4 + i], 1.0);
        }
    }

    #[test]
    fn onehot_argmax_round_trip() {
        let schema = LabelSchema::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..64).map(|_| rng.random_range(0..6u8)).collect();
        let m = LabelMask::new(8, 8, data, &schema).unwrap();
        assert_eq!(encode_onehot(&m, &schema).unwrap().decode(), m);
    }

    #[test]
    fn onehot_rejects_out_of_range() {
        let schema = LabelSchema::toy();
        let m = LabelMask::new_unchecked(1, 2, vec![0, 9]).unwrap();
        assert!(matches!(encode_onehot(&m, &schema), Err(Error::Schema(_))));
    }

    #[test]
    fn region_of_uniform_masks() {
        let schema = LabelSchema::toy();
        let bg = LabelMask::filled(4, 4, 0);
        for c in ComponentId::ALL {
            assert_eq!(component_region(&bg, c, &schema).count(), 0);
        }
        let hair = LabelMask::filled(4, 4, 5);
        for c in ComponentId::ALL {
            let n = component_region(&hair, c, &schema).count();
            assert_eq!(n, if c == ComponentId::Hair { 16 } else { 0 });
        }
    }

    #[test]
    fn helen_mouth_region_is_label_union() {
        let schema = LabelSchema::helen();
        let data: Vec<u8> = (0..11).cycle().take(44).collect();
        let m = LabelMask::new(4, 11, data.clone(), &schema).unwrap();
        let region = component_region(&m, ComponentId::Mouth, &schema);
        for (i, &l) in data.iter().enumerate() {
            assert_eq!(region.data[i], matches!(l, 7..=9));
        }
    }

    #[test]
    fn u8_conversion_is_exact_on_grid() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
    }
}
