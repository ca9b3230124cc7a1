//! Alignment, component centers, component crops and background extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{component_region, Image, LabelMask, RegionMap};
use crate::schema::{ComponentId, LabelSchema};

/// Five facial landmarks as `(x, y)` pixel coordinates: left eye, right eye,
/// nose tip, left mouth corner, right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks5(pub [[f64; 2]; 5]);

/// Canonical template at 256x256.
const CANONICAL_256: [[f64; 2]; 5] = [
    [89.0, 108.0],
    [167.0, 108.0],
    [128.0, 150.0],
    [98.0, 186.0],
    [158.0, 186.0],
];

impl Landmarks5 {
    /// Canonical landmark positions, scaled linearly from the 256 template.
    pub fn canonical(resolution: usize) -> Self {
        let s = resolution as f64 / 256.0;
        Landmarks5(CANONICAL_256.map(|[x, y]| [x * s, y * s]))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for [x, y] in self.0 {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Alignment("non-finite landmark".into()));
            }
            if x < 0.0 || y < 0.0 || x > width as f64 || y > height as f64 {
                return Err(Error::Alignment(format!(
                    "landmark ({x}, {y}) outside {width}x{height} image"
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, t: &Similarity) -> Self {
        Landmarks5(self.0.map(|p| t.apply(p)))
    }
}

/// `(x, y) -> (a x - b y + tx, b x + a y + ty)`: uniform scale, rotation and
/// translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle.cos(),
            b: scale * angle.sin(),
            tx,
            ty,
        }
    }

    #[inline]
    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        ]
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.a * self.a + self.b * self.b;
        if det < 1e-12 {
            return Err(Error::Alignment("zero-scale transform".into()));
        }
        let (a, b) = (self.a / det, -self.b / det);
        Ok(Self {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Similarity) -> Self {
        let [tx, ty] = self.apply([other.tx, other.ty]);
        Self {
            a: self.a * other.a - self.b * other.b,
            b: self.b * other.a + self.a * other.b,
            tx,
            ty,
        }
    }

    /// Row-major 2x3 matrix.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.tx], [self.b, self.a, self.ty]]
    }
}

/// Least-squares similarity taking `from` onto `to`.
pub fn fit_similarity(from: &Landmarks5, to: &Landmarks5) -> Result<Similarity> {
    let mean = |pts: &[[f64; 2]; 5]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(ax, ay), p| (ax + p[0], ay + p[1]));
        [sx / 5.0, sy / 5.0]
    };
    let (ms, md) = (mean(&from.0), mean(&to.0));
    let (mut norm, mut dot, mut cross) = (0.0, 0.0, 0.0);
    for (s, d) in from.0.iter().zip(&to.0) {
        let (xs, ys) = (s[0] - ms[0], s[1] - ms[1]);
        let (xd, yd) = (d[0] - md[0], d[1] - md[1]);
        norm += xs * xs + ys * ys;
        dot += xs * xd + ys * yd;
        cross += xs * yd - ys * xd;
    }
    let spread = from
        .0
        .iter()
        .map(|p| (p[0] - ms[0]).hypot(p[1] - ms[1]))
        .fold(0.0, f64::max);
    if norm < 1e-9 || spread < 1e-6 {
        return Err(Error::Alignment("landmarks are coincident".into()));
    }
    let (a, b) = (dot / norm, cross / norm);
    if a.hypot(b) < 1e-9 {
        return Err(Error::Alignment("degenerate landmark configuration".into()));
    }
    Ok(Similarity {
        a,
        b,
        tx: md[0] - (a * ms[0] - b * ms[1]),
        ty: md[1] - (b * ms[0] + a * ms[1]),
    })
}

/// Bilinear resampling with edge clamping. `to_source` maps output pixel
/// coordinates to input coordinates.
pub fn warp_image(image: &Image, to_source: &Similarity, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    Image::from_fn(out_h, out_w, |r, c| {
        let [x, y] = to_source.apply([c as f64, r as f64]);
        bilinear(image, x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64))
    })
}

/// Nearest-neighbor resampling; pixels mapping outside the source become
/// background (label 0).
pub fn warp_mask(mask: &LabelMask, to_source: &Similarity, out_h: usize, out_w: usize) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = LabelMask::filled(out_h, out_w, 0);
    for r in 0..out_h {
        for c in 0..out_w {
            let [x, y] = to_source.apply([c as f64, r as f64]);
            let (xr, yr) = (x.round(), y.round());
            if xr >= 0.0 && yr >= 0.0 && (xr as usize) < w && (yr as usize) < h {
                out.set(r, c, mask.get(yr as usize, xr as usize));
            }
        }
    }
    out
}

/// Resize to `out_h x out_w` (bilinear for images, nearest for masks).
pub fn resize_pair(image: &Image, mask: &LabelMask, out_h: usize, out_w: usize) -> (Image, LabelMask) {
    let sx = image.width() as f64 / out_w as f64;
    let sy = image.height() as f64 / out_h as f64;
    let img = Image::from_fn(out_h, out_w, |r, c| {
        let x = (c as f64 * sx).min((image.width() - 1) as f64);
        let y = (r as f64 * sy).min((image.height() - 1) as f64);
        bilinear(image, x, y)
    });
    let mut m = LabelMask::filled(out_h, out_w, 0);
    for r in 0..out_h {
        for c in 0..out_w {
            let x = ((c as f64 * sx).round() as usize).min(mask.width() - 1);
            let y = ((r as f64 * sy).round() as usize).min(mask.height() - 1);
            m.set(r, c, mask.get(y, x));
        }
    }
    (img, m)
}

fn bilinear(image: &Image, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = (image.width(), image.height());
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let (p00, p01, p10, p11) = (image.get(y0, x0), image.get(y0, x1), image.get(y1, x0), image.get(y1, x1));
    std::array::from_fn(|k| {
        let top = p00[k] * (1.0 - fx) + p01[k] * fx;
        let bot = p10[k] * (1.0 - fx) + p11[k] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub image: Image,
    pub mask: LabelMask,
    /// Maps input pixel coordinates to aligned coordinates.
    pub transform: Similarity,
}

pub fn align(
    image: &Image,
    mask: &LabelMask,
    landmarks: &Landmarks5,
    canonical: &Landmarks5,
    out_size: usize,
) -> Result<AlignedSample> {
    if out_size == 0 {
        return Err(Error::Shape("alignment output size must be positive".into()));
    }
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    landmarks.validate(image.height(), image.width())?;
    let transform = fit_similarity(landmarks, canonical)?;
    let back = transform.inverse()?;
    Ok(AlignedSample {
        image: warp_image(image, &back, out_size, out_size),
        mask: warp_mask(mask, &back, out_size, out_size),
        transform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCenter {
    pub component: ComponentId,
    /// `(row, col)` in working-resolution pixels.
    pub center: (usize, usize),
    pub present: bool,
}

/// Integer-rounded centroid of each component's pixel set (ties round up).
pub fn component_centers(mask: &LabelMask, schema: &LabelSchema) -> [ComponentCenter; 5] {
    let table = schema.component_table();
    let mut acc = [(0u64, 0u64, 0u64); 5];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if let Some(Some(comp)) = table.get(mask.get(r, c) as usize) {
                let e = &mut acc[comp.index()];
                e.0 += r as u64;
                e.1 += c as u64;
                e.2 += 1;
            }
        }
    }
    ComponentId::ALL.map(|comp| {
        let (sr, sc, n) = acc[comp.index()];
        if n == 0 {
            ComponentCenter {
                component: comp,
                center: (mask.height() / 2, mask.width() / 2),
                present: false,
            }
        } else {
            // floor(s / n + 1/2) in exact integer arithmetic.
            let round = |s: u64| ((2 * s + n) / (2 * n)) as usize;
            ComponentCenter {
                component: comp,
                center: (round(sr), round(sc)),
                present: true,
            }
        }
    })
}

/// Fixed-size patch around one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCrop {
    pub component: ComponentId,
    pub image: Image,
    pub valid: RegionMap,
    /// Top-left of the crop window in the frame, after clamping.
    pub top_left: (usize, usize),
    pub center: ComponentCenter,
}

impl ComponentCrop {
    pub fn size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    /// Component center relative to the crop window.
    pub fn anchor(&self) -> (usize, usize) {
        (
            self.center.center.0.saturating_sub(self.top_left.0),
            self.center.center.1.saturating_sub(self.top_left.1),
        )
    }
}

/// Crop sizes for all five components at a square working resolution.
pub fn crop_sizes(resolution: usize, multiple: usize) -> [(usize, usize); 5] {
    ComponentId::ALL.map(|c| c.crop_size(resolution, multiple))
}

/// Window start along one axis: centered on `center`, clamped into the frame.
pub fn window_start(center: usize, size: usize, frame: usize) -> usize {
    (center.saturating_sub(size / 2)).min(frame - size)
}

pub fn extract_component(
    image: &Image,
    mask: &LabelMask,
    component: ComponentId,
    schema: &LabelSchema,
    size: (usize, usize),
) -> Result<ComponentCrop> {
    let center = component_centers(mask, schema)[component.index()];
    extract_component_at(image, mask, &center, schema, size)
}

/// As [`extract_component`] with a precomputed center.
pub fn extract_component_at(
    image: &Image,
    mask: &LabelMask,
    center: &ComponentCenter,
    schema: &LabelSchema,
    (ch, cw): (usize, usize),
) -> Result<ComponentCrop> {
    let (h, w) = (image.height(), image.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape("image and mask sizes differ".into()));
    }
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::Shape(format!(
            "crop {ch}x{cw} does not fit frame {h}x{w}"
        )));
    }
    let top = window_start(center.center.0, ch, h);
    let left = window_start(center.center.1, cw, w);
    let mut crop = Image::zeros(ch, cw);
    let mut valid = vec![false; ch * cw];
    if center.present {
        let region = component_region(mask, center.component, schema);
        for r in 0..ch {
            for c in 0..cw {
                if region.get(top + r, left + c) {
                    crop.set(r, c, image.get(top + r, left + c));
                    valid[r * cw + c] = true;
                }
            }
        }
    }
    Ok(ComponentCrop {
        component: center.component,
        image: crop,
        valid: RegionMap {
            height: ch,
            width: cw,
            data: valid,
        },
        top_left: (top, left),
        center: *center,
    })
}

/// Zeroes every pixel that belongs to one of the five components.
pub fn extract_background(image: &Image, mask: &LabelMask, schema: &LabelSchema) -> Result<Image> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::Shape("image and mask sizes differ".into()));
    }
    let table = schema.component_table();
    let mut out = image.clone();
    for r in 0..image.height() {
        for c in 0..image.width() {
            let label = mask.get(r, c) as usize;
            if table.get(label).copied().flatten().is_some() {
                out.set(r, c, [0.0; 3]);
            }
        }
    }
    Ok(out)
}

/// Binary background map (label maps to no component).
pub fn background_region(mask: &LabelMask, schema: &LabelSchema) -> RegionMap {
    let table = schema.component_table();
    RegionMap {
        height: mask.height(),
        width: mask.width(),
        data: mask
            .data()
            .iter()
            .map(|&l| table.get(l as usize).copied().flatten().is_none())
            .collect(),
    }
}
