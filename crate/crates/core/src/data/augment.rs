//! Geometric augmentation of an image together with its boxes.
//!
//! Coordinates are continuous: pixel `(i, j)` covers `[i, i+1] × [j, j+1]`.
//! Affine transforms act about the image centre. Pixels are resampled
//! bilinearly from the inverse map with zero fill; flips and quarter turns
//! use exact index maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bilinear, AnnotatedImage, BBox, ImageBuf};
use crate::error::{Error, Result};

pub const SCALE_RANGE: (f64, f64) = (0.5, 1.5);
pub const MAX_ROTATE_DEGREES: f64 = 15.0;
pub const MAX_SHEAR: f64 = 0.2;
/// Translation bound as a fraction of the image extent along that axis.
pub const MAX_TRANSLATE_FRACTION: f64 = 0.2;
/// Boxes shrunk below this area (px²) by a transform are dropped.
pub const MIN_BOX_AREA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    HFlip,
    VFlip,
    Scale { factor: f64 },
    Rotate { degrees: f64 },
    Shear { k: f64 },
    Translate { dx: f64, dy: f64 },
    /// Counter-clockwise quarter turns; square images only.
    Rot90 { quarter_turns: u8 },
}

/// 2×3 affine map `p ↦ A p + t` in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    a: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    /// `A (p − c) + c + shift`.
    fn about_centre(a: [[f64; 2]; 2], width: f64, height: f64, shift: [f64; 2]) -> Self {
        let (cx, cy) = (width / 2.0, height / 2.0);
        let t = [
            cx + shift[0] - a[0][0] * cx - a[0][1] * cy,
            cy + shift[1] - a[1][0] * cx - a[1][1] * cy,
        ];
        Affine { a, t }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    fn inverse(&self) -> Affine {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Affine { a: inv, t }
    }
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
            Transform::Scale { .. } => "scale",
            Transform::Rotate { .. } => "rotate",
            Transform::Shear { .. } => "shear",
            Transform::Translate { .. } => "translate",
            Transform::Rot90 { .. } => "rot90",
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParam(what));
        match *self {
            Transform::HFlip | Transform::VFlip => Ok(()),
            Transform::Scale { factor } => {
                if factor.is_finite() && (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&factor) {
                    Ok(())
                } else {
                    bad(format!("scale factor {factor} outside [{}, {}]", SCALE_RANGE.0, SCALE_RANGE.1))
                }
            }
            Transform::Rotate { degrees } => {
                if degrees.is_finite() && degrees.abs() <= MAX_ROTATE_DEGREES {
                    Ok(())
                } else {
                    bad(format!("rotation {degrees}° exceeds ±{MAX_ROTATE_DEGREES}°"))
                }
            }
            Transform::Shear { k } => {
                if k.is_finite() && k.abs() <= MAX_SHEAR {
                    Ok(())
                } else {
                    bad(format!("shear {k} exceeds ±{MAX_SHEAR}"))
                }
            }
            Transform::Translate { dx, dy } => {
                let (mx, my) = (MAX_TRANSLATE_FRACTION * width as f64, MAX_TRANSLATE_FRACTION * height as f64);
                if dx.is_finite() && dy.is_finite() && dx.abs() <= mx && dy.abs() <= my {
                    Ok(())
                } else {
                    bad(format!("translation ({dx}, {dy}) exceeds ({mx}, {my})"))
                }
            }
            Transform::Rot90 { .. } => {
                if width == height {
                    Ok(())
                } else {
                    bad(format!("rot90 needs a square image, got {width}×{height}"))
                }
            }
        }
    }

    /// The continuous-coordinate map of this transform.
    fn affine(&self, width: usize, height: usize) -> Affine {
        let (w, h) = (width as f64, height as f64);
        let about = |a| Affine::about_centre(a, w, h, [0.0, 0.0]);
        match *self {
            Transform::HFlip => Affine { a: [[-1.0, 0.0], [0.0, 1.0]], t: [w, 0.0] },
            Transform::VFlip => Affine { a: [[1.0, 0.0], [0.0, -1.0]], t: [0.0, h] },
            Transform::Scale { factor } => about([[factor, 0.0], [0.0, factor]]),
            Transform::Rotate { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                about([[c, s], [-s, c]])
            }
            Transform::Shear { k } => about([[1.0, k], [0.0, 1.0]]),
            Transform::Translate { dx, dy } => Affine { a: [[1.0, 0.0], [0.0, 1.0]], t: [dx, dy] },
            Transform::Rot90 { quarter_turns } => match quarter_turns % 4 {
                0 => Affine { a: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] },
                1 => Affine { a: [[0.0, 1.0], [-1.0, 0.0]], t: [0.0, w] },
                2 => Affine { a: [[-1.0, 0.0], [0.0, -1.0]], t: [w, h] },
                _ => Affine { a: [[0.0, -1.0], [1.0, 0.0]], t: [h, 0.0] },
            },
        }
    }

    /// Draws one transform of a uniformly chosen kind with uniform
    /// parameters inside the documented ranges.
    pub fn sample(rng: &mut impl Rng, width: usize, height: usize) -> Transform {
        match rng.random_range(0..6) {
            0 => Transform::HFlip,
            1 => Transform::VFlip,
            2 => Transform::Scale { factor: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1) },
            3 => Transform::Rotate { degrees: rng.random_range(-MAX_ROTATE_DEGREES..=MAX_ROTATE_DEGREES) },
            4 => Transform::Shear { k: rng.random_range(-MAX_SHEAR..=MAX_SHEAR) },
            _ => {
                let (mx, my) = (MAX_TRANSLATE_FRACTION * width as f64, MAX_TRANSLATE_FRACTION * height as f64);
                Transform::Translate { dx: rng.random_range(-mx..=mx), dy: rng.random_range(-my..=my) }
            }
        }
    }

    /// A chain of one to three sampled transforms.
    pub fn sample_chain(rng: &mut impl Rng, width: usize, height: usize) -> Vec<Transform> {
        let n = rng.random_range(1..=3);
        (0..n).map(|_| Transform::sample(rng, width, height)).collect()
    }
}

/// Maps a box through `t`: exact for flips and quarter turns, otherwise the
/// axis-aligned hull of the four mapped corners. The result is clamped to
/// the image. `None` when the box leaves the image or shrinks below
/// [`MIN_BOX_AREA`].
pub fn transform_box(b: BBox, t: &Transform, width: usize, height: usize) -> Option<BBox> {
    let (w, h) = (width as f64, height as f64);
    let mapped = match *t {
        Transform::HFlip => BBox::new(w - b.x - b.w, b.y, b.w, b.h),
        Transform::VFlip => BBox::new(b.x, h - b.y - b.h, b.w, b.h),
        _ => {
            let m = t.affine(width, height);
            let pts = b.corners().map(|(x, y)| m.apply(x, y));
            let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            BBox::new(x0, y0, x1 - x0, y1 - y0)
        }
    };
    let clamped = mapped.clamp(w, h);
    let area = clamped.area();
    if area <= 0.0 || (area < MIN_BOX_AREA && area < b.area()) {
        return None;
    }
    Some(clamped)
}

fn transform_pixels(img: &ImageBuf, t: &Transform) -> ImageBuf {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut out = ImageBuf::filled(w, h, ch, 0);
    match *t {
        Transform::HFlip => {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..ch {
                        out.set(x, y, c, img.get(w - 1 - x, y, c));
                    }
                }
            }
        }
        Transform::VFlip => {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..ch {
                        out.set(x, y, c, img.get(x, h - 1 - y, c));
                    }
                }
            }
        }
        Transform::Rot90 { quarter_turns } => {
            let n = w;
            for y in 0..n {
                for x in 0..n {
                    let (sx, sy) = match quarter_turns % 4 {
                        0 => (x, y),
                        1 => (n - 1 - y, x),
                        2 => (n - 1 - x, n - 1 - y),
                        _ => (y, n - 1 - x),
                    };
                    for c in 0..ch {
                        out.set(x, y, c, img.get(sx, sy, c));
                    }
                }
            }
        }
        _ => {
            let inv = t.affine(w, h).inverse();
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
                    for c in 0..ch {
                        let v = bilinear(img, sx - 0.5, sy - 0.5, c).unwrap_or(0.0);
                        out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
    }
    out
}

/// Applies one transform to the pixels (when loaded) and every box.
pub fn augment(img: &AnnotatedImage, t: &Transform) -> Result<AnnotatedImage> {
    t.validate(img.width, img.height)?;
    let instances = img
        .instances
        .iter()
        .filter_map(|inst| {
            transform_box(inst.bbox, t, img.width, img.height).map(|bbox| super::Instance { bbox, ..*inst })
        })
        .collect();
    Ok(AnnotatedImage {
        id: img.id,
        file_name: img.file_name.clone(),
        width: img.width,
        height: img.height,
        pixels: img.pixels.as_ref().map(|p| transform_pixels(p, t)),
        instances,
    })
}

/// Applies `chain` left to right.
pub fn augment_chain(img: &AnnotatedImage, chain: &[Transform]) -> Result<AnnotatedImage> {
    let mut cur = img.clone();
    for t in chain {
        cur = augment(&cur, t)?;
    }
    Ok(cur)
}
