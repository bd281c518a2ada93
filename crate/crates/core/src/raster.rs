//! Binary rasters for part masks.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::PixelRect;
use crate::{Error, Result};

/// Row-major binary raster; every cell is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut r = Raster::new(width, height);
        for y in 0..height {
            for x in 0..width {
                r.data[y * width + x] = f(x, y) as u8;
            }
        }
        r
    }

    /// Builds a raster from arbitrary values; nonzero means foreground.
    pub fn from_values(width: usize, height: usize, values: &[u8]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data: values.iter().map(|&v| (v != 0) as u8).collect(),
        })
    }

    /// Thresholds probabilities at 0.5 (inclusive).
    pub fn from_probs(width: usize, height: usize, probs: &[f32]) -> Result<Self> {
        if probs.len() != width * height {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                probs.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data: probs.iter().map(|&p| (p >= 0.5) as u8).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Tight foreground bounds as a half-open pixel rectangle.
    pub fn bounds(&self) -> Option<PixelRect> {
        let mut rect: Option<PixelRect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let r = rect.get_or_insert(PixelRect {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    r.x0 = r.x0.min(x);
                    r.y0 = r.y0.min(y);
                    r.x1 = r.x1.max(x + 1);
                    r.y1 = r.y1.max(y + 1);
                }
            }
        }
        rect
    }

    pub fn crop(&self, rect: PixelRect) -> Raster {
        let mut out = Raster::new(rect.width(), rect.height());
        for y in 0..rect.height() {
            let src = (rect.y0 + y) * self.width + rect.x0;
            out.data[y * rect.width()..(y + 1) * rect.width()]
                .copy_from_slice(&self.data[src..src + rect.width()]);
        }
        out
    }

    pub fn flipped_horizontal(&self) -> Raster {
        Raster::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resample_bilinear(&self, width: usize, height: usize) -> Vec<f32> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |t: usize, scale: f64, n: usize| {
            let s = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut out = vec![0f32; width * height];
        for ty in 0..height {
            let (y0, y1, fy) = axis(ty, sy, self.height);
            for tx in 0..width {
                let (x0, x1, fx) = axis(tx, sx, self.width);
                let v = |x: usize, y: usize| self.data[y * self.width + x] as f64;
                let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
                let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
                out[ty * width + tx] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
        out
    }

    /// Bilinear resample thresholded at 0.5, without any fallback.
    pub fn resized(&self, width: usize, height: usize) -> Raster {
        let probs = self.resample_bilinear(width, height);
        Raster {
            width,
            height,
            data: probs.iter().map(|&p| (p >= 0.5) as u8).collect(),
        }
    }
}

/// Resamples a nonempty mask to `width x height`.
///
/// The result is never empty: when thresholding wipes out a thin mask, the
/// target pixel under the source foreground centroid is switched on.
pub fn resize_mask(mask: &Raster, width: usize, height: usize) -> Result<Raster> {
    if mask.is_empty() {
        return Err(Error::Degenerate("cannot resize an empty mask".into()));
    }
    let mut out = mask.resized(width, height);
    if out.is_empty() {
        let (mut cx, mut cy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    cx += x as f64 + 0.5;
                    cy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        let tx = ((cx / n) * width as f64 / mask.width as f64) as usize;
        let ty = ((cy / n) * height as f64 / mask.height as f64) as usize;
        out.set(tx.min(width - 1), ty.min(height - 1), true);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PackedRaster {
    width: usize,
    height: usize,
    bits: String,
}

impl Serialize for Raster {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut bytes = vec![0u8; self.data.len().div_ceil(8)];
        for (i, &v) in self.data.iter().enumerate() {
            bytes[i / 8] |= v << (i % 8);
        }
        PackedRaster {
            width: self.width,
            height: self.height,
            bits: B64.encode(bytes),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Raster {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let packed = PackedRaster::deserialize(d)?;
        let bytes = B64.decode(&packed.bits).map_err(serde::de::Error::custom)?;
        let n = packed.width * packed.height;
        if bytes.len() != n.div_ceil(8) {
            return Err(serde::de::Error::custom("raster bit length mismatch"));
        }
        let data = (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
        Ok(Raster {
            width: packed.width,
            height: packed.height,
            data,
        })
    }
}
