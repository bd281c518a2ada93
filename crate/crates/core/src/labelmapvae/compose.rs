use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Corpus, Split};
use crate::geometry::BBox;
use crate::raster::{resize_mask, Raster};
use crate::{Error, Result};

pub const CANVAS_SIZE: usize = 256;

/// Part label map; label 0 is background and label `k + 1` is part `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub category_id: usize,
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    pub boxes: BTreeMap<usize, BBox>,
    pub order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// JSON sidecar written next to an exported label map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSidecar {
    pub category: usize,
    pub parts: Vec<usize>,
    pub boxes: BTreeMap<usize, BBox>,
    pub order: Vec<usize>,
    pub hash: String,
}

impl ObjectLayout {
    pub fn blank(category_id: usize, width: usize, height: usize) -> Self {
        ObjectLayout {
            category_id,
            width,
            height,
            labels: vec![0; width * height],
            boxes: BTreeMap::new(),
            order: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn part_pixels(&self, part: usize) -> usize {
        let l = part as u8 + 1;
        self.labels.iter().filter(|&&v| v == l).count()
    }

    /// Parts with at least one labeled pixel.
    pub fn visible_parts(&self) -> Vec<usize> {
        let mut seen = [false; 256];
        for &v in &self.labels {
            seen[v as usize] = true;
        }
        (1..256).filter(|&l| seen[l]).map(|l| l - 1).collect()
    }

    /// SHA-256 over the canvas size and labels.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(&self.labels);
        format!("{:x}", h.finalize())
    }

    /// Every pixel labeled `k + 1` lies in part `k`'s pixelized box.
    pub fn satisfies_containment(&self) -> bool {
        let rects: BTreeMap<usize, _> = self
            .boxes
            .iter()
            .filter_map(|(&k, b)| b.pixel_rect(self.width, self.height).map(|r| (k, r)))
            .collect();
        self.labels.iter().enumerate().all(|(i, &l)| {
            l == 0
                || rects
                    .get(&(l as usize - 1))
                    .is_some_and(|r| r.contains(i % self.width, i / self.width))
        })
    }

    pub fn sidecar(&self) -> LayoutSidecar {
        LayoutSidecar {
            category: self.category_id,
            parts: self.boxes.keys().copied().collect(),
            boxes: self.boxes.clone(),
            order: self.order.clone(),
            hash: self.hash(),
        }
    }

    /// Indexed-color PNG of the label map.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(palette());
            let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            w.write_image_data(&self.labels).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(buf)
    }

    /// Writes `{stem}.png` and `{stem}.json` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let png_path = dir.join(format!("{stem}.png"));
        std::fs::write(&png_path, self.png_bytes()?).map_err(Error::io(&png_path))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_vec_pretty(&self.sidecar())?;
        std::fs::write(&json_path, json).map_err(Error::io(&json_path))?;
        Ok(())
    }
}

/// 256-entry RGB palette: black background, then well-separated hues.
fn palette() -> Vec<u8> {
    let mut out = vec![0u8, 0, 0];
    for i in 1..256u32 {
        let hue = (i as f64 * 0.618_033_988_75).fract() * 6.0;
        let x = 1.0 - (hue % 2.0 - 1.0).abs();
        let (r, g, b) = match hue as u32 {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        out.extend([r, g, b].map(|c: f64| (55.0 + 200.0 * c) as u8));
    }
    out
}

/// Unclipped pixel extent of a box: `[x0, x1) x [y0, y1)`.
fn pixel_extent(b: &BBox, width: usize, height: usize) -> (i64, i64, i64, i64) {
    let px = |v: f64, n: usize| (v + 1.0) * 0.5 * n as f64;
    (
        px(b.x_min, width).floor() as i64,
        px(b.y_min, height).floor() as i64,
        px(b.x_max, width).ceil() as i64,
        px(b.y_max, height).ceil() as i64,
    )
}

/// Pastes box-local masks onto a `width x height` canvas in `order`; later
/// parts overwrite earlier ones. Present parts missing from `order` are
/// pasted last in index order.
pub fn compose_layout(
    category_id: usize,
    masks: &BTreeMap<usize, Raster>,
    boxes: &BTreeMap<usize, BBox>,
    order: &[usize],
    width: usize,
    height: usize,
) -> ObjectLayout {
    let mut layout = ObjectLayout::blank(category_id, width, height);
    let mut seq: Vec<usize> = order.iter().copied().filter(|k| boxes.contains_key(k)).collect();
    seq.extend(boxes.keys().filter(|k| !order.contains(k)));
    for &k in &seq {
        let b = &boxes[&k];
        layout.boxes.insert(k, *b);
        let Some(mask) = masks.get(&k) else {
            layout.warnings.push(format!("part {k} has no mask"));
            continue;
        };
        if b.pixel_rect(width, height).is_none() {
            layout.warnings.push(format!("part {k} box is degenerate on the canvas"));
            continue;
        }
        if mask.is_empty() {
            layout.warnings.push(format!("part {k} mask is empty"));
            continue;
        }
        let (x0, y0, x1, y1) = pixel_extent(b, width, height);
        let (w, h) = ((x1 - x0) as usize, (y1 - y0) as usize);
        let Ok(local) = resize_mask(mask, w, h) else {
            continue;
        };
        for ly in 0..h {
            let cy = y0 + ly as i64;
            if cy < 0 || cy >= height as i64 {
                continue;
            }
            for lx in 0..w {
                let cx = x0 + lx as i64;
                if cx >= 0 && cx < width as i64 && local.get(lx, ly) {
                    layout.labels[cy as usize * width + cx as usize] = k as u8 + 1;
                }
            }
        }
        layout.order.push(k);
    }
    layout
}

/// Per-category paste order from the training split: parts by descending
/// mean box area, ties broken by canonical index.
pub fn paste_orders(corpus: &Corpus) -> BTreeMap<usize, Vec<usize>> {
    let train: Vec<usize> = if corpus.splits.iter().any(|s| *s == Some(Split::Train)) {
        corpus.indices(Split::Train)
    } else {
        (0..corpus.len()).collect()
    };
    corpus
        .schemas
        .categories
        .iter()
        .map(|schema| {
            let n = schema.num_parts();
            let mut sum = vec![0.0; n];
            let mut count = vec![0usize; n];
            for &i in &train {
                let inst = &corpus.instances[i];
                if inst.category_id != schema.category_id {
                    continue;
                }
                for (&k, b) in &inst.part_boxes {
                    if k < n {
                        sum[k] += b.area();
                        count[k] += 1;
                    }
                }
            }
            let mean: Vec<f64> = (0..n).map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 }).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
            (schema.category_id, order)
        })
        .collect()
}
