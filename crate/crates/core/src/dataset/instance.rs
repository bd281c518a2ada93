use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::raster::{resize_mask, Raster};
use crate::{Error, Result, MASK_SIZE};

/// One annotated object at native image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub category_id: usize,
    /// Full-image masks keyed by canonical part index.
    pub part_masks: BTreeMap<usize, Raster>,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

/// An object centered in `[-1, 1]^2` with one box and one box-local
/// `MASK_SIZE x MASK_SIZE` mask per present part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedInstance {
    pub category_id: usize,
    pub part_boxes: BTreeMap<usize, BBox>,
    /// Each mask covers exactly its part box.
    pub part_masks: BTreeMap<usize, Raster>,
    pub presence: Vec<u8>,
}

impl NormalizedInstance {
    pub fn p_max(&self) -> usize {
        self.presence.len()
    }

    pub fn is_present(&self, part: usize) -> bool {
        self.presence.get(part).is_some_and(|&v| v == 1)
    }

    pub fn present_parts(&self) -> Vec<usize> {
        self.part_boxes.keys().copied().collect()
    }

    /// Union of all part boxes.
    pub fn extent(&self) -> Option<BBox> {
        self.part_boxes.values().copied().reduce(|a, b| a.union(&b))
    }

    /// Copy without one part.
    pub fn without_part(&self, part: usize) -> NormalizedInstance {
        let mut out = self.clone();
        out.part_boxes.remove(&part);
        out.part_masks.remove(&part);
        if let Some(v) = out.presence.get_mut(part) {
            *v = 0;
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (&k, b) in &self.part_boxes {
            if k >= self.presence.len() {
                return Err(Error::Shape(format!("part {k} beyond p_max {}", self.presence.len())));
            }
            if !b.is_proper() || b.to_array().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Degenerate(format!("part {k} has box {b:?}")));
            }
            if !self.part_masks.contains_key(&k) {
                return Err(Error::Shape(format!("part {k} has a box but no mask")));
            }
        }
        for (k, &p) in self.presence.iter().enumerate() {
            if (p == 1) != self.part_boxes.contains_key(&k) {
                return Err(Error::Shape(format!("presence bit {k} disagrees with boxes")));
            }
        }
        Ok(())
    }
}

/// Crops an object from its masks, centers it, and scales its larger axis
/// to span exactly `[-1, 1]`. Empty masks count as absent parts.
pub fn normalize_instance(obj: &ObjectInstance, p_max: usize) -> Result<NormalizedInstance> {
    let (h, w) = obj.image_size;
    let mut rects = BTreeMap::new();
    for (&k, mask) in &obj.part_masks {
        if k >= p_max {
            return Err(Error::Shape(format!("part index {k} >= p_max {p_max}")));
        }
        if mask.width() != w || mask.height() != h {
            return Err(Error::Shape(format!(
                "mask for part {k} is {}x{}, image is {w}x{h}",
                mask.width(),
                mask.height()
            )));
        }
        if let Some(r) = mask.bounds() {
            rects.insert(k, r);
        }
    }
    if rects.is_empty() {
        return Err(Error::Degenerate(format!(
            "instance of category {} has no nonempty part mask",
            obj.category_id
        )));
    }

    let x0 = rects.values().map(|r| r.x0).min().unwrap() as f64;
    let y0 = rects.values().map(|r| r.y0).min().unwrap() as f64;
    let x1 = rects.values().map(|r| r.x1).max().unwrap() as f64;
    let y1 = rects.values().map(|r| r.y1).max().unwrap() as f64;
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let half = 0.5 * (x1 - x0).max(y1 - y0);

    let mut out = NormalizedInstance {
        category_id: obj.category_id,
        part_boxes: BTreeMap::new(),
        part_masks: BTreeMap::new(),
        presence: vec![0; p_max],
    };
    for (&k, r) in &rects {
        let b = BBox::new(
            (r.x0 as f64 - cx) / half,
            (r.y0 as f64 - cy) / half,
            (r.x1 as f64 - cx) / half,
            (r.y1 as f64 - cy) / half,
        );
        let local = obj.part_masks[&k].crop(*r);
        out.part_boxes.insert(k, b);
        out.part_masks.insert(k, resize_mask(&local, MASK_SIZE, MASK_SIZE)?);
        out.presence[k] = 1;
    }
    Ok(out)
}

/// Re-centers the union of part boxes and rescales its larger axis to
/// `[-1, 1]`. Idempotent; a no-op on the output of [`normalize_instance`].
pub fn renormalize(inst: &NormalizedInstance) -> Result<NormalizedInstance> {
    let ext = inst
        .extent()
        .ok_or_else(|| Error::Degenerate("instance has no parts".into()))?;
    let (cx, cy) = ext.center();
    let half = 0.5 * ext.width().max(ext.height());
    if !(half > 0.0) || !half.is_finite() {
        return Err(Error::Degenerate(format!("instance extent {ext:?}")));
    }
    let mut out = inst.clone();
    for b in out.part_boxes.values_mut() {
        *b = BBox::new(
            (b.x_min - cx) / half,
            (b.y_min - cy) / half,
            (b.x_max - cx) / half,
            (b.y_max - cy) / half,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(w: usize, h: usize, parts: Vec<(usize, Raster)>) -> ObjectInstance {
        ObjectInstance {
            category_id: 1,
            part_masks: parts.into_iter().collect(),
            image_size: (h, w),
        }
    }

    #[test]
    fn full_image_part_spans_unit_square() {
        let obj = instance(32, 32, vec![(0, Raster::filled(32, 32))]);
        let n = normalize_instance(&obj, 3).unwrap();
        assert_eq!(n.part_boxes[&0], BBox::new(-1.0, -1.0, 1.0, 1.0));
        assert_eq!(n.presence, vec![1, 0, 0]);
        assert_eq!(n.part_masks[&0].count(), MASK_SIZE * MASK_SIZE);
    }

    #[test]
    fn left_half_part_of_square_object() {
        // object occupies columns 8..24, rows 8..24 of a 40x40 image
        let left = Raster::from_fn(40, 40, |x, y| (8..16).contains(&x) && (8..24).contains(&y));
        let right = Raster::from_fn(40, 40, |x, y| (16..24).contains(&x) && (8..24).contains(&y));
        let n = normalize_instance(&instance(40, 40, vec![(0, left), (1, right)]), 2).unwrap();
        let b = n.part_boxes[&0];
        assert_eq!((b.x_min, b.x_max), (-1.0, 0.0));
        assert_eq!((b.y_min, b.y_max), (-1.0, 1.0));
    }

    #[test]
    fn disjoint_parts_are_centered() {
        // part 0 at cols 2..6 rows 10..14; part 1 at cols 20..30 rows 12..16
        let a = Raster::from_fn(40, 30, |x, y| (2..6).contains(&x) && (10..14).contains(&y));
        let b = Raster::from_fn(40, 30, |x, y| (20..30).contains(&x) && (12..16).contains(&y));
        let n = normalize_instance(&instance(40, 30, vec![(0, a), (1, b)]), 2).unwrap();
        // union cols 2..30 (28 wide), rows 10..16 (6 tall): half extent 14, center (16, 13)
        assert_eq!(n.part_boxes[&0], BBox::new(-1.0, -3.0 / 14.0, -10.0 / 14.0, 1.0 / 14.0));
        assert_eq!(n.part_boxes[&1], BBox::new(4.0 / 14.0, -1.0 / 14.0, 1.0, 3.0 / 14.0));
        let ext = n.extent().unwrap();
        assert_eq!(ext.center(), (0.0, 0.0));
        n.check_invariants().unwrap();
    }

    #[test]
    fn all_empty_is_degenerate() {
        let obj = instance(8, 8, vec![(0, Raster::new(8, 8))]);
        assert!(matches!(normalize_instance(&obj, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn empty_mask_means_absent() {
        let obj = instance(8, 8, vec![(0, Raster::new(8, 8)), (1, Raster::filled(8, 8))]);
        let n = normalize_instance(&obj, 2).unwrap();
        assert_eq!(n.presence, vec![0, 1]);
    }

    #[test]
    fn renormalize_is_idempotent_on_normalized_output() {
        let a = Raster::from_fn(50, 37, |x, y| (3..19).contains(&x) && (5..31).contains(&y));
        let b = Raster::from_fn(50, 37, |x, y| (15..44).contains(&x) && (2..9).contains(&y));
        let n = normalize_instance(&instance(50, 37, vec![(0, a), (2, b)]), 3).unwrap();
        let again = renormalize(&n).unwrap();
        assert_eq!(again, n);
    }
}
