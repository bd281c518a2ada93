use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::{renormalize, NormalizedInstance};
use crate::{Error, Result};

/// Ranges for random augmentation. All ranges are symmetric half-widths:
/// a scale range `r` draws factors from `[1 - r, 1 + r]`, independently
/// per axis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Per-part shift, normalized units per axis.
    pub part_translate: f64,
    pub part_scale: f64,
    pub object_scale: f64,
    pub mirror_prob: f64,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.part_translate >= 0.0
            && (0.0..1.0).contains(&self.part_scale)
            && (0.0..1.0).contains(&self.object_scale)
            && (0.0..=1.0).contains(&self.mirror_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPolicy::default()
    }
}

/// One concrete augmentation, applied in order: per-part scale about the box
/// center, per-part shift, object-level scale about the origin, mirror.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub part_scale: BTreeMap<usize, (f64, f64)>,
    pub part_shift: BTreeMap<usize, (f64, f64)>,
    pub object_scale: (f64, f64),
    pub mirror: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            part_scale: BTreeMap::new(),
            part_shift: BTreeMap::new(),
            object_scale: (1.0, 1.0),
            mirror: false,
        }
    }

    pub fn sample(inst: &NormalizedInstance, policy: &AugmentPolicy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let mut draw = AugmentDraw::identity();
        for &k in inst.part_boxes.keys() {
            let s = (1.0 + sym(policy.part_scale), 1.0 + sym(policy.part_scale));
            let t = (sym(policy.part_translate), sym(policy.part_translate));
            if s != (1.0, 1.0) {
                draw.part_scale.insert(k, s);
            }
            if t != (0.0, 0.0) {
                draw.part_shift.insert(k, t);
            }
        }
        draw.object_scale = (1.0 + sym(policy.object_scale), 1.0 + sym(policy.object_scale));
        draw.mirror = policy.mirror_prob > 0.0 && rng.random_bool(policy.mirror_prob);
        draw
    }
}

/// Result of an augmentation together with the number of boxes that had to
/// be widened to the minimum size.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub instance: NormalizedInstance,
    pub clamp_events: usize,
}

pub fn augment(inst: &NormalizedInstance, seed: u64, policy: &AugmentPolicy) -> Result<Augmented> {
    policy.validate()?;
    apply_draw(inst, &AugmentDraw::sample(inst, policy, seed))
}

pub fn apply_draw(inst: &NormalizedInstance, draw: &AugmentDraw) -> Result<Augmented> {
    let mut out = inst.clone();
    for (k, b) in out.part_boxes.iter_mut() {
        if let Some(&(sx, sy)) = draw.part_scale.get(k) {
            *b = b.scaled_about_center(sx, sy);
        }
        if let Some(&(dx, dy)) = draw.part_shift.get(k) {
            *b = b.translated(dx, dy);
        }
        let (sx, sy) = draw.object_scale;
        if (sx, sy) != (1.0, 1.0) {
            *b = b.scaled_about_origin(sx, sy);
        }
        if draw.mirror {
            *b = b.mirrored();
        }
    }
    if draw.mirror {
        for m in out.part_masks.values_mut() {
            *m = m.flipped_horizontal();
        }
    }
    let mut out = renormalize(&out)?;
    let mut clamp_events = 0;
    for b in out.part_boxes.values_mut() {
        if b.enforce_min_size() {
            clamp_events += 1;
        }
    }
    Ok(Augmented {
        instance: out,
        clamp_events,
    })
}
