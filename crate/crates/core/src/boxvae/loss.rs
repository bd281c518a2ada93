//! Composite box-graph reconstruction loss.
//!
//! Every function works on a leading batch dimension and returns one value
//! per sample, so callers can average or inspect individual instances.
//! `p` below is always the global part count `p_max`.

use candle_core::{Tensor, D};

use super::{BoxDecodeOutput, GraphBatch};
use crate::Result;

pub const EPS_IOU: f64 = 1e-6;
pub const EPS_PROB: f64 = 1e-7;
/// Keeps the center-distance square root differentiable at zero.
const EPS_DIST: f64 = 1e-12;

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(EPS_PROB, 1.0 - EPS_PROB)?)
}

/// Elementwise binary cross-entropy on clamped probabilities.
fn bce(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let p = clamp_prob(probs)?;
    let pos = targets.mul(&p.log()?)?;
    let neg = (targets.ones_like()? - targets)?.mul(&(p.ones_like()? - &p)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

/// `(B, p)` probabilities and targets to `(B,)`: factored Bernoulli NLL over `p`.
pub fn presence_nll(probs: &Tensor, presence: &Tensor) -> Result<Tensor> {
    let p = probs.dim(D::Minus1)? as f64;
    Ok((bce(probs, presence)?.sum(D::Minus1)? / p)?)
}

/// IoU over the last dimension, with the predicted corners sorted per axis.
pub fn box_iou(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    iou_masked(pred, target, None)
}

/// `-ln(IoU + eps)` for boxes in the last dimension. Predicted corners are
/// sorted per axis first, so a flipped prediction still has a gradient.
pub fn box_iou_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((box_iou(pred, target)? + EPS_IOU)?.log()?.neg()?)
}

/// IoU per box; where `mask` is zero the union is padded so absent rows with
/// all-zero targets stay finite.
fn iou_masked(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1).and_then(|c| c.squeeze(D::Minus1));
    let (a0, a1, a2, a3) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (px0, px1) = (a0.minimum(&a2)?, a0.maximum(&a2)?);
    let (py0, py1) = (a1.minimum(&a3)?, a1.maximum(&a3)?);
    let (tx0, ty0, tx1, ty1) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let iw = (px1.minimum(&tx1)? - px0.maximum(&tx0)?)?.relu()?;
    let ih = (py1.minimum(&ty1)? - py0.maximum(&ty0)?)?.relu()?;
    let inter = iw.mul(&ih)?;
    let area_p = (&px1 - &px0)?.mul(&(&py1 - &py0)?)?;
    let area_t = (&tx1 - &tx0)?.mul(&(&ty1 - &ty0)?)?;
    let mut union = ((area_p + area_t)? - &inter)?;
    if let Some(m) = mask {
        union = (union + (m.ones_like()? - m)?)?;
    }
    Ok(inter.div(&union)?)
}

/// Sum of squared coordinate differences over the last dimension.
pub fn box_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.sum(D::Minus1)?)
}

/// `(B, p, 4)` boxes to `(B,)`: per-box MSE plus IoU loss over present
/// parts, divided by `p`.
pub fn box_terms(pred: &Tensor, target: &Tensor, presence: &Tensor) -> Result<Tensor> {
    let p = presence.dim(D::Minus1)? as f64;
    let iou = iou_masked(pred, target, Some(presence))?;
    let iou_loss = (iou + EPS_IOU)?.log()?.neg()?;
    let per_box = (box_mse(pred, target)? + iou_loss)?;
    Ok((per_box.mul(presence)?.sum(D::Minus1)? / p)?)
}

fn centers(b: &Tensor) -> Result<Tensor> {
    let lo = b.narrow(D::Minus1, 0, 2)?;
    let hi = b.narrow(D::Minus1, 2, 2)?;
    Ok(((lo + hi)? * 0.5)?)
}

/// `(B, p, p)` center distances.
fn center_distances(b: &Tensor) -> Result<Tensor> {
    let c = centers(b)?;
    let diff = c.unsqueeze(2)?.broadcast_sub(&c.unsqueeze(1)?)?;
    Ok((diff.sqr()?.sum(D::Minus1)? + EPS_DIST)?.sqrt()?)
}

/// Squared differences of center distances over ordered present pairs,
/// divided by `p(p-1)`.
pub fn pairwise_center_loss(pred: &Tensor, target: &Tensor, presence: &Tensor) -> Result<Tensor> {
    let (b, p) = presence.dims2()?;
    if p < 2 {
        return Ok(Tensor::zeros(b, presence.dtype(), presence.device())?);
    }
    let pairs = presence.unsqueeze(2)?.broadcast_mul(&presence.unsqueeze(1)?)?;
    let off_diag = (Tensor::ones((p, p), presence.dtype(), presence.device())?
        - Tensor::eye(p, presence.dtype(), presence.device())?)?;
    let pairs = pairs.broadcast_mul(&off_diag)?;
    let sq = (center_distances(pred)? - center_distances(target)?)?.sqr()?;
    Ok((sq.mul(&pairs)?.sum((1, 2))? / (p * (p - 1)) as f64)?)
}

/// `(B, p, p)` to `(B,)`: BCE summed over all entries, divided by `p^2`.
pub fn adjacency_bce(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = probs.dim(D::Minus1)?;
    Ok((bce(probs, target)?.sum((1, 2))? / (p * p) as f64)?)
}

/// Per-sample loss terms, each shaped `(B,)`.
#[derive(Clone, Debug)]
pub struct ReconLoss {
    pub total: Tensor,
    pub presence: Tensor,
    pub boxes: Tensor,
    pub center: Tensor,
    pub adjacency: Tensor,
}

/// Batch means of [`ReconLoss`] as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct ReconBreakdown {
    pub total: f64,
    pub presence: f64,
    pub boxes: f64,
    pub center: f64,
    pub adjacency: f64,
}

impl ReconLoss {
    pub fn breakdown(&self) -> Result<ReconBreakdown> {
        let mean = |t: &Tensor| -> Result<f64> {
            Ok(t.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        Ok(ReconBreakdown {
            total: mean(&self.total)?,
            presence: mean(&self.presence)?,
            boxes: mean(&self.boxes)?,
            center: mean(&self.center)?,
            adjacency: mean(&self.adjacency)?,
        })
    }
}

pub fn boxvae_recon_loss(out: &BoxDecodeOutput, target: &GraphBatch) -> Result<ReconLoss> {
    let presence = presence_nll(&out.presence, &target.presence)?;
    let boxes = box_terms(&out.boxes, &target.boxes, &target.presence)?;
    let center = pairwise_center_loss(&out.boxes, &target.boxes, &target.presence)?;
    let adjacency = adjacency_bce(&out.adjacency, &target.adjacency)?;
    let total = (((&presence + &boxes)? + &center)? + &adjacency)?;
    Ok(ReconLoss {
        total,
        presence,
        boxes,
        center,
        adjacency,
    })
}
