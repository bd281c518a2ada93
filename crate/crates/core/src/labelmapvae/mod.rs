//! Conditional VAE over per-part mask sequences.
//!
//! Masks are box-local `64x64` rasters in canonical part order. The encoder
//! turns each mask into a 128-d feature, aggregates the sequence with a
//! bidirectional GRU (`H_s`), lifts a second bidirectional GRU over the
//! boxes to `H_b`, pools `H_s ⊙ H_b` over rows and gates it by category.
//! The decoder gates `z` by box and category embeddings, replicates the
//! result once per part and runs a bidirectional GRU whose per-step output
//! drives a shared transposed-convolution head. The dependence of part `k`
//! on earlier parts is carried by the recurrent state only.

mod compose;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

pub use compose::{compose_layout, paste_orders, LayoutSidecar, ObjectLayout, CANVAS_SIZE};

use crate::boxvae::GaussianParams;
use crate::dataset::NormalizedInstance;
use crate::geometry::BBox;
use crate::nn::{bi_gru, BiRnn, Conv2d, ConvTranspose2d, Gate, GruCell, Linear, ParamStore, Scope};
use crate::raster::Raster;
use crate::{Error, Result, LATENT_DIM, MASK_SIZE};

/// Width of the per-part mask feature and of `H_s`, `H_b`.
pub const PART_FEATURE: usize = 128;
/// Per-part box feature width before the lift (`2 x 4`).
pub const BOX_FEATURE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMapConfig {
    pub p_max: usize,
    pub num_categories: usize,
    pub latent: usize,
}

impl LabelMapConfig {
    pub fn new(p_max: usize, num_categories: usize) -> Self {
        LabelMapConfig {
            p_max,
            num_categories,
            latent: LATENT_DIM,
        }
    }
}

/// Batched masks and box conditioning.
#[derive(Clone, Debug)]
pub struct MaskBatch {
    /// `(B, p, 64, 64)`, all-zero for absent parts
    pub masks: Tensor,
    /// `(B, p, 4)`
    pub boxes: Tensor,
    /// `(B, p)`
    pub presence: Tensor,
    /// `(B, M)`
    pub category: Tensor,
}

/// Box conditioning of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCondition {
    pub category_id: usize,
    pub p_max: usize,
    pub boxes: BTreeMap<usize, BBox>,
}

impl BoxCondition {
    pub fn from_instance(inst: &NormalizedInstance) -> Self {
        BoxCondition {
            category_id: inst.category_id,
            p_max: inst.p_max(),
            boxes: inst.part_boxes.clone(),
        }
    }
}

fn one_hot(category_id: usize, m: usize) -> impl Iterator<Item = f64> {
    (1..=m).map(move |c| (c == category_id) as u8 as f64)
}

impl MaskBatch {
    /// Conditioning-only batch; the mask tensor is zero.
    pub fn from_conditions(conds: &[&BoxCondition], num_categories: usize, dtype: DType) -> Result<Self> {
        let b = conds.len();
        let p = conds.first().map_or(0, |c| c.p_max);
        let mut boxes = vec![0.0; b * p * 4];
        let mut presence = vec![0.0; b * p];
        let mut category = Vec::with_capacity(b * num_categories);
        for (i, c) in conds.iter().enumerate() {
            if c.p_max != p {
                return Err(Error::Shape("conditions in a batch must share p_max".into()));
            }
            for (&k, bb) in &c.boxes {
                presence[i * p + k] = 1.0;
                boxes[(i * p + k) * 4..(i * p + k + 1) * 4].copy_from_slice(&bb.to_array());
            }
            category.extend(one_hot(c.category_id, num_categories));
        }
        let dev = Device::Cpu;
        Ok(MaskBatch {
            masks: Tensor::zeros((b, p, MASK_SIZE, MASK_SIZE), dtype, &dev)?,
            boxes: Tensor::from_vec(boxes, (b, p, 4), &dev)?.to_dtype(dtype)?,
            presence: Tensor::from_vec(presence, (b, p), &dev)?.to_dtype(dtype)?,
            category: Tensor::from_vec(category, (b, num_categories), &dev)?.to_dtype(dtype)?,
        })
    }

    pub fn new(instances: &[&NormalizedInstance], num_categories: usize, dtype: DType) -> Result<Self> {
        let conds: Vec<BoxCondition> = instances.iter().map(|i| BoxCondition::from_instance(i)).collect();
        let refs: Vec<&BoxCondition> = conds.iter().collect();
        let mut batch = Self::from_conditions(&refs, num_categories, dtype)?;
        let p = conds.first().map_or(0, |c| c.p_max);
        let cell = MASK_SIZE * MASK_SIZE;
        let mut masks = vec![0f32; instances.len() * p * cell];
        for (i, inst) in instances.iter().enumerate() {
            for (&k, m) in &inst.part_masks {
                if m.width() != MASK_SIZE || m.height() != MASK_SIZE {
                    return Err(Error::Shape(format!("mask {k} is {}x{}", m.width(), m.height())));
                }
                let off = (i * p + k) * cell;
                for (dst, &v) in masks[off..off + cell].iter_mut().zip(m.as_slice()) {
                    *dst = v as f32;
                }
            }
        }
        batch.masks = Tensor::from_vec(masks, (instances.len(), p, MASK_SIZE, MASK_SIZE), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(batch)
    }

    /// `(B, p, 5)` rows of `[presence, box]`.
    pub fn box_rows(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.presence.unsqueeze(2)?, &self.boxes], 2)?)
    }

    pub fn len(&self) -> usize {
        self.masks.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Three stride-2 convolutions (64 to 8 pixels) and a linear map to 128.
#[derive(Clone, Debug)]
pub struct MaskConvEncoder {
    pub convs: [Conv2d; 3],
    pub fc: Linear,
}

impl MaskConvEncoder {
    pub fn new(scope: &Scope) -> Result<Self> {
        Ok(MaskConvEncoder {
            convs: [
                Conv2d::new(&scope.pp("c1"), 1, 16, 3, 2, 1)?,
                Conv2d::new(&scope.pp("c2"), 16, 32, 3, 2, 1)?,
                Conv2d::new(&scope.pp("c3"), 32, 64, 3, 2, 1)?,
            ],
            fc: Linear::new(&scope.pp("fc"), 64 * 8 * 8, PART_FEATURE)?,
        })
    }

    /// `(N, 64, 64)` to `(N, 128)`.
    pub fn forward(&self, masks: &Tensor) -> Result<Tensor> {
        let mut h = masks.unsqueeze(1)?;
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        Ok(self.fc.forward(&h.flatten_from(1)?)?.relu()?)
    }
}

/// Linear map to `64 x 8 x 8` and three transposed convolutions up to
/// `2 x 64 x 64` logits (channel 0 background, channel 1 foreground).
#[derive(Clone, Debug)]
pub struct MaskDeconvHead {
    pub fc: Linear,
    pub deconvs: [ConvTranspose2d; 3],
}

impl MaskDeconvHead {
    pub fn new(scope: &Scope, in_dim: usize) -> Result<Self> {
        Ok(MaskDeconvHead {
            fc: Linear::new(&scope.pp("fc"), in_dim, 64 * 8 * 8)?,
            deconvs: [
                ConvTranspose2d::new(&scope.pp("d1"), 64, 32, 4, 2, 1)?,
                ConvTranspose2d::new(&scope.pp("d2"), 32, 16, 4, 2, 1)?,
                ConvTranspose2d::new(&scope.pp("d3"), 16, 2, 4, 2, 1)?,
            ],
        })
    }

    /// `(N, in)` to `(N, 2, 64, 64)`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let n = h.dim(0)?;
        let mut x = self.fc.forward(h)?.relu()?.reshape((n, 64, 8, 8))?;
        for (i, d) in self.deconvs.iter().enumerate() {
            x = d.forward(&x)?;
            if i + 1 < self.deconvs.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Stacked per-part representations, each `(B, p, 128)`.
#[derive(Clone, Debug)]
pub struct MaskEncoderState {
    pub h_s: Tensor,
    pub h_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct MaskEncoder {
    pub conv: MaskConvEncoder,
    pub mask_rnn: BiRnn<GruCell>,
    pub box_rnn: BiRnn<GruCell>,
    pub box_lift: Linear,
    pub gate: Gate,
    pub mu: Linear,
    pub log_var: Linear,
}

impl MaskEncoder {
    pub fn new(scope: &Scope, cfg: &LabelMapConfig) -> Result<Self> {
        Ok(MaskEncoder {
            conv: MaskConvEncoder::new(&scope.pp("conv"))?,
            mask_rnn: bi_gru(&scope.pp("mask_rnn"), PART_FEATURE, PART_FEATURE / 2)?,
            box_rnn: bi_gru(&scope.pp("box_rnn"), 5, BOX_FEATURE / 2)?,
            box_lift: Linear::new(&scope.pp("box_lift"), BOX_FEATURE, PART_FEATURE)?,
            gate: Gate::new(&scope.pp("gate"), cfg.num_categories, PART_FEATURE)?,
            mu: Linear::new(&scope.pp("mu"), PART_FEATURE, cfg.latent)?,
            log_var: Linear::new(&scope.pp("log_var"), PART_FEATURE, cfg.latent)?,
        })
    }

    /// Absent slots are zeroed before encoding, so their content never
    /// reaches the posterior.
    pub fn state(&self, batch: &MaskBatch) -> Result<MaskEncoderState> {
        let (b, p, h, w) = batch.masks.dims4()?;
        let masks = batch.masks.broadcast_mul(&batch.presence.reshape((b, p, 1, 1))?)?;
        let feats = self.conv.forward(&masks.reshape((b * p, h, w))?)?.reshape((b, p, PART_FEATURE))?;
        let h_s = self.mask_rnn.forward(&feats)?;
        let h_b = self.box_lift.forward(&self.box_rnn.forward(&batch.box_rows()?)?)?;
        Ok(MaskEncoderState { h_s, h_b })
    }

    /// Category-gated pooled representation, `(B, 128)`.
    pub fn pooled(&self, state: &MaskEncoderState, category: &Tensor) -> Result<Tensor> {
        let pooled = state.h_s.mul(&state.h_b)?.mean(1)?;
        self.gate.forward(&pooled, category)
    }

    pub fn features(&self, batch: &MaskBatch) -> Result<Tensor> {
        self.pooled(&self.state(batch)?, &batch.category)
    }

    pub fn forward(&self, batch: &MaskBatch) -> Result<GaussianParams> {
        let h = self.features(batch)?;
        Ok(GaussianParams {
            mu: self.mu.forward(&h)?,
            log_var: self.log_var.forward(&h)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub box_gate: Gate,
    pub cat_gate: Gate,
    pub fc: Linear,
    pub rnn: BiRnn<GruCell>,
    pub head: MaskDeconvHead,
}

impl MaskDecoder {
    pub fn new(scope: &Scope, cfg: &LabelMapConfig) -> Result<Self> {
        Ok(MaskDecoder {
            box_gate: Gate::new(&scope.pp("box_gate"), cfg.p_max * 5, cfg.latent)?,
            cat_gate: Gate::new(&scope.pp("cat_gate"), cfg.num_categories, cfg.latent)?,
            fc: Linear::new(&scope.pp("fc"), cfg.latent, PART_FEATURE)?,
            rnn: bi_gru(&scope.pp("rnn"), PART_FEATURE, PART_FEATURE / 2)?,
            head: MaskDeconvHead::new(&scope.pp("head"), PART_FEATURE)?,
        })
    }

    /// `z` is `(B, latent)`; `box_rows` is `(B, p, 5)`. Returns logits
    /// `(B, p, 2, 64, 64)`.
    pub fn forward(&self, z: &Tensor, box_rows: &Tensor, category: &Tensor) -> Result<Tensor> {
        let (b, p, _) = box_rows.dims3()?;
        let gated = self.cat_gate.forward(&self.box_gate.forward(z, &box_rows.flatten_from(1)?)?, category)?;
        let z_g = self.fc.forward(&gated)?.relu()?;
        let seq = z_g.unsqueeze(1)?.repeat((1, p, 1))?;
        let h = self.rnn.forward(&seq)?;
        let logits = self.head.forward(&h.reshape((b * p, PART_FEATURE))?)?;
        Ok(logits.reshape((b, p, 2, MASK_SIZE, MASK_SIZE))?)
    }
}

/// Foreground probability per pixel, `(B, p, 64, 64)`.
pub fn foreground_probs(logits: &Tensor) -> Result<Tensor> {
    let probs = candle_nn::ops::softmax(logits, 2)?;
    Ok(probs.narrow(2, 1, 1)?.squeeze(2)?)
}

/// Mean per-pixel cross-entropy over present parts, `(B,)`. Samples with no
/// present part contribute zero.
pub fn mask_recon_loss(logits: &Tensor, masks: &Tensor, presence: &Tensor) -> Result<Tensor> {
    let (b, p, _, h, w) = logits.dims5()?;
    let ls = candle_nn::ops::log_softmax(logits, 2)?;
    let bg = ls.narrow(2, 0, 1)?.squeeze(2)?;
    let fg = ls.narrow(2, 1, 1)?.squeeze(2)?;
    let ll = (masks.mul(&fg)? + (masks.ones_like()? - masks)?.mul(&bg)?)?;
    let per_part = ll.reshape((b, p, h * w))?.mean(D::Minus1)?.neg()?;
    let count = presence.sum(1)?.maximum(1.0)?;
    Ok(per_part.mul(presence)?.sum(1)?.div(&count)?)
}

pub struct LabelMapVae {
    pub config: LabelMapConfig,
    pub store: ParamStore,
    pub encoder: MaskEncoder,
    pub decoder: MaskDecoder,
}

impl LabelMapVae {
    pub fn new(config: LabelMapConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let encoder = MaskEncoder::new(&root.pp("enc"), &config)?;
        let decoder = MaskDecoder::new(&root.pp("dec"), &config)?;
        Ok(LabelMapVae {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn batch(&self, instances: &[&NormalizedInstance]) -> Result<MaskBatch> {
        MaskBatch::new(instances, self.config.num_categories, self.dtype())
    }

    pub fn condition_batch(&self, conds: &[&BoxCondition]) -> Result<MaskBatch> {
        MaskBatch::from_conditions(conds, self.config.num_categories, self.dtype())
    }

    pub fn encode(&self, batch: &MaskBatch) -> Result<GaussianParams> {
        self.encoder.forward(batch)
    }

    pub fn decode(&self, z: &Tensor, batch: &MaskBatch) -> Result<Tensor> {
        self.decoder.forward(z, &batch.box_rows()?, &batch.category)
    }

    /// Thresholded masks of the present parts of sample `i`.
    pub fn masks_from_logits(logits: &Tensor, i: usize, present: &[usize]) -> Result<BTreeMap<usize, Raster>> {
        let probs = foreground_probs(&logits.get(i)?.unsqueeze(0)?)?.squeeze(0)?;
        present
            .iter()
            .map(|&k| {
                let v = probs.get(k)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k, Raster::from_probs(MASK_SIZE, MASK_SIZE, &v)?))
            })
            .collect()
    }
}
