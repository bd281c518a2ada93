//! Box-then-shape recurrent baseline. A bidirectional box LSTM emits a
//! Gaussian mixture per part; sampled boxes then drive a shape LSTM that
//! emits one mask per part.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxvae::ConditioningVector;
use crate::geometry::BBox;
use crate::labelmapvae::{mask_recon_loss, paste_orders, LabelMapVae, MaskBatch, MaskDeconvHead, PART_FEATURE};
use crate::nn::{bi_lstm, BiRnn, Linear, LstmCell, ParamStore};
use crate::raster::Raster;
use crate::training::{CheckpointMeta, CheckpointPaths, Stage, StageModel, TrainData};
use crate::{Error, Result, MASK_SIZE};

/// Mixture components per part box.
pub const GMM_COMPONENTS: usize = 3;
/// Recurrent hidden size per direction.
pub const BSLSTM_HIDDEN: usize = 32;
pub const LOG_SCALE_MIN: f64 = -7.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Diagonal Gaussian mixture over one decoded box vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GMMBoxParams {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 4]>,
}

impl GMMBoxParams {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.log_scales.len() != k {
            return Err(Error::Shape(format!(
                "mixture with {k} weights, {} means, {} scales",
                self.means.len(),
                self.log_scales.len()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Degenerate(format!("mixture weights {:?} are not a simplex point", self.weights)));
        }
        Ok(())
    }

    /// `-ln sum_k w_k N(x; mu_k, diag(exp(2 s_k)))`.
    pub fn nll(&self, x: [f64; 4]) -> f64 {
        let terms: Vec<f64> = (0..self.num_components())
            .map(|k| {
                let comp: f64 = (0..4)
                    .map(|d| {
                        let s = self.log_scales[k][d];
                        let z = (x[d] - self.means[k][d]) / s.exp();
                        -0.5 * z * z - s - HALF_LN_2PI
                    })
                    .sum();
                self.weights[k].ln() + comp
            })
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        -(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
    }
}

/// Draws a component by weight, then a diagonal Gaussian sample, clamped
/// to `[-1, 1]`.
pub fn sample_box_from_gmm<R: Rng + ?Sized>(params: &GMMBoxParams, rng: &mut R) -> [f64; 4] {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = params.num_components() - 1;
    for (i, w) in params.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let mut out = [0.0; 4];
    for (d, o) in out.iter_mut().enumerate() {
        let n: f64 = StandardNormal.sample(rng);
        *o = (params.means[k][d] + params.log_scales[k][d].exp() * n).clamp(-1.0, 1.0);
    }
    out
}

/// Tensor mixture heads for a batch of part sequences.
#[derive(Clone, Debug)]
pub struct GmmHeads {
    /// `(B, p, K)`
    pub weight_logits: Tensor,
    /// `(B, p, K, 4)`
    pub means: Tensor,
    /// `(B, p, K, 4)`, clamped to the scale range
    pub log_scales: Tensor,
}

impl GmmHeads {
    pub fn params(&self, i: usize, part: usize) -> Result<GMMBoxParams> {
        let w = candle_nn::ops::softmax(&self.weight_logits.get(i)?.get(part)?, 0)?;
        let w = w.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let rows = |t: &Tensor| -> Result<Vec<[f64; 4]>> {
            let v = t.get(i)?.get(part)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            Ok(v.into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect())
        };
        Ok(GMMBoxParams {
            weights: w,
            means: rows(&self.means)?,
            log_scales: rows(&self.log_scales)?,
        })
    }
}

/// Mixture negative log-likelihood of `x` `(B, p, 4)`, per part `(B, p)`.
pub fn gmm_nll_tensor(heads: &GmmHeads, x: &Tensor) -> Result<Tensor> {
    let diff = x.unsqueeze(2)?.broadcast_sub(&heads.means)?;
    let z = diff.div(&heads.log_scales.exp()?)?;
    let comp = ((z.sqr()? * -0.5)? - &heads.log_scales)?.sum(D::Minus1)?;
    let comp = (comp - 4.0 * HALF_LN_2PI)?;
    let lw = candle_nn::ops::log_softmax(&heads.weight_logits, D::Minus1)?;
    Ok((lw + comp)?.log_sum_exp(D::Minus1)?.neg()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsLstmConfig {
    pub p_max: usize,
    pub num_categories: usize,
    pub components: usize,
    pub hidden: usize,
}

impl BsLstmConfig {
    pub fn new(p_max: usize, num_categories: usize) -> Self {
        BsLstmConfig {
            p_max,
            num_categories,
            components: GMM_COMPONENTS,
            hidden: BSLSTM_HIDDEN,
        }
    }

    fn step_dim(&self) -> usize {
        self.num_categories + 2 * self.p_max
    }
}

pub struct BsLstm {
    pub config: BsLstmConfig,
    pub store: ParamStore,
    pub box_rnn: BiRnn<LstmCell>,
    pub gmm: Linear,
    pub shape_rnn: BiRnn<LstmCell>,
    pub shape_fc: Linear,
    pub head: MaskDeconvHead,
}

/// Per-sample loss parts, each `(B,)`.
#[derive(Clone, Debug)]
pub struct BsLstmLoss {
    pub boxes: Tensor,
    pub masks: Tensor,
}

impl BsLstm {
    pub fn new(config: BsLstmConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let h = config.hidden;
        let k = config.components;
        Ok(BsLstm {
            box_rnn: bi_lstm(&root.pp("box_rnn"), config.step_dim(), h)?,
            gmm: Linear::new(&root.pp("gmm"), 2 * h, k * 9)?,
            shape_rnn: bi_lstm(&root.pp("shape_rnn"), config.step_dim() + 4, h)?,
            shape_fc: Linear::new(&root.pp("shape_fc"), 2 * h, PART_FEATURE)?,
            head: MaskDeconvHead::new(&root.pp("head"), PART_FEATURE)?,
            config,
            store,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Per-step inputs `[category, presence, one_hot(step)]`, `(B, p, M + 2p)`.
    pub fn step_inputs(&self, category: &Tensor, presence: &Tensor) -> Result<Tensor> {
        let p = self.config.p_max;
        let b = category.dim(0)?;
        let cond = Tensor::cat(&[category, presence], 1)?.unsqueeze(1)?.repeat((1, p, 1))?;
        let eye = Tensor::eye(p, category.dtype(), category.device())?.unsqueeze(0)?.repeat((b, 1, 1))?;
        Ok(Tensor::cat(&[&cond, &eye], 2)?)
    }

    pub fn box_step(&self, steps: &Tensor) -> Result<GmmHeads> {
        let (b, p, _) = steps.dims3()?;
        let k = self.config.components;
        let out = self.gmm.forward(&self.box_rnn.forward(steps)?)?;
        Ok(GmmHeads {
            weight_logits: out.narrow(2, 0, k)?,
            means: out.narrow(2, k, 4 * k)?.tanh()?.reshape((b, p, k, 4))?,
            log_scales: out
                .narrow(2, 5 * k, 4 * k)?
                .clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)?
                .reshape((b, p, k, 4))?,
        })
    }

    /// Mask logits `(B, p, 2, 64, 64)` for boxes `(B, p, 4)`.
    pub fn shape_step(&self, steps: &Tensor, boxes: &Tensor) -> Result<Tensor> {
        let (b, p, _) = steps.dims3()?;
        let h = self.shape_rnn.forward(&Tensor::cat(&[steps, boxes], 2)?)?;
        let h = self.shape_fc.forward(&h)?.relu()?;
        let logits = self.head.forward(&h.reshape((b * p, PART_FEATURE))?)?;
        Ok(logits.reshape((b, p, 2, MASK_SIZE, MASK_SIZE))?)
    }

    /// Box NLL averaged over present parts plus the teacher-forced mask
    /// cross-entropy.
    pub fn loss(&self, batch: &MaskBatch) -> Result<BsLstmLoss> {
        let steps = self.step_inputs(&batch.category, &batch.presence)?;
        let nll = gmm_nll_tensor(&self.box_step(&steps)?, &batch.boxes)?;
        let count = batch.presence.sum(1)?.maximum(1.0)?;
        let boxes = nll.mul(&batch.presence)?.sum(1)?.div(&count)?;
        let logits = self.shape_step(&steps, &batch.boxes)?;
        Ok(BsLstmLoss {
            boxes,
            masks: mask_recon_loss(&logits, &batch.masks, &batch.presence)?,
        })
    }

    /// Samples boxes and masks for the requested parts.
    pub fn generate(
        &self,
        cond: &ConditioningVector,
        rng: &mut ChaCha8Rng,
    ) -> Result<(BTreeMap<usize, BBox>, BTreeMap<usize, Raster>)> {
        let p = self.config.p_max;
        if cond.presence.len() != p {
            return Err(Error::Shape(format!("presence has {} entries, expected {p}", cond.presence.len())));
        }
        let dev = Device::Cpu;
        let category = Tensor::new(cond.category_one_hot(self.config.num_categories), &dev)?
            .to_dtype(self.dtype())?
            .unsqueeze(0)?;
        let presence: Vec<f64> = cond.presence.iter().map(|&v| v as f64).collect();
        let presence = Tensor::new(presence, &dev)?.to_dtype(self.dtype())?.unsqueeze(0)?;
        let steps = self.step_inputs(&category, &presence)?;
        let heads = self.box_step(&steps)?;
        let present: Vec<usize> = (0..p).filter(|&k| cond.presence[k] == 1).collect();
        let mut raw = vec![0.0; p * 4];
        let mut boxes = BTreeMap::new();
        for &k in &present {
            let b = BBox::from_decoded(sample_box_from_gmm(&heads.params(0, k)?, rng));
            raw[k * 4..k * 4 + 4].copy_from_slice(&b.to_array());
            boxes.insert(k, b);
        }
        let raw = Tensor::from_vec(raw, (1, p, 4), &dev)?.to_dtype(self.dtype())?;
        let logits = self.shape_step(&steps, &raw)?;
        let masks = LabelMapVae::masks_from_logits(&logits, 0, &present)?;
        Ok((boxes, masks))
    }

    pub fn load(paths: &CheckpointPaths) -> Result<(Self, CheckpointMeta)> {
        let meta = CheckpointMeta::read(paths)?;
        meta.expect_stage(Stage::BsLstm)?;
        let model = BsLstm::new(meta.dims_as()?, 0, DType::F32)?;
        model.store.load(&paths.weights)?;
        Ok((model, meta))
    }
}

impl StageModel for BsLstm {
    fn stage(&self) -> Stage {
        Stage::BsLstm
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn checkpoint_meta(&self, data: &TrainData) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new(Stage::BsLstm, &data.corpus.schemas, serde_json::to_value(&self.config).unwrap());
        meta.paste_orders = paste_orders(data.corpus);
        meta
    }

    fn losses(&self, data: &TrainData, batch: &[usize], _rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let insts: Vec<_> = batch.iter().map(|&i| &data.corpus.instances[i]).collect();
        let mb = MaskBatch::new(&insts, self.config.num_categories, self.dtype())?;
        let l = self.loss(&mb)?;
        let recon = (l.boxes + l.masks)?;
        Ok((recon.clone(), recon.zeros_like()?))
    }
}
