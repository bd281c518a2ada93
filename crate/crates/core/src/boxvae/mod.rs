//! Conditional VAE over part-labelled box graphs.
//!
//! The encoder runs a two-layer GCN over `(X, A)`, mean-pools the rows,
//! gates the pooled vector by the category, concatenates per-row skip
//! features of the raw boxes and maps the result to a diagonal Gaussian.
//! The decoder gates `z` by the category and part-presence conditioning and
//! emits presence probabilities, `tanh` box corners and a symmetric
//! adjacency probability matrix.

mod loss;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    adjacency_bce, box_iou, box_iou_loss, box_mse, box_terms, boxvae_recon_loss, pairwise_center_loss, presence_nll,
    ReconBreakdown, ReconLoss, EPS_IOU, EPS_PROB,
};

use crate::dataset::{PartGraph, FEATURE_COLS};
use crate::gcn::{gcn_forward_normalized, normalize_adjacency, GcnWeights};
use crate::geometry::BBox;
use crate::nn::{normal_tensor, sigmoid, Gate, Linear, ParamStore, Scope};
use crate::{Error, Result, LATENT_DIM};

/// Log-variance range applied before exponentiation.
pub const LOG_VAR_MIN: f64 = -60.0;
pub const LOG_VAR_MAX: f64 = 30.0;

/// Diagonal Gaussian posterior, each field shaped `(B, latent)`.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussianParams {
    pub fn std(&self) -> Result<Tensor> {
        Ok((self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)? * 0.5)?.exp()?)
    }
}

/// `z = mu + exp(log_var / 2) * eps`.
pub fn reparameterize(g: &GaussianParams, eps: &Tensor) -> Result<Tensor> {
    Ok((&g.mu + g.std()?.mul(eps)?)?)
}

/// [`reparameterize`] with noise drawn from `rng`.
pub fn sample_latent(g: &GaussianParams, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eps = normal_tensor(rng, g.mu.dims(), g.mu.dtype())?;
    reparameterize(g, &eps)
}

/// Category plus requested parts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub category_id: usize,
    pub presence: Vec<u8>,
}

impl ConditioningVector {
    pub fn new(category_id: usize, presence: Vec<u8>) -> Self {
        ConditioningVector { category_id, presence }
    }

    pub fn category_one_hot(&self, num_categories: usize) -> Vec<f64> {
        (1..=num_categories).map(|c| (c == self.category_id) as u8 as f64).collect()
    }

    /// `[one_hot(c); l_c]`.
    pub fn to_vec(&self, num_categories: usize) -> Vec<f64> {
        let mut v = self.category_one_hot(num_categories);
        v.extend(self.presence.iter().map(|&b| b as f64));
        v
    }
}

/// Batched tensors for a set of part graphs.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// `(B, p, 5)`
    pub x: Tensor,
    /// `(B, p, p)`
    pub adjacency: Tensor,
    /// `(B, p)`
    pub presence: Tensor,
    /// `(B, p, 4)`
    pub boxes: Tensor,
    /// `(B, M)`
    pub category: Tensor,
    /// `(B, M + p)`
    pub cond: Tensor,
}

impl GraphBatch {
    pub fn new(graphs: &[&PartGraph], num_categories: usize, dtype: DType) -> Result<Self> {
        let b = graphs.len();
        let p = graphs.first().map_or(0, |g| g.p_max);
        if graphs.iter().any(|g| g.p_max != p) {
            return Err(Error::Shape("graphs in a batch must share p_max".into()));
        }
        let dev = Device::Cpu;
        let feats: Vec<f64> = graphs.iter().flat_map(|g| g.features.iter().copied()).collect();
        let adj: Vec<f64> = graphs.iter().flat_map(|g| g.adjacency.iter().map(|&v| v as f64)).collect();
        let cats: Vec<f64> = graphs
            .iter()
            .flat_map(|g| ConditioningVector::new(g.category_id, g.presence()).category_one_hot(num_categories))
            .collect();
        let x = Tensor::from_vec(feats, (b, p, FEATURE_COLS), &dev)?.to_dtype(dtype)?;
        let adjacency = Tensor::from_vec(adj, (b, p, p), &dev)?.to_dtype(dtype)?;
        let category = Tensor::from_vec(cats, (b, num_categories), &dev)?.to_dtype(dtype)?;
        let presence = x.narrow(2, 0, 1)?.squeeze(2)?;
        let boxes = x.narrow(2, 1, 4)?;
        let cond = Tensor::cat(&[&category, &presence], 1)?;
        Ok(GraphBatch {
            x,
            adjacency,
            presence,
            boxes,
            category,
            cond,
        })
    }

    pub fn len(&self) -> usize {
        self.x.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(B, M + p)` conditioning tensor.
pub fn cond_tensor(conds: &[ConditioningVector], num_categories: usize, dtype: DType) -> Result<Tensor> {
    let width = num_categories + conds.first().map_or(0, |c| c.presence.len());
    let v: Vec<f64> = conds.iter().flat_map(|c| c.to_vec(num_categories)).collect();
    Ok(Tensor::from_vec(v, (conds.len(), width), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxVaeConfig {
    pub p_max: usize,
    pub num_categories: usize,
    pub gcn_hidden: usize,
    pub gcn_out: usize,
    pub skip_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Also feed the conditioning vector to the first decoder layer.
    #[serde(default)]
    pub cond_concat: bool,
}

impl BoxVaeConfig {
    pub fn new(p_max: usize, num_categories: usize) -> Self {
        BoxVaeConfig {
            p_max,
            num_categories,
            gcn_hidden: crate::gcn::F1,
            gcn_out: crate::gcn::F2,
            skip_dim: 16,
            hidden: 256,
            latent: LATENT_DIM,
            cond_concat: false,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.num_categories + self.p_max
    }
}

/// Per-row affine map on the box columns, shared across rows.
#[derive(Clone, Debug)]
pub struct SkipFeatures {
    pub linear: Linear,
}

impl SkipFeatures {
    pub fn new(scope: &Scope, out_dim: usize) -> Result<Self> {
        Ok(SkipFeatures {
            linear: Linear::new(scope, 4, out_dim)?,
        })
    }

    /// `(..., p, 4)` to `(..., p, out)`.
    pub fn forward(&self, boxes: &Tensor) -> Result<Tensor> {
        self.linear.forward(boxes)
    }
}

#[derive(Clone, Debug)]
pub struct BoxEncoder {
    pub gcn: GcnWeights,
    pub gate: Gate,
    pub skip: SkipFeatures,
    pub fc: Linear,
    pub mu: Linear,
    pub log_var: Linear,
}

impl BoxEncoder {
    pub fn new(scope: &Scope, cfg: &BoxVaeConfig) -> Result<Self> {
        Ok(BoxEncoder {
            gcn: GcnWeights::new(&scope.pp("gcn"), FEATURE_COLS, cfg.gcn_hidden, cfg.gcn_out)?,
            gate: Gate::new(&scope.pp("gate"), cfg.num_categories, cfg.gcn_out)?,
            skip: SkipFeatures::new(&scope.pp("skip"), cfg.skip_dim)?,
            fc: Linear::new(&scope.pp("fc"), cfg.gcn_out + cfg.p_max * cfg.skip_dim, cfg.hidden)?,
            mu: Linear::new(&scope.pp("mu"), cfg.hidden, cfg.latent)?,
            log_var: Linear::new(&scope.pp("log_var"), cfg.hidden, cfg.latent)?,
        })
    }

    /// Hidden representation preceding the Gaussian heads, `(B, hidden)`.
    pub fn features(&self, batch: &GraphBatch) -> Result<Tensor> {
        let a_hat = normalize_adjacency(&batch.adjacency)?;
        let h = gcn_forward_normalized(&batch.x, &a_hat, &self.gcn)?;
        let pooled = h.mean(1)?;
        let gated = self.gate.forward(&pooled, &batch.category)?;
        let skip = self.skip.forward(&batch.boxes)?.flatten_from(1)?;
        Ok(self.fc.forward(&Tensor::cat(&[&gated, &skip], 1)?)?.relu()?)
    }

    pub fn forward(&self, batch: &GraphBatch) -> Result<GaussianParams> {
        let h = self.features(batch)?;
        Ok(GaussianParams {
            mu: self.mu.forward(&h)?,
            log_var: self.log_var.forward(&h)?,
        })
    }
}

/// Decoder outputs; all probabilities are post-sigmoid.
#[derive(Clone, Debug)]
pub struct BoxDecodeOutput {
    /// `(B, p)`
    pub presence: Tensor,
    /// `(B, p, 4)` in `[-1, 1]`
    pub boxes: Tensor,
    /// `(B, p, p)`, exactly symmetric
    pub adjacency: Tensor,
}

/// One decoded sample as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedGraph {
    pub presence: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
    pub adjacency: Vec<f64>,
}

impl BoxDecodeOutput {
    pub fn sample(&self, i: usize) -> Result<DecodedGraph> {
        let f64v = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        let boxes = f64v(&self.boxes)?
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Ok(DecodedGraph {
            presence: f64v(&self.presence)?,
            boxes,
            adjacency: f64v(&self.adjacency)?,
        })
    }
}

impl DecodedGraph {
    /// Part graph keeping exactly the parts in `present`; adjacency is
    /// thresholded at 0.5 among them.
    pub fn to_graph(&self, category_id: usize, present: &[usize]) -> PartGraph {
        let p = self.presence.len();
        let mut g = PartGraph::empty(category_id, p);
        for &k in present {
            g.set_part(k, BBox::from_decoded(self.boxes[k]));
        }
        for &m in present {
            for &n in present {
                if m < n && self.adjacency[m * p + n] >= 0.5 {
                    g.set_adj(m, n, true);
                }
            }
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct BoxDecoder {
    pub gate: Gate,
    pub fc1: Linear,
    pub fc2: Linear,
    pub presence: Linear,
    pub boxes: Linear,
    pub adjacency: Linear,
    p_max: usize,
    cond_concat: bool,
}

impl BoxDecoder {
    pub fn new(scope: &Scope, cfg: &BoxVaeConfig) -> Result<Self> {
        let p = cfg.p_max;
        let in_dim = cfg.latent + if cfg.cond_concat { cfg.cond_dim() } else { 0 };
        Ok(BoxDecoder {
            gate: Gate::new(&scope.pp("gate"), cfg.cond_dim(), cfg.latent)?,
            fc1: Linear::new(&scope.pp("fc1"), in_dim, cfg.hidden)?,
            fc2: Linear::new(&scope.pp("fc2"), cfg.hidden, cfg.hidden)?,
            presence: Linear::new(&scope.pp("presence"), cfg.hidden, p)?,
            boxes: Linear::new(&scope.pp("boxes"), cfg.hidden, 4 * p)?,
            adjacency: Linear::new(&scope.pp("adjacency"), cfg.hidden, p * p)?,
            p_max: p,
            cond_concat: cfg.cond_concat,
        })
    }

    /// `z` is `(B, latent)`, `cond` is `(B, M + p)`.
    pub fn forward(&self, z: &Tensor, cond: &Tensor) -> Result<BoxDecodeOutput> {
        let p = self.p_max;
        let b = z.dim(0)?;
        let mut zg = self.gate.forward(z, cond)?;
        if self.cond_concat {
            zg = Tensor::cat(&[&zg, cond], 1)?;
        }
        let h = self.fc1.forward(&zg)?.relu()?;
        let h = self.fc2.forward(&h)?.relu()?;
        let presence = sigmoid(&self.presence.forward(&h)?)?;
        let boxes = self.boxes.forward(&h)?.tanh()?.reshape((b, p, 4))?;
        let logits = self.adjacency.forward(&h)?.reshape((b, p, p))?;
        let sym = ((&logits + logits.transpose(1, 2)?)? * 0.5)?;
        Ok(BoxDecodeOutput {
            presence,
            boxes,
            adjacency: sigmoid(&sym)?,
        })
    }
}

pub struct BoxVae {
    pub config: BoxVaeConfig,
    pub store: ParamStore,
    pub encoder: BoxEncoder,
    pub decoder: BoxDecoder,
}

impl BoxVae {
    pub fn new(config: BoxVaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let encoder = BoxEncoder::new(&root.pp("enc"), &config)?;
        let decoder = BoxDecoder::new(&root.pp("dec"), &config)?;
        Ok(BoxVae {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn batch(&self, graphs: &[&PartGraph]) -> Result<GraphBatch> {
        GraphBatch::new(graphs, self.config.num_categories, self.dtype())
    }

    pub fn encode(&self, batch: &GraphBatch) -> Result<GaussianParams> {
        self.encoder.forward(batch)
    }

    pub fn decode(&self, z: &Tensor, cond: &Tensor) -> Result<BoxDecodeOutput> {
        self.decoder.forward(z, cond)
    }

    /// Posterior sample with noise `eps`, decoded under the batch's own
    /// conditioning.
    pub fn forward(&self, batch: &GraphBatch, eps: &Tensor) -> Result<(GaussianParams, BoxDecodeOutput)> {
        let g = self.encode(batch)?;
        let z = reparameterize(&g, eps)?;
        let out = self.decode(&z, &batch.cond)?;
        Ok((g, out))
    }

    /// Decodes the posterior mean.
    pub fn reconstruct(&self, batch: &GraphBatch) -> Result<BoxDecodeOutput> {
        let g = self.encode(batch)?;
        self.decode(&g.mu, &batch.cond)
    }
}
