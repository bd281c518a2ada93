//! Graph convolution with the symmetric-normalized, self-looped adjacency.
//!
//! All functions accept a single graph (`p×F`, `p×p`) or a batch
//! (`B×p×F`, `B×p×p`); the weights are shared across the batch.

use candle_core::{DType, Tensor, D};

use crate::nn::Scope;
use crate::{Error, Result};

pub const F0: usize = 5;
pub const F1: usize = 32;
pub const F2: usize = 64;

/// `D^{-1/2} (A + I) D^{-1/2}`.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency(Tensor);

impl NormalizedAdjacency {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }
}

/// Normalizes a binary, symmetric, zero-diagonal adjacency matrix.
pub fn normalize_adjacency(a: &Tensor) -> Result<NormalizedAdjacency> {
    let dims = a.dims();
    let p = *dims.last().unwrap_or(&0);
    if dims.len() < 2 || dims[dims.len() - 2] != p {
        return Err(Error::Shape(format!("adjacency must be square, got {dims:?}")));
    }
    let check = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    for g in check.chunks(p * p) {
        for i in 0..p {
            if g[i * p + i] != 0.0 {
                return Err(Error::Shape(format!("adjacency has nonzero diagonal at {i}")));
            }
            for j in 0..i {
                if g[i * p + j] != g[j * p + i] {
                    return Err(Error::Shape(format!("adjacency is not symmetric at ({i},{j})")));
                }
            }
        }
    }
    let eye = Tensor::eye(p, a.dtype(), a.device())?;
    let a_tilde = a.broadcast_add(&eye)?;
    let dinv = a_tilde.sum(D::Minus1)?.powf(-0.5)?;
    let rows = dinv.unsqueeze(D::Minus1)?;
    let cols = dinv.unsqueeze(D::Minus2)?;
    Ok(NormalizedAdjacency(a_tilde.broadcast_mul(&rows)?.broadcast_mul(&cols)?))
}

/// `ReLU(Â H W)` with `W` shaped `F_in×F_out`.
pub fn gcn_layer(h: &Tensor, a_hat: &NormalizedAdjacency, w: &Tensor) -> Result<Tensor> {
    let (f_in, _) = w.dims2()?;
    let hd = h.dims();
    let ad = a_hat.0.dims();
    if hd.last() != Some(&f_in) {
        return Err(Error::Shape(format!("features {hd:?} do not match weights {:?}", w.dims())));
    }
    if hd.len() != ad.len() || hd[..hd.len() - 1] != ad[..ad.len() - 1] {
        return Err(Error::Shape(format!("features {hd:?} do not match adjacency {ad:?}")));
    }
    Ok(a_hat.0.matmul(h)?.broadcast_matmul(w)?.relu()?)
}

#[derive(Clone, Debug)]
pub struct GcnWeights {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl GcnWeights {
    /// Glorot-uniform initialization.
    pub fn new(scope: &Scope, f0: usize, f1: usize, f2: usize) -> Result<Self> {
        let bound = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        Ok(GcnWeights {
            w1: scope.uniform("w1", &[f0, f1], bound(f0, f1))?,
            w2: scope.uniform("w2", &[f1, f2], bound(f1, f2))?,
        })
    }

    pub fn from_tensors(w1: Tensor, w2: Tensor) -> Result<Self> {
        if w1.dims2()?.1 != w2.dims2()?.0 {
            return Err(Error::Shape(format!(
                "weight shapes {:?} and {:?} do not chain",
                w1.dims(),
                w2.dims()
            )));
        }
        Ok(GcnWeights { w1, w2 })
    }

    pub fn out_dim(&self) -> usize {
        self.w2.dims()[1]
    }
}

/// Two GCN layers sharing one normalized adjacency, starting from `H₀ = X`.
pub fn gcn_forward(x: &Tensor, a: &Tensor, weights: &GcnWeights) -> Result<Tensor> {
    let a_hat = normalize_adjacency(a)?;
    gcn_forward_normalized(x, &a_hat, weights)
}

pub fn gcn_forward_normalized(x: &Tensor, a_hat: &NormalizedAdjacency, weights: &GcnWeights) -> Result<Tensor> {
    let h1 = gcn_layer(x, a_hat, &weights.w1)?;
    gcn_layer(&h1, a_hat, &weights.w2)
}
