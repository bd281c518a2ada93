use candle_core::{Tensor, D};

use super::{sigmoid, Linear, Scope};
use crate::Result;

pub trait RecurrentCell {
    type State: Clone;

    fn hidden_size(&self) -> usize;
    fn zero_state(&self, batch: usize, like: &Tensor) -> Result<Self::State>;
    fn step(&self, x: &Tensor, state: &Self::State) -> Result<Self::State>;
    fn hidden<'s>(&self, state: &'s Self::State) -> &'s Tensor;
}

/// Gated recurrent unit with separate input and hidden biases.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    size: usize,
}

impl GruCell {
    pub fn new(scope: &Scope, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(GruCell {
            input: Linear::new(&scope.pp("ih"), in_dim, 3 * hidden)?,
            hidden: Linear::new(&scope.pp("hh"), hidden, 3 * hidden)?,
            size: hidden,
        })
    }
}

impl RecurrentCell for GruCell {
    type State = Tensor;

    fn hidden_size(&self) -> usize {
        self.size
    }

    fn zero_state(&self, batch: usize, like: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.size), like.dtype(), like.device())?)
    }

    fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.size;
        let gi = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let r = sigmoid(&(gi.narrow(D::Minus1, 0, n)? + gh.narrow(D::Minus1, 0, n)?)?)?;
        let z = sigmoid(&(gi.narrow(D::Minus1, n, n)? + gh.narrow(D::Minus1, n, n)?)?)?;
        let cand = (gi.narrow(D::Minus1, 2 * n, n)? + r.mul(&gh.narrow(D::Minus1, 2 * n, n)?)?)?.tanh()?;
        let keep = z.mul(h)?;
        Ok(((z.ones_like()? - z)?.mul(&cand)? + keep)?)
    }

    fn hidden<'s>(&self, state: &'s Tensor) -> &'s Tensor {
        state
    }
}

/// Long short-term memory cell; state is `(h, c)`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    input: Linear,
    hidden: Linear,
    size: usize,
}

impl LstmCell {
    pub fn new(scope: &Scope, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCell {
            input: Linear::new(&scope.pp("ih"), in_dim, 4 * hidden)?,
            hidden: Linear::new(&scope.pp("hh"), hidden, 4 * hidden)?,
            size: hidden,
        })
    }
}

impl RecurrentCell for LstmCell {
    type State = (Tensor, Tensor);

    fn hidden_size(&self) -> usize {
        self.size
    }

    fn zero_state(&self, batch: usize, like: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = Tensor::zeros((batch, self.size), like.dtype(), like.device())?;
        Ok((z.clone(), z))
    }

    fn step(&self, x: &Tensor, (h, c): &(Tensor, Tensor)) -> Result<(Tensor, Tensor)> {
        let n = self.size;
        let g = (self.input.forward(x)? + self.hidden.forward(h)?)?;
        let i = sigmoid(&g.narrow(D::Minus1, 0, n)?)?;
        let f = sigmoid(&g.narrow(D::Minus1, n, n)?)?;
        let cand = g.narrow(D::Minus1, 2 * n, n)?.tanh()?;
        let o = sigmoid(&g.narrow(D::Minus1, 3 * n, n)?)?;
        let c = (f.mul(c)? + i.mul(&cand)?)?;
        let h = o.mul(&c.tanh()?)?;
        Ok((h, c))
    }

    fn hidden<'s>(&self, state: &'s (Tensor, Tensor)) -> &'s Tensor {
        &state.0
    }
}

/// Bidirectional wrapper: runs one cell forward and one backward over the
/// sequence and concatenates their hidden states per step.
#[derive(Clone, Debug)]
pub struct BiRnn<C> {
    pub forward_cell: C,
    pub backward_cell: C,
}

impl<C: RecurrentCell> BiRnn<C> {
    pub fn new(forward_cell: C, backward_cell: C) -> Self {
        BiRnn {
            forward_cell,
            backward_cell,
        }
    }

    pub fn output_size(&self) -> usize {
        self.forward_cell.hidden_size() + self.backward_cell.hidden_size()
    }

    /// `(batch, steps, in)` to `(batch, steps, 2 * hidden)`.
    pub fn forward(&self, seq: &Tensor) -> Result<Tensor> {
        let (batch, steps, _) = seq.dims3()?;
        let inputs: Vec<Tensor> = (0..steps)
            .map(|t| seq.narrow(1, t, 1).and_then(|x| x.squeeze(1)))
            .collect::<candle_core::Result<_>>()?;
        let run = |cell: &C, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Tensor>>> {
            let mut out = vec![None; steps];
            let mut state = cell.zero_state(batch, seq)?;
            for t in order {
                state = cell.step(&inputs[t], &state)?;
                out[t] = Some(cell.hidden(&state).clone());
            }
            Ok(out)
        };
        let fwd = run(&self.forward_cell, &mut (0..steps))?;
        let bwd = run(&self.backward_cell, &mut (0..steps).rev())?;
        let per_step = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| Tensor::cat(&[f.unwrap(), b.unwrap()], 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::stack(&per_step, 1)?)
    }
}

pub fn bi_gru(scope: &Scope, in_dim: usize, hidden: usize) -> Result<BiRnn<GruCell>> {
    Ok(BiRnn::new(
        GruCell::new(&scope.pp("fwd"), in_dim, hidden)?,
        GruCell::new(&scope.pp("bwd"), in_dim, hidden)?,
    ))
}

pub fn bi_lstm(scope: &Scope, in_dim: usize, hidden: usize) -> Result<BiRnn<LstmCell>> {
    Ok(BiRnn::new(
        LstmCell::new(&scope.pp("fwd"), in_dim, hidden)?,
        LstmCell::new(&scope.pp("bwd"), in_dim, hidden)?,
    ))
}
