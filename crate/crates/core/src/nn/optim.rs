use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{Optimizer, ParamsAdamW};

use crate::Result;

/// Adam is AdamW with zero weight decay.
pub type Adam = candle_nn::AdamW;

pub fn adam(vars: Vec<Var>, lr: f64) -> Result<Adam> {
    let params = ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(Adam::new(vars, params)?)
}

/// Adagrad with a per-element squared-gradient accumulator.
#[derive(Debug)]
pub struct Adagrad {
    vars: Vec<(Var, Tensor)>,
    lr: f64,
    eps: f64,
}

impl Adagrad {
    pub const EPS: f64 = 1e-10;
}

impl Optimizer for Adagrad {
    type Config = f64;

    fn new(vars: Vec<Var>, lr: f64) -> candle_core::Result<Self> {
        let vars = vars
            .into_iter()
            .filter(|v| v.dtype().is_float())
            .map(|v| {
                let acc = v.zeros_like()?;
                Ok((v, acc))
            })
            .collect::<candle_core::Result<_>>()?;
        Ok(Adagrad {
            vars,
            lr,
            eps: Self::EPS,
        })
    }

    fn step(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        for (var, acc) in self.vars.iter_mut() {
            if let Some(g) = grads.get(var) {
                *acc = (&*acc + g.sqr()?)?;
                let step = (g / (acc.sqrt()? + self.eps)?)?;
                var.set(&var.sub(&(step * self.lr)?)?)?;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn adagrad_first_step_is_lr_times_sign() {
        let v = Var::from_tensor(&Tensor::new(&[2.0f64, -3.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adagrad::new(vec![v.clone()], 0.1).unwrap();
        let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let got = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 1.9).abs() < 1e-9);
        assert!((got[1] + 2.9).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let v = Var::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let mut opt = adam(vec![v.clone()], 0.05).unwrap();
        for _ in 0..500 {
            let loss = (v.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let got = v.as_tensor().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-3, "{got:?}");
        }
    }
}
