use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g + wd * p`, `p <- p - lr * v`.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64) -> Self {
        let n = vars.len();
        Self {
            vars,
            velocity: vec![None; n],
            lr,
            momentum,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    /// Global gradient norm before clipping.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for var in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = (g * scale)?;
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            }
            .detach();
            var.set(&(var.as_tensor() - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn momentum_accumulates() {
        let v = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![v.clone()], 0.1, 0.5);
        for _ in 0..2 {
            let g = (v.as_tensor() * 2.0).unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&g).unwrap();
        }
        // g = 2 both steps: p = 1 - 0.1*2 - 0.1*(0.5*2 + 2) = 0.5
        let p = v.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let v = Var::new(&[0.0f64, 0.0], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![v.clone()], 1.0, 0.0);
        opt.clip_norm = Some(1.0);
        let w = Tensor::new(&[30.0f64, 40.0], &Device::Cpu).unwrap();
        let g = (v.as_tensor() * w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(opt.step(&g).unwrap(), 50.0);
        let p = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!((p[0] + 0.6).abs() < 1e-12 && (p[1] + 0.8).abs() < 1e-12);
    }
}
