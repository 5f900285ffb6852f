//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::Shape { op: "adamw", detail: format!("{:?} vs {:?}", p.shape(), self.m[i].shape()) });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i].map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                pd[j] -= lr * (upd + self.weight_decay * pd[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::vector(vec![3.0, -0.1, 0.0]);
        let mut opt = AdamW::new(&[&[3]], 0.0);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::vector(vec![5.0, -3.0]);
        let mut opt = AdamW::new(&[&[2]], 0.0);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            opt.step(&mut [&mut p], &[Some(&g)], 0.01).unwrap();
        }
        assert!(p.data().iter().all(|x| (x - 1.0).abs() < 1e-3), "{:?}", p.data());
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Tensor::vector(vec![2.0]);
        let mut opt = AdamW::new(&[&[1]], 0.1);
        opt.step(&mut [&mut p], &[None], 0.5).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = AdamW::new(&[&[1], &[2]], 0.0);
        assert!(opt.step(&mut [&mut p], &[None], 0.1).is_err());
    }
}
