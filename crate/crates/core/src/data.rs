//! Seeded synthetic input sequences.

use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, RunConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub seq_len: usize,
    pub input_dim: usize,
    /// AR(1) coefficient per channel.
    pub ar_coeff: f64,
    pub tone_count: usize,
    /// Additive white noise for the tone generator.
    pub noise_sd: f64,
}

impl DatasetSpec {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            kind: c.dataset,
            seq_len: c.seq_len,
            input_dim: c.input_dim,
            ar_coeff: c.ar_coeff,
            tone_count: c.tone_count,
            noise_sd: c.noise_sd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.input_dim == 0 {
            return Err(Error::Config("dataset needs seq_len and input_dim >= 1".into()));
        }
        if self.ar_coeff.abs() >= 1.0 || !self.ar_coeff.is_finite() {
            return Err(Error::Config("ar_coeff must lie in (-1, 1)".into()));
        }
        if self.kind == DatasetKind::RandomTones && self.tone_count == 0 {
            return Err(Error::Config("random tones need tone_count >= 1".into()));
        }
        Ok(())
    }
}

/// Endless deterministic stream of batches.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    spec: DatasetSpec,
    rng: Rng,
}

pub fn synthetic_dataset(spec: DatasetSpec, rng: Rng) -> Result<SyntheticStream> {
    spec.validate()?;
    Ok(SyntheticStream { spec, rng })
}

impl SyntheticStream {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    /// `batch` sequences stacked row-wise: `batch·seq_len × input_dim`.
    pub fn next_batch(&mut self, batch: usize) -> Tensor {
        let (t, c) = (self.spec.seq_len, self.spec.input_dim);
        let mut data = Vec::with_capacity(batch * t * c);
        for _ in 0..batch {
            match self.spec.kind {
                DatasetKind::GaussianAr => self.ar_sequence(&mut data),
                DatasetKind::RandomTones => self.tone_sequence(&mut data),
            }
        }
        Tensor::matrix(batch * t, c, data).expect("sizes agree")
    }

    fn ar_sequence(&mut self, out: &mut Vec<f64>) {
        let (t, c, a) = (self.spec.seq_len, self.spec.input_dim, self.spec.ar_coeff);
        let innov = (1.0 - a * a).sqrt();
        let mut prev: Vec<f64> = (0..c).map(|_| self.rng.normal(0.0, 1.0)).collect();
        out.extend_from_slice(&prev);
        for _ in 1..t {
            for p in prev.iter_mut() {
                *p = a * *p + innov * self.rng.normal(0.0, 1.0);
            }
            out.extend_from_slice(&prev);
        }
    }

    fn tone_sequence(&mut self, out: &mut Vec<f64>) {
        let (t, c, k) = (self.spec.seq_len, self.spec.input_dim, self.spec.tone_count);
        let tau = std::f64::consts::TAU;
        let freqs: Vec<f64> = (0..k).map(|_| 0.02 + 0.43 * self.rng.uniform()).collect();
        let phases: Vec<f64> = (0..k).map(|_| tau * self.rng.uniform()).collect();
        let amps: Vec<f64> = (0..k * c).map(|_| self.rng.normal(0.0, 1.0) / (k as f64).sqrt()).collect();
        for s in 0..t {
            for ch in 0..c {
                let mut v = 0.0;
                for j in 0..k {
                    v += amps[j * c + ch] * (tau * freqs[j] * s as f64 + phases[j]).sin();
                }
                out.push(v + self.rng.normal(0.0, self.spec.noise_sd));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    fn spec(kind: DatasetKind, a: f64) -> DatasetSpec {
        DatasetSpec { kind, seq_len: 32, input_dim: 16, ar_coeff: a, tone_count: 3, noise_sd: 0.1 }
    }

    #[test]
    fn same_seed_same_batch() {
        for kind in [DatasetKind::GaussianAr, DatasetKind::RandomTones] {
            let mut a = synthetic_dataset(spec(kind, 0.9), Rng::stream(5, streams::DATA)).unwrap();
            let mut b = synthetic_dataset(spec(kind, 0.9), Rng::stream(5, streams::DATA)).unwrap();
            let x = a.next_batch(4);
            assert_eq!(x, b.next_batch(4));
            assert_eq!(x.shape(), &[4 * 32, 16]);
            assert!(x != a.next_batch(4));
        }
    }

    fn lag1_autocorr(series: &[f64]) -> f64 {
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let var: f64 = series.iter().map(|x| (x - mean).powi(2)).sum();
        let cov: f64 = series.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        cov / var
    }

    #[test]
    fn zero_coefficient_is_white() {
        let s = DatasetSpec { seq_len: 4096, input_dim: 1, ..spec(DatasetKind::GaussianAr, 0.0) };
        let mut d = synthetic_dataset(s, Rng::stream(1, streams::DATA)).unwrap();
        let x = d.next_batch(1);
        let r = lag1_autocorr(x.data());
        assert!(r.abs() <= 3.0 / (4096f64).sqrt(), "{r}");
    }

    #[test]
    fn ar_coefficient_shows_up() {
        let s = DatasetSpec { seq_len: 4096, input_dim: 1, ..spec(DatasetKind::GaussianAr, 0.7) };
        let mut d = synthetic_dataset(s, Rng::stream(1, streams::DATA)).unwrap();
        let r = lag1_autocorr(d.next_batch(1).data());
        assert!((r - 0.7).abs() < 0.05, "{r}");
    }

    #[test]
    fn bad_specs_error() {
        assert!(synthetic_dataset(spec(DatasetKind::GaussianAr, 1.0), Rng::new(0)).is_err());
        let s = DatasetSpec { tone_count: 0, ..spec(DatasetKind::RandomTones, 0.0) };
        assert!(synthetic_dataset(s, Rng::new(0)).is_err());
    }
}
