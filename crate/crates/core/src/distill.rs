//! Layer-wise distillation from a frozen dense teacher.
//!
//! Layer indices are zero-based throughout: pair `(j, k)` matches student
//! block `j` with teacher block `k`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::compact::CompactModel;
use crate::model::EncoderModel;
use crate::tensor::Tensor;

/// A dense model that is never updated.
#[derive(Debug, Clone)]
pub struct Teacher {
    model: EncoderModel,
    runner: CompactModel,
    checksum: u64,
}

pub fn make_teacher(model: EncoderModel) -> Result<Teacher> {
    if model.named_tensors().iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite("teacher weights".into()));
    }
    let checksum = model.checksum();
    let runner = CompactModel::from_dense(&model)?;
    Ok(Teacher { model, runner, checksum })
}

impl Teacher {
    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// True while the weights still hash to the value taken at construction.
    pub fn is_intact(&self) -> bool {
        self.model.checksum() == self.checksum
    }

    /// Per-block outputs for `x` (`batch·seq × input_dim`).
    pub fn hiddens(&self, x: &Tensor, batch: usize, seq: usize) -> Result<Vec<Tensor>> {
        self.runner.forward_hiddens(x, batch, seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    FixedUniform,
    DynamicMinMse,
}

impl PairingMode {
    pub fn name(self) -> &'static str {
        match self {
            PairingMode::FixedUniform => "fixed_uniform",
            PairingMode::DynamicMinMse => "dynamic_min_mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [PairingMode::FixedUniform, PairingMode::DynamicMinMse].into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPairing {
    /// `(student_layer, teacher_layer)`, one entry per distilled teacher layer.
    pub pairs: Vec<(usize, usize)>,
    pub mode: PairingMode,
    pub refresh_interval: usize,
}

impl LayerPairing {
    /// Proportional index mapping of teacher layers onto student layers.
    pub fn fixed_uniform(n_student: usize, n_teacher: usize, teacher_layers: &[usize]) -> Result<Self> {
        if n_student == 0 || n_teacher == 0 {
            return Err(Error::Config("pairing needs at least one layer on each side".into()));
        }
        let pairs = teacher_layers
            .iter()
            .map(|&k| {
                let j = ((k + 1) * n_student).div_ceil(n_teacher) - 1;
                (j.min(n_student - 1), k)
            })
            .collect();
        let p = Self { pairs, mode: PairingMode::FixedUniform, refresh_interval: 0 };
        p.validate(n_student, n_teacher)?;
        Ok(p)
    }

    /// Starting point for a dynamic pairing, refreshed later from hiddens.
    pub fn dynamic(n_student: usize, n_teacher: usize, teacher_layers: &[usize], refresh_interval: usize) -> Result<Self> {
        if refresh_interval == 0 {
            return Err(Error::Config("refresh_interval must be >= 1".into()));
        }
        let mut p = Self::fixed_uniform(n_student, n_teacher, teacher_layers)?;
        p.mode = PairingMode::DynamicMinMse;
        p.refresh_interval = refresh_interval;
        Ok(p)
    }

    pub fn validate(&self, n_student: usize, n_teacher: usize) -> Result<()> {
        let mut seen = vec![false; n_teacher];
        for &(j, k) in &self.pairs {
            if j >= n_student || k >= n_teacher {
                return Err(Error::Config(format!("pair ({j}, {k}) out of range")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Config(format!("teacher layer {k} paired twice")));
            }
        }
        if self.pairs.is_empty() {
            return Err(Error::Config("empty pairing".into()));
        }
        Ok(())
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, k)| k).collect()
    }

    /// Whether a dynamic pairing should be recomputed at `step`.
    pub fn due(&self, step: usize) -> bool {
        self.mode == PairingMode::DynamicMinMse && step % self.refresh_interval == 0
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { op: "mse", detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Recompute the pairing. Fixed pairings are returned unchanged; dynamic
/// ones give each teacher layer the student layer with the lowest MSE
/// (lowest index on ties).
pub fn pair_layers(student: &[Tensor], teacher: &[Tensor], pairing: &LayerPairing) -> Result<LayerPairing> {
    if student.is_empty() || teacher.is_empty() {
        return Err(Error::Config("pairing needs nonempty hidden lists".into()));
    }
    pairing.validate(student.len(), teacher.len())?;
    if pairing.mode == PairingMode::FixedUniform {
        return Ok(pairing.clone());
    }
    let mut pairs = Vec::with_capacity(pairing.pairs.len());
    for k in pairing.teacher_layers() {
        let mut best = (0, f64::INFINITY);
        for (j, h) in student.iter().enumerate() {
            let e = mse(h, &teacher[k])?;
            if e < best.1 {
                best = (j, e);
            }
        }
        pairs.push((best.0, k));
    }
    Ok(LayerPairing { pairs, ..pairing.clone() })
}

pub fn per_pair_mse(student: &[Tensor], teacher: &[Tensor], pairing: &LayerPairing) -> Result<Vec<f64>> {
    pairing.validate(student.len(), teacher.len())?;
    pairing.pairs.iter().map(|&(j, k)| mse(&student[j], &teacher[k])).collect()
}

/// Sum over pairs of the element-mean squared error.
pub fn distill_loss(g: &mut Graph, student: &[Var], teacher: &[Var], pairing: &LayerPairing) -> Result<Var> {
    pairing.validate(student.len(), teacher.len())?;
    let mut total: Option<Var> = None;
    for &(j, k) in &pairing.pairs {
        let e = g.mse(student[j], teacher[k])?;
        total = Some(match total {
            None => e,
            Some(t) => g.add(t, e)?,
        });
    }
    total.ok_or_else(|| Error::Config("empty pairing".into()))
}

/// One line of the pairing log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingRecord {
    pub step: usize,
    pub pairs: Vec<(usize, usize)>,
    pub mse: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encoder_forward, register, EncoderConfig};
    use crate::rng::{streams, Rng};

    fn small() -> EncoderConfig {
        EncoderConfig { n_layers: 4, d_hidden: 8, n_heads: 2, d_head: 4, d_ffn: 16, max_seq_len: 6, input_dim: 3 }
    }

    fn rand_t(r: usize, c: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
    }

    #[test]
    fn equal_depth_fixed_pairing_is_identity() {
        let p = LayerPairing::fixed_uniform(4, 4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn fixed_pairing_maps_proportionally() {
        let p = LayerPairing::fixed_uniform(2, 4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (0, 1), (1, 2), (1, 3)]);
        let p = LayerPairing::fixed_uniform(4, 2, &[0, 1]).unwrap();
        assert_eq!(p.pairs, vec![(1, 0), (3, 1)]);
    }

    #[test]
    fn teacher_is_frozen_and_student_copy_has_zero_loss() {
        let cfg = small();
        let m = EncoderModel::init(cfg, &mut Rng::stream(1, streams::INIT)).unwrap();
        let t = make_teacher(m.clone()).unwrap();
        let mut rng = Rng::stream(1, streams::DATA);
        let x = rand_t(2 * 5, cfg.input_dim, &mut rng);
        let th = t.hiddens(&x, 2, 5).unwrap();
        assert_eq!(th.len(), cfg.n_layers);
        assert!(t.is_intact());

        let mut g = Graph::new();
        let mv = register(&mut g, &m, true);
        let xv = g.constant(x.clone());
        let sh = encoder_forward(&mut g, &cfg, &mv, xv, 2, 5, None).unwrap();
        let tv: Vec<Var> = th.iter().map(|h| g.constant(h.clone())).collect();
        let p = LayerPairing::fixed_uniform(4, 4, &[0, 1, 2, 3]).unwrap();
        let l = distill_loss(&mut g, &sh, &tv, &p).unwrap();
        assert!(g.value(l).item() <= 1e-12);

        let sv: Vec<Tensor> = sh.iter().map(|&h| g.value(h).clone()).collect();
        let dynp = LayerPairing::dynamic(4, 4, &[0, 1, 2, 3], 100).unwrap();
        assert_eq!(pair_layers(&sv, &th, &dynp).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(t.hiddens(&x, 2, 5).unwrap(), th);
    }

    #[test]
    fn dynamic_pairing_finds_copied_layer() {
        let mut rng = Rng::new(7);
        let teacher: Vec<Tensor> = (0..4).map(|_| rand_t(6, 5, &mut rng)).collect();
        let mut student: Vec<Tensor> = (0..4).map(|_| rand_t(6, 5, &mut rng)).collect();
        student[2] = teacher[3].clone();
        let p = LayerPairing::dynamic(4, 4, &[0, 1, 2, 3], 10).unwrap();
        let got = pair_layers(&student, &teacher, &p).unwrap();
        assert!(got.pairs.contains(&(2, 3)));
        // Exhaustive optimality of every chosen pair.
        for &(j, k) in &got.pairs {
            let e = mse(&student[j], &teacher[k]).unwrap();
            for s in &student {
                assert!(mse(s, &teacher[k]).unwrap() >= e);
            }
        }
    }

    #[test]
    fn constant_offset_gives_squared_offset() {
        let mut g = Graph::new();
        let a = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let b = a.map(|v| v + 0.3);
        let (av, bv) = (g.constant(a), g.constant(b));
        let p = LayerPairing::fixed_uniform(1, 1, &[0]).unwrap();
        let l = distill_loss(&mut g, &[av], &[bv], &p).unwrap();
        assert!((g.value(l).item() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_direct_recomputation() {
        let mut rng = Rng::new(3);
        let s: Vec<Tensor> = (0..3).map(|_| rand_t(4, 3, &mut rng)).collect();
        let t: Vec<Tensor> = (0..3).map(|_| rand_t(4, 3, &mut rng)).collect();
        let p = LayerPairing { pairs: vec![(2, 0), (0, 2)], mode: PairingMode::FixedUniform, refresh_interval: 0 };
        let mut want = 0.0;
        for &(j, k) in &p.pairs {
            let mut acc = 0.0;
            for i in 0..12 {
                let d = s[j].data()[i] - t[k].data()[i];
                acc += d * d;
            }
            want += acc / 12.0;
        }
        let mut g = Graph::new();
        let sv: Vec<Var> = s.iter().map(|x| g.constant(x.clone())).collect();
        let tv: Vec<Var> = t.iter().map(|x| g.constant(x.clone())).collect();
        let l = distill_loss(&mut g, &sv, &tv, &p).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-14);
        assert!((per_pair_mse(&s, &t, &p).unwrap().iter().sum::<f64>() - want).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_and_bad_pairings_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let p = LayerPairing::fixed_uniform(1, 1, &[0]).unwrap();
        assert!(matches!(distill_loss(&mut g, &[a], &[b], &p), Err(Error::Shape { .. })));
        let dup = LayerPairing { pairs: vec![(0, 1), (1, 1)], mode: PairingMode::FixedUniform, refresh_interval: 0 };
        assert!(dup.validate(2, 2).is_err());
        assert!(LayerPairing::dynamic(2, 2, &[0, 1], 0).is_err());
        assert!(pair_layers(&[], &[], &p).is_err());
    }

    #[test]
    fn refresh_schedule() {
        let p = LayerPairing::dynamic(4, 4, &[0, 1, 2, 3], 100).unwrap();
        assert!(p.due(0) && p.due(200) && !p.due(150));
        assert!(!LayerPairing::fixed_uniform(4, 4, &[0]).unwrap().due(0));
    }
}
