//! Hard-concrete gates.
//!
//! A gate element with learnable `log_alpha` is sampled as
//!
//! ```text
//! u    ~ U(eps, 1 - eps)
//! s    = sigmoid(log(u / (1 - u)) / beta + log_alpha)
//! sbar = s * (zeta - gamma) + gamma
//! z    = clamp(sbar, 0, 1)
//! ```
//!
//! Note that `log_alpha` sits outside the `1/beta` scaling. Because the
//! logistic noise `L = log(u/(1-u))` has CDF `sigmoid`, the probability of a
//! nonzero gate has the closed form
//!
//! ```text
//! P(z > 0) = P(sbar > 0)
//!          = P(L > beta * (logit(-gamma / (zeta - gamma)) - log_alpha))
//!          = sigmoid(beta * (log_alpha - log(-gamma / zeta)))
//! ```
//!
//! using `logit(-gamma / (zeta - gamma)) = log(-gamma / zeta)`. The same
//! argument gives `P(z = 1) = sigmoid(beta * (log_alpha - log((1 - gamma) / (zeta - 1))))`.
//!
//! With `ste_enabled`, the clamp's backward rule is replaced by a clipped
//! straight-through pass: `dL/dsbar = clip(dL/dz, -1, 1)` (with `>= 1` mapping
//! to 1 and `< -1` mapping to -1).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bounds of the open interval `u` is drawn from.
pub const NOISE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    MhaLayer,
    FfnLayer,
    QkDim,
    VoDim,
    FfnInt,
}

impl Granularity {
    pub const ALL: [Granularity; 5] =
        [Self::MhaLayer, Self::FfnLayer, Self::QkDim, Self::VoDim, Self::FfnInt];

    pub fn is_coarse(self) -> bool {
        matches!(self, Self::MhaLayer | Self::FfnLayer)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MhaLayer => "mha_layer",
            Self::FfnLayer => "ffn_layer",
            Self::QkDim => "qk_dim",
            Self::VoDim => "vo_dim",
            Self::FfnInt => "ffn_int",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

/// Distribution hyperparameters shared by every gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(Error::Config(format!(
                "need gamma < 0 < 1 < zeta, got gamma={} zeta={}",
                self.gamma, self.zeta
            )));
        }
        Ok(())
    }

    /// `log(-gamma / zeta)`: the log_alpha at which `P(z > 0) = 1/2`.
    pub fn zero_threshold(&self) -> f64 {
        (-self.gamma / self.zeta).ln()
    }

    /// `log((1 - gamma) / (zeta - 1))`: the log_alpha at which `P(z = 1) = 1/2`.
    pub fn one_threshold(&self) -> f64 {
        ((1.0 - self.gamma) / (self.zeta - 1.0)).ln()
    }

    pub fn stretch(&self, s: f64) -> f64 {
        s * (self.zeta - self.gamma) + self.gamma
    }

    /// Logistic noise term `log(u/(1-u)) / beta`.
    pub fn noise(&self, u: f64) -> f64 {
        (u / (1.0 - u)).ln() / self.beta
    }

    /// Pre-clamp value for one uniform draw.
    pub fn s_bar(&self, log_alpha: f64, u: f64) -> f64 {
        self.stretch(sigmoid(self.noise(u) + log_alpha))
    }

    pub fn sample_one(&self, log_alpha: f64, u: f64) -> f64 {
        self.s_bar(log_alpha, u).clamp(0.0, 1.0)
    }

    pub fn prob_nonzero(&self, log_alpha: f64) -> f64 {
        sigmoid(self.beta * (log_alpha - self.zero_threshold()))
    }

    pub fn prob_one(&self, log_alpha: f64) -> f64 {
        sigmoid(self.beta * (log_alpha - self.one_threshold()))
    }

    /// Test-time gate value: the noise-free stretched sigmoid, clamped.
    pub fn deterministic(&self, log_alpha: f64) -> f64 {
        self.stretch(sigmoid(log_alpha)).clamp(0.0, 1.0)
    }

    pub fn monte_carlo(&self, log_alpha: f64, n: usize, bins: usize, rng: &mut Rng) -> McStats {
        assert!(n >= 1 && bins >= 1);
        let mut zeros = 0usize;
        let mut ones = 0usize;
        let mut sum = 0.0;
        let mut hist = vec![0usize; bins];
        for _ in 0..n {
            let z = self.sample_one(log_alpha, rng.uniform_open(NOISE_EPS));
            sum += z;
            if z <= 0.0 {
                zeros += 1;
            } else if z >= 1.0 {
                ones += 1;
            } else {
                hist[((z * bins as f64) as usize).min(bins - 1)] += 1;
            }
        }
        let nf = n as f64;
        McStats {
            log_alpha,
            n,
            p_zero: zeros as f64 / nf,
            p_one: ones as f64 / nf,
            mean_z: sum / nf,
            histogram: hist.into_iter().map(|c| c as f64 / nf).collect(),
        }
    }
}

/// Empirical distribution of `z` for one log_alpha.
#[derive(Debug, Clone, Serialize)]
pub struct McStats {
    pub log_alpha: f64,
    pub n: usize,
    pub p_zero: f64,
    pub p_one: f64,
    pub mean_z: f64,
    /// Mass of `z` strictly inside `(0, 1)`, in equal-width bins.
    pub histogram: Vec<f64>,
}

impl McStats {
    pub fn p_nonzero(&self) -> f64 {
        1.0 - self.p_zero
    }

    /// `P(z=0) + P(z=1) + interior mass`.
    pub fn total_mass(&self) -> f64 {
        self.p_zero + self.p_one + self.histogram.iter().sum::<f64>()
    }
}

/// Which gate groups get the clipped straight-through backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteMode {
    All,
    CoarseOnly,
    Off,
}

impl SteMode {
    pub fn applies_to(self, g: Granularity) -> bool {
        match self {
            Self::All => true,
            Self::CoarseOnly => g.is_coarse(),
            Self::Off => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::CoarseOnly => "coarse_only",
            Self::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::All, Self::CoarseOnly, Self::Off].into_iter().find(|m| m.name() == s)
    }
}

/// Clipped straight-through gradient, elementwise.
pub fn ste_clip(up: f64) -> f64 {
    if up >= 1.0 {
        1.0
    } else if up < -1.0 {
        -1.0
    } else {
        up
    }
}

pub fn ste_grad_transform(upstream: &Tensor) -> Tensor {
    upstream.map(ste_clip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGroup {
    pub log_alpha: Tensor,
    pub dist: HardConcrete,
    pub granularity: Granularity,
    pub layer_index: usize,
    pub ste_enabled: bool,
    /// Raw weights each gate element controls on its own.
    pub params_per_unit: usize,
}

/// Graph nodes produced by one draw of a gate group.
#[derive(Debug, Clone)]
pub struct GateSample {
    pub z: Var,
    pub s_bar: Var,
    pub u: Vec<f64>,
}

impl GateGroup {
    pub fn new(
        log_alpha: Vec<f64>,
        dist: HardConcrete,
        granularity: Granularity,
        layer_index: usize,
        params_per_unit: usize,
    ) -> Result<Self> {
        dist.validate()?;
        Ok(Self {
            log_alpha: Tensor::vector(log_alpha),
            dist,
            granularity,
            layer_index,
            ste_enabled: true,
            params_per_unit,
        })
    }

    /// Gates with `log_alpha ~ Normal(init_mean / beta, init_sd)`.
    pub fn init(
        len: usize,
        dist: HardConcrete,
        granularity: Granularity,
        layer_index: usize,
        params_per_unit: usize,
        init: GateInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mean = init.mean / dist.beta;
        let la = (0..len).map(|_| rng.normal(mean, init.sd)).collect();
        Self::new(la, dist, granularity, layer_index, params_per_unit)
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    /// Draw uniforms for every element.
    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.len()).map(|_| rng.uniform_open(NOISE_EPS)).collect()
    }

    /// Reparameterized sample, differentiable with respect to `log_alpha`.
    pub fn sample(&self, g: &mut Graph, log_alpha: Var, rng: &mut Rng) -> Result<GateSample> {
        let u = self.draw_noise(rng);
        self.sample_with_noise(g, log_alpha, u)
    }

    pub fn sample_with_noise(&self, g: &mut Graph, log_alpha: Var, u: Vec<f64>) -> Result<GateSample> {
        if u.len() != self.len() || g.value(log_alpha).len() != self.len() {
            return Err(Error::Shape {
                op: "gate_sample",
                detail: format!("{} gates, {} uniforms", self.len(), u.len()),
            });
        }
        let noise = Tensor::new(
            g.value(log_alpha).shape().to_vec(),
            u.iter().map(|&v| self.dist.noise(v)).collect(),
        )?;
        let noise = g.constant(noise);
        let pre = g.add(log_alpha, noise)?;
        let s = g.sigmoid(pre);
        let s = g.scale(s, self.dist.zeta - self.dist.gamma);
        let s_bar = g.add_const(s, self.dist.gamma);
        let mut z = g.clamp(s_bar, 0.0, 1.0);
        if self.ste_enabled {
            z = g.custom_grad(z, Box::new(ste_grad_transform))?;
        }
        Ok(GateSample { z, s_bar, u })
    }

    pub fn prob_nonzero(&self) -> Vec<f64> {
        self.log_alpha.data().iter().map(|&la| self.dist.prob_nonzero(la)).collect()
    }

    /// `P(z > 0)` as a graph node of `log_alpha`.
    pub fn prob_nonzero_node(&self, g: &mut Graph, log_alpha: Var) -> Var {
        let shifted = g.add_const(log_alpha, -self.dist.zero_threshold());
        let scaled = g.scale(shifted, self.dist.beta);
        g.sigmoid(scaled)
    }

    pub fn deterministic_eval(&self) -> Vec<f64> {
        self.log_alpha.data().iter().map(|&la| self.dist.deterministic(la)).collect()
    }

    pub fn monte_carlo_stats(&self, n: usize, bins: usize, rng: &mut Rng) -> Vec<McStats> {
        self.log_alpha.data().iter().map(|&la| self.dist.monte_carlo(la, n, bins, rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateInit {
    /// Mean of log_alpha before division by beta.
    pub mean: f64,
    pub sd: f64,
}

impl Default for GateInit {
    fn default() -> Self {
        Self { mean: 2.0, sd: 0.01 }
    }
}

/// One row of the gate-simulation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct GateSimRow {
    pub log_alpha: f64,
    pub p_zero: f64,
    pub p_one: f64,
    pub mean_z: f64,
    pub det_z: f64,
}

/// Monte Carlo sweep over `log_alpha` values.
pub fn gate_sim(dist: &HardConcrete, log_alphas: &[f64], n: usize, rng: &mut Rng) -> Vec<GateSimRow> {
    log_alphas
        .iter()
        .map(|&la| {
            let st = dist.monte_carlo(la, n, 1, rng);
            GateSimRow {
                log_alpha: la,
                p_zero: st.p_zero,
                p_one: st.p_one,
                mean_z: st.mean_z,
                det_z: dist.deterministic(la),
            }
        })
        .collect()
}

pub fn gate_sim_csv(rows: &[GateSimRow]) -> String {
    let mut out = String::from("log_alpha,p_zero,p_one,mean_z,det_z\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.log_alpha, r.p_zero, r.p_one, r.mean_z, r.det_z));
    }
    out
}
