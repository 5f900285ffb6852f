//! Run configuration: a flat TOML table with every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::PairingMode;
use crate::error::{Error, Result};
use crate::gates::{GateInit, HardConcrete, SteMode};
use crate::model::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianAr,
    RandomTones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub seq_len: usize,
    pub input_dim: usize,

    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub ste: SteMode,
    pub gate_init_mean: f64,
    pub gate_init_sd: f64,

    pub total_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Constant Adam step size for the gate parameters.
    pub gate_lr: f64,
    pub target_sparsity: f64,
    pub lr_lambda: f64,

    pub pairing: PairingMode,
    pub pairing_refresh: usize,

    pub dataset: DatasetKind,
    pub ar_coeff: f64,
    pub tone_count: usize,
    pub noise_sd: f64,

    /// Denoising steps used to train the teacher before pruning (0 keeps
    /// the seeded random weights).
    pub teacher_pretrain_steps: usize,
    pub teacher_lr: f64,

    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let hc = HardConcrete::default();
        let init = GateInit::default();
        Self {
            seed: 0,
            n_layers: enc.n_layers,
            d_hidden: enc.d_hidden,
            n_heads: enc.n_heads,
            d_head: enc.d_head,
            d_ffn: enc.d_ffn,
            seq_len: enc.max_seq_len,
            input_dim: enc.input_dim,
            beta: hc.beta,
            gamma: hc.gamma,
            zeta: hc.zeta,
            ste: SteMode::All,
            gate_init_mean: init.mean,
            gate_init_sd: init.sd,
            total_steps: 5000,
            batch_size: 8,
            peak_lr: 2.0e-4,
            warmup_fraction: 0.07,
            weight_decay: 0.0,
            gate_lr: 0.1,
            target_sparsity: 0.8,
            lr_lambda: 0.1,
            pairing: PairingMode::DynamicMinMse,
            pairing_refresh: 100,
            dataset: DatasetKind::GaussianAr,
            ar_coeff: 0.9,
            tone_count: 3,
            noise_sd: 0.1,
            teacher_pretrain_steps: 0,
            teacher_lr: 1.0e-3,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            d_hidden: self.d_hidden,
            n_heads: self.n_heads,
            d_head: self.d_head,
            d_ffn: self.d_ffn,
            max_seq_len: self.seq_len,
            input_dim: self.input_dim,
        }
    }

    pub fn hard_concrete(&self) -> HardConcrete {
        HardConcrete { beta: self.beta, gamma: self.gamma, zeta: self.zeta }
    }

    pub fn gate_init(&self) -> GateInit {
        GateInit { mean: self.gate_init_mean, sd: self.gate_init_sd }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.hard_concrete().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return bad("target_sparsity must lie in [0, 1)");
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be >= 1");
        }
        if self.pairing == PairingMode::DynamicMinMse && self.pairing_refresh == 0 {
            return bad("pairing_refresh must be >= 1");
        }
        if !(0.0..1.0).contains(&self.ar_coeff.abs()) {
            return bad("ar_coeff must lie in (-1, 1)");
        }
        let rates = [self.peak_lr, self.gate_lr, self.lr_lambda, self.teacher_lr, self.weight_decay, self.noise_sd];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return bad("rates and noise levels must be finite and non-negative");
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}
