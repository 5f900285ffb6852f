//! Pre-norm transformer encoder with multiplicative structure gates.
//!
//! Each block computes
//!
//! ```text
//! h = h + z_mha * (concat_i softmax(scale * (Q_i diag(z_qk_i)) K_i^T) V_i diag(z_vo_i)) W_O + b_O)
//! h = h + z_ffn * ((gelu(LN(h) W_U + b_U) diag(z_int)) W_D + b_D)
//! ```
//!
//! where `Q_i, K_i, V_i` are per-head projections of `LN(h)` (biases
//! included and masked together with their columns) and `scale` is
//! `1/sqrt(d_head)` of the unpruned head.

mod checkpoint;
mod forward;
mod masks;

pub use checkpoint::Checkpoint;
pub use forward::{
    attention_head, encoder_forward, masked_attention_head, masked_ffn, masked_mha, register,
    LayerVars, ModelVars,
};
pub use masks::{GraphMasks, LayerMask, LayerMaskVars, MaskSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::Granularity;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { n_layers: 4, d_hidden: 64, n_heads: 4, d_head: 16, d_ffn: 256, max_seq_len: 32, input_dim: 16 }
    }
}

pub const LN_EPS: f64 = 1e-5;

impl EncoderConfig {
    /// Dimensions of a 12-layer base-size speech encoder.
    pub fn base_scale() -> Self {
        Self { n_layers: 12, d_hidden: 768, n_heads: 12, d_head: 64, d_ffn: 3072, max_seq_len: 512, input_dim: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_hidden", self.d_hidden),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Total query/key (and value/output) width across heads.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Training-time attention logit scale.
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }

    /// Number of gate elements of a granularity in one layer.
    pub fn gate_len(&self, g: Granularity) -> usize {
        match g {
            Granularity::MhaLayer | Granularity::FfnLayer => 1,
            Granularity::QkDim | Granularity::VoDim => self.attn_width(),
            Granularity::FfnInt => self.d_ffn,
        }
    }

    /// Prunable weights owned by one gate element of granularity `g`.
    ///
    /// Layer gates own only the output bias of their sublayer; everything
    /// else in the sublayer is owned by a fine-grained unit and reaches the
    /// layer gate through the coarse-times-fine product.
    pub fn params_controlled(&self, g: Granularity) -> usize {
        let d = self.d_hidden;
        match g {
            // W_Q column + b_Q entry + W_K column + b_K entry
            Granularity::QkDim => 2 * d + 2,
            // W_V column + b_V entry + W_O row
            Granularity::VoDim => 2 * d + 1,
            // W_U column + b_U entry + W_D row
            Granularity::FfnInt => 2 * d + 1,
            // b_O, b_D
            Granularity::MhaLayer | Granularity::FfnLayer => d,
        }
    }

    pub fn prunable_per_layer(&self) -> usize {
        Granularity::ALL.iter().map(|&g| self.gate_len(g) * self.params_controlled(g)).sum()
    }

    pub fn prunable_params(&self) -> usize {
        self.n_layers * self.prunable_per_layer()
    }

    /// Embedding, layer norms and readout.
    pub fn unprunable_params(&self) -> usize {
        let d = self.d_hidden;
        (self.input_dim * d + d) + self.n_layers * 4 * d + (d * self.input_dim + self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub wu: Tensor,
    pub bu: Tensor,
    pub wd: Tensor,
    pub bd: Tensor,
}

pub const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "wu", "bu", "wd", "bd",
];

impl LayerWeights {
    fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_hidden;
        let a = cfg.attn_width();
        let f = cfg.d_ffn;
        Self {
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq: normal(d, a, rng),
            bq: bias(a, rng),
            wk: normal(d, a, rng),
            bk: bias(a, rng),
            wv: normal(d, a, rng),
            bv: bias(a, rng),
            wo: normal(a, d, rng),
            bo: bias(d, rng),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            wu: normal(d, f, rng),
            bu: bias(f, rng),
            wd: normal(f, d, rng),
            bd: bias(d, rng),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.wu, &self.bu, &self.wd, &self.bd,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.wu, &mut self.bu, &mut self.wd, &mut self.bd,
        ]
    }
}

/// `N(0, 1/fan_in)` initialization.
fn normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let sd = 1.0 / (rows as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.normal(0.0, sd))
}

fn bias(n: usize, rng: &mut Rng) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.normal(0.0, 0.02)).collect())
}

/// Dense encoder weights plus input embedding and readout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub layers: Vec<LayerWeights>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl EncoderModel {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w_in = normal(config.input_dim, config.d_hidden, rng);
        let b_in = bias(config.d_hidden, rng);
        let layers = (0..config.n_layers).map(|_| LayerWeights::init(&config, rng)).collect();
        let w_out = normal(config.d_hidden, config.input_dim, rng);
        let b_out = bias(config.input_dim, rng);
        Ok(Self { config, w_in, b_in, layers, w_out, b_out })
    }

    /// All tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_in".to_string(), &self.w_in), ("b_in".to_string(), &self.b_in)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_in, &mut self.b_in];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over the raw bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("dense");
        ck.set_config(&self.config);
        for (name, t) in self.named_tensors() {
            ck.push(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config()?;
        let take = |name: &str| ck.tensor(name).cloned();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let g = |n: &str| take(&format!("layer{l}.{n}"));
            layers.push(LayerWeights {
                ln1_g: g("ln1_g")?,
                ln1_b: g("ln1_b")?,
                wq: g("wq")?,
                bq: g("bq")?,
                wk: g("wk")?,
                bk: g("bk")?,
                wv: g("wv")?,
                bv: g("bv")?,
                wo: g("wo")?,
                bo: g("bo")?,
                ln2_g: g("ln2_g")?,
                ln2_b: g("ln2_b")?,
                wu: g("wu")?,
                bu: g("bu")?,
                wd: g("wd")?,
                bd: g("bd")?,
            });
        }
        let m = Self {
            config,
            w_in: take("w_in")?,
            b_in: take("b_in")?,
            layers,
            w_out: take("w_out")?,
            b_out: take("b_out")?,
        };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (d, a, f) = (c.d_hidden, c.attn_width(), c.d_ffn);
        let mut expect: Vec<(&Tensor, Vec<usize>, String)> = vec![
            (&self.w_in, vec![c.input_dim, d], "w_in".into()),
            (&self.b_in, vec![d], "b_in".into()),
            (&self.w_out, vec![d, c.input_dim], "w_out".into()),
            (&self.b_out, vec![c.input_dim], "b_out".into()),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            let shapes = [
                vec![d], vec![d], vec![d, a], vec![a], vec![d, a], vec![a], vec![d, a], vec![a],
                vec![a, d], vec![d], vec![d], vec![d], vec![d, f], vec![f], vec![f, d], vec![d],
            ];
            for ((t, s), n) in w.tensors().into_iter().zip(shapes).zip(LAYER_TENSORS) {
                expect.push((t, s, format!("layer{l}.{n}")));
            }
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::Config(format!("{} layers, config says {}", self.layers.len(), c.n_layers)));
        }
        for (t, s, n) in expect {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape { op: "model", detail: format!("{n}: {:?}, expected {:?}", t.shape(), s) });
            }
        }
        Ok(())
    }
}

/// Fixed sinusoidal position encoding, `seq × d`.
pub fn positional_encoding(seq: usize, d: usize) -> Tensor {
    Tensor::from_fn(seq, d, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Position encoding tiled for `batch` stacked sequences.
pub fn tiled_positional_encoding(batch: usize, seq: usize, d: usize) -> Tensor {
    let pe = positional_encoding(seq, d);
    let mut data = Vec::with_capacity(batch * seq * d);
    for _ in 0..batch {
        data.extend_from_slice(pe.data());
    }
    Tensor::matrix(batch * seq, d, data).expect("tiled shape")
}

#[cfg(test)]
mod tests;
