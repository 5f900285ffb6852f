use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::EncoderConfig;

/// Concrete gate values for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub mha: f64,
    pub ffn: f64,
    pub qk: Vec<f64>,
    pub vo: Vec<f64>,
    pub int: Vec<f64>,
}

/// Concrete gate values for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub layers: Vec<LayerMask>,
}

impl MaskSet {
    pub fn all_ones(cfg: &EncoderConfig) -> Self {
        Self::filled(cfg, 1.0)
    }

    pub fn filled(cfg: &EncoderConfig, v: f64) -> Self {
        let layer = LayerMask {
            mha: v,
            ffn: v,
            qk: vec![v; cfg.attn_width()],
            vo: vec![v; cfg.attn_width()],
            int: vec![v; cfg.d_ffn],
        };
        Self { layers: vec![layer; cfg.n_layers] }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape {
                op: "mask_set",
                detail: format!("{} layers, expected {}", self.layers.len(), cfg.n_layers),
            });
        }
        for (l, m) in self.layers.iter().enumerate() {
            let lens = [(m.qk.len(), cfg.attn_width()), (m.vo.len(), cfg.attn_width()), (m.int.len(), cfg.d_ffn)];
            if lens.iter().any(|(a, b)| a != b) {
                return Err(Error::Shape { op: "mask_set", detail: format!("layer {l}: mask lengths {lens:?}") });
            }
            let all = [m.mha, m.ffn].into_iter().chain(m.qk.iter().copied()).chain(m.vo.iter().copied());
            if all.chain(m.int.iter().copied()).any(|v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!("layer {l}: mask value outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Constants in `g` for a gated forward.
    pub fn to_graph(&self, g: &mut Graph) -> GraphMasks {
        let layers = self
            .layers
            .iter()
            .map(|m| LayerMaskVars {
                mha: g.constant(Tensor::scalar(m.mha)),
                ffn: g.constant(Tensor::scalar(m.ffn)),
                qk: g.constant(Tensor::vector(m.qk.clone())),
                vo: g.constant(Tensor::vector(m.vo.clone())),
                int: g.constant(Tensor::vector(m.int.clone())),
            })
            .collect();
        GraphMasks { layers }
    }
}

/// Gate nodes for one block.
#[derive(Debug, Clone, Copy)]
pub struct LayerMaskVars {
    pub mha: Var,
    pub ffn: Var,
    pub qk: Var,
    pub vo: Var,
    pub int: Var,
}

/// Gate nodes for every block, either sampled or constant.
#[derive(Debug, Clone)]
pub struct GraphMasks {
    pub layers: Vec<LayerMaskVars>,
}
