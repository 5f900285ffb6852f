//! Gate bookkeeping, expected sparsity and the Lagrangian sparsity penalty.
//!
//! A fine-grained unit (query/key dim, value/output dim, FFN neuron)
//! survives only if both it and its sublayer gate are non-zero. The two
//! gates are treated as independent, so the expected number of remaining
//! prunable weights in a layer is
//!
//! ```text
//! P(mha) * (d + Σ_qk 130·P(qk) + Σ_vo 129·P(vo)) + P(ffn) * (d + Σ_int 129·P(int))
//! ```
//!
//! (coefficients shown for `d = 64`), and `p̂ = 1 − remaining / total`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gates::{GateGroup, GateInit, Granularity, HardConcrete, SteMode};
use crate::model::{Checkpoint, EncoderConfig, GraphMasks, LayerMask, LayerMaskVars, MaskSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// The five gate groups of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGates {
    pub mha: GateGroup,
    pub ffn: GateGroup,
    pub qk: GateGroup,
    pub vo: GateGroup,
    pub int: GateGroup,
}

impl LayerGates {
    pub fn get(&self, g: Granularity) -> &GateGroup {
        match g {
            Granularity::MhaLayer => &self.mha,
            Granularity::FfnLayer => &self.ffn,
            Granularity::QkDim => &self.qk,
            Granularity::VoDim => &self.vo,
            Granularity::FfnInt => &self.int,
        }
    }

    pub fn get_mut(&mut self, g: Granularity) -> &mut GateGroup {
        match g {
            Granularity::MhaLayer => &mut self.mha,
            Granularity::FfnLayer => &mut self.ffn,
            Granularity::QkDim => &mut self.qk,
            Granularity::VoDim => &mut self.vo,
            Granularity::FfnInt => &mut self.int,
        }
    }
}

/// Every gate of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub config: EncoderConfig,
    pub dist: HardConcrete,
    pub ste: SteMode,
    pub layers: Vec<LayerGates>,
}

/// Graph leaves for the gate parameters, `[mha, ffn, qk, vo, int]` per layer.
#[derive(Debug, Clone)]
pub struct GateVars {
    pub layers: Vec<[Var; 5]>,
}

impl GateVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flatten().copied().collect()
    }
}

fn slot(g: Granularity) -> usize {
    Granularity::ALL.iter().position(|&x| x == g).expect("granularity listed")
}

impl GateSet {
    pub fn init(cfg: &EncoderConfig, dist: HardConcrete, ste: SteMode, init: GateInit, rng: &mut Rng) -> Result<Self> {
        let mut groups = Vec::new();
        for l in 0..cfg.n_layers {
            for g in Granularity::ALL {
                groups.push(GateGroup::init(cfg.gate_len(g), dist, g, l, cfg.params_controlled(g), init, rng)?);
            }
        }
        Self::from_groups(cfg, dist, ste, groups)
    }

    /// Assemble from loose groups, rejecting duplicate, missing or
    /// mis-sized coverage of the prunable weights.
    pub fn from_groups(cfg: &EncoderConfig, dist: HardConcrete, ste: SteMode, groups: Vec<GateGroup>) -> Result<Self> {
        let mut slots: Vec<[Option<GateGroup>; 5]> = (0..cfg.n_layers).map(|_| Default::default()).collect();
        for mut grp in groups {
            let l = grp.layer_index;
            if l >= cfg.n_layers {
                return Err(Error::Config(format!("gate group for layer {l} of {}", cfg.n_layers)));
            }
            let (name, g) = (grp.granularity.name(), grp.granularity);
            if grp.len() != cfg.gate_len(g) || grp.params_per_unit != cfg.params_controlled(g) {
                return Err(Error::Config(format!(
                    "layer {l} {name}: {} gates x {} params, expected {} x {}",
                    grp.len(),
                    grp.params_per_unit,
                    cfg.gate_len(g),
                    cfg.params_controlled(g)
                )));
            }
            grp.ste_enabled = ste.applies_to(g);
            let s = &mut slots[l][slot(g)];
            if s.is_some() {
                return Err(Error::Config(format!("layer {l} {name}: covered twice")));
            }
            *s = Some(grp);
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, s) in slots.into_iter().enumerate() {
            let [mha, ffn, qk, vo, int] = s;
            let miss = |n: &str| Error::Config(format!("layer {l} {n}: not covered"));
            layers.push(LayerGates {
                mha: mha.ok_or_else(|| miss("mha_layer"))?,
                ffn: ffn.ok_or_else(|| miss("ffn_layer"))?,
                qk: qk.ok_or_else(|| miss("qk_dim"))?,
                vo: vo.ok_or_else(|| miss("vo_dim"))?,
                int: int.ok_or_else(|| miss("ffn_int"))?,
            });
        }
        let set = Self { config: *cfg, dist, ste, layers };
        set.coverage_audit()?;
        Ok(set)
    }

    pub fn groups(&self) -> impl Iterator<Item = &GateGroup> {
        self.layers.iter().flat_map(|l| Granularity::ALL.into_iter().map(move |g| l.get(g)))
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut GateGroup> {
        self.layers.iter_mut().flat_map(|l| [&mut l.mha, &mut l.ffn, &mut l.qk, &mut l.vo, &mut l.int])
    }

    /// Integer check that the groups own exactly the prunable weights.
    pub fn coverage_audit(&self) -> Result<()> {
        let owned: usize = self.groups().map(|g| g.len() * g.params_per_unit).sum();
        let total = self.config.prunable_params();
        if owned != total {
            return Err(Error::Config(format!("gates own {owned} weights, {total} are prunable")));
        }
        Ok(())
    }

    pub fn set_ste(&mut self, ste: SteMode) {
        self.ste = ste;
        for g in self.groups_mut() {
            g.ste_enabled = ste.applies_to(g.granularity);
        }
    }

    pub fn register(&self, g: &mut Graph) -> GateVars {
        let layers = self
            .layers
            .iter()
            .map(|l| Granularity::ALL.map(|gran| g.param(l.get(gran).log_alpha.clone())))
            .collect();
        GateVars { layers }
    }

    /// Draw one hard-concrete sample per gate and return the mask nodes.
    pub fn sample(&self, g: &mut Graph, vars: &GateVars, rng: &mut Rng) -> Result<GraphMasks> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (lg, v) in self.layers.iter().zip(&vars.layers) {
            let mut z = [v[0]; 5];
            for (i, gran) in Granularity::ALL.into_iter().enumerate() {
                z[i] = lg.get(gran).sample(g, v[i], rng)?.z;
            }
            layers.push(LayerMaskVars { mha: z[0], ffn: z[1], qk: z[2], vo: z[3], int: z[4] });
        }
        Ok(GraphMasks { layers })
    }

    /// Inference-time gate values.
    pub fn deterministic_masks(&self) -> MaskSet {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerMask {
                mha: l.mha.deterministic_eval()[0],
                ffn: l.ffn.deterministic_eval()[0],
                qk: l.qk.deterministic_eval(),
                vo: l.vo.deterministic_eval(),
                int: l.int.deterministic_eval(),
            })
            .collect();
        MaskSet { layers }
    }

    /// Differentiable `p̂` from the registered gate leaves.
    pub fn expected_sparsity(&self, g: &mut Graph, vars: &GateVars) -> Result<Var> {
        let d = self.config.d_hidden as f64;
        let mut remaining: Option<Var> = None;
        for (lg, v) in self.layers.iter().zip(&vars.layers) {
            let p: Vec<Var> = Granularity::ALL
                .into_iter()
                .enumerate()
                .map(|(i, gran)| lg.get(gran).prob_nonzero_node(g, v[i]))
                .collect();
            let weighted = |g: &mut Graph, i: usize, grp: &GateGroup| {
                let s = g.sum(p[i]);
                g.scale(s, grp.params_per_unit as f64)
            };
            let qk = weighted(g, 2, &lg.qk);
            let vo = weighted(g, 3, &lg.vo);
            let attn = g.add(qk, vo)?;
            let attn = g.add_const(attn, d);
            let attn = g.scale_by(attn, p[0])?;
            let int = weighted(g, 4, &lg.int);
            let ffn = g.add_const(int, d);
            let ffn = g.scale_by(ffn, p[1])?;
            let layer = g.add(attn, ffn)?;
            remaining = Some(match remaining {
                None => layer,
                Some(r) => g.add(r, layer)?,
            });
        }
        let remaining = remaining.ok_or_else(|| Error::Config("no gated layers".into()))?;
        let frac = g.scale(remaining, -1.0 / self.config.prunable_params() as f64);
        Ok(g.add_const(frac, 1.0))
    }

    /// `p̂` evaluated directly, without a graph.
    pub fn expected_sparsity_value(&self) -> f64 {
        self.sparsity_with(|grp| grp.prob_nonzero())
    }

    /// Fraction of prunable weights whose deterministic gate product is zero.
    pub fn deterministic_sparsity(&self) -> f64 {
        self.sparsity_with(|grp| grp.deterministic_eval().into_iter().map(|z| (z > 0.0) as u8 as f64).collect())
    }

    fn sparsity_with(&self, keep: impl Fn(&GateGroup) -> Vec<f64>) -> f64 {
        let d = self.config.d_hidden as f64;
        let weighted = |grp: &GateGroup| keep(grp).iter().sum::<f64>() * grp.params_per_unit as f64;
        let remaining: f64 = self
            .layers
            .iter()
            .map(|l| {
                keep(&l.mha)[0] * (d + weighted(&l.qk) + weighted(&l.vo)) + keep(&l.ffn)[0] * (d + weighted(&l.int))
            })
            .sum();
        1.0 - remaining / self.config.prunable_params() as f64
    }

    /// Mean deterministic gate value per layer, per granularity.
    pub fn mean_deterministic(&self) -> Vec<[f64; 5]> {
        self.layers
            .iter()
            .map(|l| {
                Granularity::ALL.map(|g| {
                    let z = l.get(g).deterministic_eval();
                    z.iter().sum::<f64>() / z.len() as f64
                })
            })
            .collect()
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.set_meta("gate_beta", self.dist.beta);
        ck.set_meta("gate_gamma", self.dist.gamma);
        ck.set_meta("gate_zeta", self.dist.zeta);
        ck.set_meta("gate_ste", self.ste.name());
        for (l, lg) in self.layers.iter().enumerate() {
            for gran in Granularity::ALL {
                ck.push(format!("layer{l}.gate.{}", gran.name()), lg.get(gran).log_alpha.clone());
            }
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config()?;
        let dist = HardConcrete {
            beta: ck.meta_parse("gate_beta")?,
            gamma: ck.meta_parse("gate_gamma")?,
            zeta: ck.meta_parse("gate_zeta")?,
        };
        let ste = SteMode::parse(ck.meta_str("gate_ste")?)
            .ok_or_else(|| Error::Checkpoint("unknown gate_ste".into()))?;
        let mut groups = Vec::new();
        for l in 0..cfg.n_layers {
            for gran in Granularity::ALL {
                let t = ck.tensor(&format!("layer{l}.gate.{}", gran.name()))?;
                groups.push(GateGroup::new(t.data().to_vec(), dist, gran, l, cfg.params_controlled(gran))?);
            }
        }
        Self::from_groups(&cfg, dist, ste, groups)
    }

    /// Copy updated leaf values back after an optimizer step.
    pub fn load_from(&mut self, vals: &[Tensor]) -> Result<()> {
        let n = self.layers.len() * 5;
        if vals.len() != n {
            return Err(Error::Shape { op: "gate_load", detail: format!("{} tensors for {n} groups", vals.len()) });
        }
        for (grp, v) in self.groups_mut().zip(vals) {
            if v.len() != grp.len() {
                return Err(Error::Shape { op: "gate_load", detail: format!("{} values for {} gates", v.len(), grp.len()) });
            }
            grp.log_alpha = v.clone();
        }
        Ok(())
    }
}

/// Multipliers of the sparsity constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda1: f64,
    pub lambda2: f64,
    pub target_p: f64,
    pub current_p_hat: f64,
}

impl LagrangianState {
    pub fn new(target_p: f64) -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, target_p, current_p_hat: 0.0 }
    }

    /// Gradient ascent on the multipliers; `λ2` stays non-negative.
    pub fn update_multipliers(&mut self, gap: f64, lr_lambda: f64) {
        self.lambda1 += lr_lambda * gap;
        self.lambda2 = (self.lambda2 + lr_lambda * gap * gap).max(0.0);
    }

    pub fn penalty_value(&self, p_hat: f64) -> f64 {
        let gap = p_hat - self.target_p;
        self.lambda1 * gap + self.lambda2 * gap * gap
    }
}

/// `λ1 (p̂ − p) + λ2 (p̂ − p)²` as a graph node.
pub fn lagrangian_penalty(g: &mut Graph, p_hat: Var, state: &LagrangianState) -> Result<Var> {
    let gap = g.add_const(p_hat, -state.target_p);
    let sq = g.square(gap);
    let a = g.scale(gap, state.lambda1);
    let b = g.scale(sq, state.lambda2);
    g.add(a, b)
}

/// One row of the per-step sparsity log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityRecord {
    pub step: usize,
    pub target_p: f64,
    pub p_hat_expected: f64,
    pub p_hat_deterministic: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}
