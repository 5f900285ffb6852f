//! Turning a gated model into a smaller dense one.
//!
//! Deterministic gate values are either zero (the structure is deleted)
//! or folded into adjacent weights:
//!
//! - query/key dims: `ẑ_qk` scales the kept `W_Q` column and `b_Q` entry.
//! - value/output dims: `ẑ_vo · ẑ_mha` scales the kept `W_V` column and
//!   `b_V` entry; `b_O` is scaled by `ẑ_mha`.
//! - FFN neurons: `ẑ_int · ẑ_ffn` scales the kept `W_D` row (the GELU in
//!   between rules out the `W_U` side); `b_D` is scaled by `ẑ_ffn`.
//!
//! A head with no surviving value dims contributes nothing and is dropped
//! with its query/key dims. A sublayer whose gate is open but whose every
//! unit is gone still adds its folded output bias; that bias is kept as a
//! constant offset.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::gelu;
use crate::model::{positional_encoding, Checkpoint, EncoderConfig, EncoderModel, MaskSet, LN_EPS};
use crate::sparsity::GateSet;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Attention heads survive.
    pub keep_mha: bool,
    pub keep_ffn: bool,
    /// No head survives but the sublayer gate is open: keep `ẑ_mha · b_O`.
    pub mha_bias_only: bool,
    pub ffn_bias_only: bool,
    pub mha_gate: f64,
    pub ffn_gate: f64,
    pub keep_qk: Vec<usize>,
    pub qk_gate: Vec<f64>,
    pub keep_vo: Vec<usize>,
    pub vo_gate: Vec<f64>,
    pub keep_int: Vec<usize>,
    pub int_gate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactPlan {
    pub threshold: f64,
    pub layers: Vec<LayerPlan>,
    /// Normalizations applied while deriving the plan.
    pub notes: Vec<String>,
}

/// Plan from concrete gate values laid out as in the dense model.
pub fn derive_plan_from_masks(cfg: &EncoderConfig, masks: &MaskSet, threshold: f64) -> Result<CompactPlan> {
    masks.validate(cfg)?;
    let dh = cfg.d_head;
    let mut notes = Vec::new();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, m) in masks.layers.iter().enumerate() {
        let mha_open = m.mha > threshold;
        let ffn_open = m.ffn > threshold;
        let mut keep_qk = Vec::new();
        let mut keep_vo = Vec::new();
        if mha_open {
            for h in 0..cfg.n_heads {
                let r = h * dh..(h + 1) * dh;
                let vo: Vec<usize> = r.clone().filter(|&j| m.vo[j] > threshold).collect();
                if vo.is_empty() {
                    if r.clone().any(|j| m.qk[j] > threshold) {
                        notes.push(format!("layer {l} head {h}: no value dims left, query/key dims dropped"));
                    }
                    continue;
                }
                keep_qk.extend(r.filter(|&j| m.qk[j] > threshold));
                keep_vo.extend(vo);
            }
        }
        let keep_int: Vec<usize> =
            if ffn_open { (0..cfg.d_ffn).filter(|&j| m.int[j] > threshold).collect() } else { Vec::new() };
        let keep_mha = !keep_vo.is_empty();
        let keep_ffn = !keep_int.is_empty();
        if mha_open && !keep_mha {
            notes.push(format!("layer {l}: attention gate open with no heads left, kept as bias offset"));
        }
        if ffn_open && !keep_ffn {
            notes.push(format!("layer {l}: ffn gate open with no neurons left, kept as bias offset"));
        }
        layers.push(LayerPlan {
            keep_mha,
            keep_ffn,
            mha_bias_only: mha_open && !keep_mha,
            ffn_bias_only: ffn_open && !keep_ffn,
            mha_gate: if mha_open { m.mha } else { 0.0 },
            ffn_gate: if ffn_open { m.ffn } else { 0.0 },
            qk_gate: keep_qk.iter().map(|&j| m.qk[j]).collect(),
            keep_qk,
            vo_gate: keep_vo.iter().map(|&j| m.vo[j]).collect(),
            keep_vo,
            int_gate: keep_int.iter().map(|&j| m.int[j]).collect(),
            keep_int,
        });
    }
    Ok(CompactPlan { threshold, layers, notes })
}

/// Plan from the deterministic values of a trained gate set.
pub fn derive_plan(gates: &GateSet, threshold: f64) -> Result<CompactPlan> {
    derive_plan_from_masks(&gates.config, &gates.deterministic_masks(), threshold)
}

/// How compaction sets each surviving head's attention logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// Keep the scale the head was trained with (`1/sqrt(d_head)`).
    Keep,
    /// `1/sqrt(retained query/key dims)`.
    Retained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Head index in the original model.
    pub index: usize,
    pub q_dims: usize,
    pub v_dims: usize,
    pub scale: f64,
}

/// Concatenated per-head projections. Head `i` owns the next
/// `heads[i].q_dims` columns of `wq`/`wk` and `heads[i].v_dims` columns of
/// `wv` (rows of `wo`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompactAttention {
    pub heads: Vec<HeadSpec>,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactFfn {
    pub wu: Tensor,
    pub bu: Tensor,
    pub wd: Tensor,
    pub bd: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactLayer {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: Option<CompactAttention>,
    pub attn_offset: Option<Tensor>,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ffn: Option<CompactFfn>,
    pub ffn_offset: Option<Tensor>,
}

impl CompactLayer {
    pub fn q_width(&self) -> usize {
        self.attn.as_ref().map_or(0, |a| a.wq.cols())
    }

    pub fn v_width(&self) -> usize {
        self.attn.as_ref().map_or(0, |a| a.wv.cols())
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn.as_ref().map_or(0, |f| f.wu.cols())
    }

    pub fn attn_removed(&self) -> bool {
        self.attn.is_none() && self.attn_offset.is_none()
    }

    pub fn ffn_removed(&self) -> bool {
        self.ffn.is_none() && self.ffn_offset.is_none()
    }
}

/// Graph-free encoder whose sublayers may be narrower than the original.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    /// Dimensions of the model this was derived from.
    pub config: EncoderConfig,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub layers: Vec<CompactLayer>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

fn pick(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect())
}

fn scale_cols(t: &mut Tensor, f: &[f64]) {
    let c = t.cols();
    if c == 0 {
        return;
    }
    for row in t.data_mut().chunks_mut(c) {
        for (v, k) in row.iter_mut().zip(f) {
            *v *= k;
        }
    }
}

fn scale_rows(t: &mut Tensor, f: &[f64]) {
    let c = t.cols();
    for (row, k) in t.data_mut().chunks_mut(c).zip(f) {
        for v in row {
            *v *= k;
        }
    }
}

fn check_sorted(idx: &[usize], n: usize, what: &str) -> Result<()> {
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&i| i >= n) {
        return Err(Error::Config(format!("{what}: indices must be sorted, unique and < {n}")));
    }
    Ok(())
}

impl CompactModel {
    /// The dense model in this representation (every head at full width).
    pub fn from_dense(model: &EncoderModel) -> Result<Self> {
        model.check_shapes()?;
        let cfg = model.config;
        let layers = model
            .layers
            .iter()
            .map(|w| CompactLayer {
                ln1_g: w.ln1_g.clone(),
                ln1_b: w.ln1_b.clone(),
                attn: Some(CompactAttention {
                    heads: (0..cfg.n_heads)
                        .map(|h| HeadSpec { index: h, q_dims: cfg.d_head, v_dims: cfg.d_head, scale: cfg.attn_scale() })
                        .collect(),
                    wq: w.wq.clone(),
                    bq: w.bq.clone(),
                    wk: w.wk.clone(),
                    bk: w.bk.clone(),
                    wv: w.wv.clone(),
                    bv: w.bv.clone(),
                    wo: w.wo.clone(),
                    bo: w.bo.clone(),
                }),
                attn_offset: None,
                ln2_g: w.ln2_g.clone(),
                ln2_b: w.ln2_b.clone(),
                ffn: Some(CompactFfn { wu: w.wu.clone(), bu: w.bu.clone(), wd: w.wd.clone(), bd: w.bd.clone() }),
                ffn_offset: None,
            })
            .collect();
        Ok(Self {
            config: cfg,
            w_in: model.w_in.clone(),
            b_in: model.b_in.clone(),
            layers,
            w_out: model.w_out.clone(),
            b_out: model.b_out.clone(),
        })
    }

    /// A plan that keeps every stored unit with unit fold factors.
    pub fn all_keep_plan(&self) -> CompactPlan {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerPlan {
                keep_mha: l.attn.is_some(),
                keep_ffn: l.ffn.is_some(),
                mha_bias_only: l.attn.is_none() && l.attn_offset.is_some(),
                ffn_bias_only: l.ffn.is_none() && l.ffn_offset.is_some(),
                mha_gate: 1.0,
                ffn_gate: 1.0,
                keep_qk: (0..l.q_width()).collect(),
                qk_gate: vec![1.0; l.q_width()],
                keep_vo: (0..l.v_width()).collect(),
                vo_gate: vec![1.0; l.v_width()],
                keep_int: (0..l.ffn_width()).collect(),
                int_gate: vec![1.0; l.ffn_width()],
            })
            .collect();
        CompactPlan { threshold: 0.0, layers, notes: Vec::new() }
    }

    /// Delete and fold according to `plan`, whose indices refer to this
    /// model's own (concatenated) unit layout.
    pub fn apply(&self, plan: &CompactPlan, rule: ScaleRule) -> Result<Self> {
        if plan.layers.len() != self.layers.len() {
            return Err(Error::Config(format!("plan has {} layers, model {}", plan.layers.len(), self.layers.len())));
        }
        let layers = self.layers.iter().zip(&plan.layers).enumerate().map(|(l, (src, p))| {
            let ctx = |e: Error| Error::Config(format!("layer {l}: {e}"));
            apply_layer(src, p, rule).map_err(ctx)
        });
        Ok(Self {
            config: self.config,
            w_in: self.w_in.clone(),
            b_in: self.b_in.clone(),
            layers: layers.collect::<Result<_>>()?,
            w_out: self.w_out.clone(),
            b_out: self.b_out.clone(),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_in".to_string(), &self.w_in), ("b_in".to_string(), &self.b_in)];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut parts: Vec<(&str, &Tensor)> = vec![("ln1_g", &layer.ln1_g), ("ln1_b", &layer.ln1_b)];
            if let Some(a) = &layer.attn {
                parts.extend([
                    ("attn.wq", &a.wq),
                    ("attn.bq", &a.bq),
                    ("attn.wk", &a.wk),
                    ("attn.bk", &a.bk),
                    ("attn.wv", &a.wv),
                    ("attn.bv", &a.bv),
                    ("attn.wo", &a.wo),
                    ("attn.bo", &a.bo),
                ]);
            }
            if let Some(o) = &layer.attn_offset {
                parts.push(("attn_offset", o));
            }
            parts.extend([("ln2_g", &layer.ln2_g), ("ln2_b", &layer.ln2_b)]);
            if let Some(f) = &layer.ffn {
                parts.extend([("ffn.wu", &f.wu), ("ffn.bu", &f.bu), ("ffn.wd", &f.wd), ("ffn.bd", &f.bd)]);
            }
            if let Some(o) = &layer.ffn_offset {
                parts.push(("ffn_offset", o));
            }
            out.extend(parts.into_iter().map(|(n, t)| (format!("layer{l}.{n}"), t)));
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    /// Stored weights and biases.
    pub fn count_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn removed_sublayers(&self) -> usize {
        self.layers.iter().map(|l| l.attn_removed() as usize + l.ffn_removed() as usize).sum()
    }

    /// Per-block outputs for `x` (`batch·seq × input_dim`).
    pub fn forward_hiddens(&self, x: &Tensor, batch: usize, seq: usize) -> Result<Vec<Tensor>> {
        let d = self.config.d_hidden;
        if x.shape() != [batch * seq, self.config.input_dim] || seq > self.config.max_seq_len {
            return Err(Error::Shape {
                op: "compact_forward",
                detail: format!("input {:?} for batch {batch} x seq {seq}", x.shape()),
            });
        }
        let mut h = gemm(x, false, &self.w_in, false);
        let pe = positional_encoding(seq, d);
        for (r, row) in h.data_mut().chunks_mut(d).enumerate() {
            let p = pe.row(r % seq);
            for j in 0..d {
                row[j] += self.b_in.data()[j] + p[j];
            }
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let Some(att) = &layer.attn {
                let a = layer_norm(&h, &layer.ln1_g, &layer.ln1_b);
                let o = attention(att, &a, batch, seq);
                h.add_assign(&o);
            }
            if let Some(off) = &layer.attn_offset {
                add_row(&mut h, off);
            }
            if let Some(f) = &layer.ffn {
                let a = layer_norm(&h, &layer.ln2_g, &layer.ln2_b);
                let mut u = gemm(&a, false, &f.wu, false);
                let k = u.cols();
                for row in u.data_mut().chunks_mut(k) {
                    for (v, b) in row.iter_mut().zip(f.bu.data()) {
                        *v = gelu(*v + b);
                    }
                }
                let mut o = gemm(&u, false, &f.wd, false);
                add_row(&mut o, &f.bd);
                h.add_assign(&o);
            }
            if let Some(off) = &layer.ffn_offset {
                add_row(&mut h, off);
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Encoder output only.
    pub fn forward(&self, x: &Tensor, batch: usize, seq: usize) -> Result<Tensor> {
        let mut hs = self.forward_hiddens(x, batch, seq)?;
        Ok(hs.pop().unwrap_or_else(|| x.clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("compact");
        ck.set_config(&self.config);
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.attn {
                let spec: Vec<f64> =
                    a.heads.iter().flat_map(|h| [h.index as f64, h.q_dims as f64, h.v_dims as f64, h.scale]).collect();
                ck.push(format!("layer{l}.attn.heads"), Tensor::matrix(a.heads.len(), 4, spec).expect("head table"));
            }
        }
        for (name, t) in self.named_tensors() {
            ck.push(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "compact" {
            return Err(Error::Checkpoint(format!("expected a compact checkpoint, got {}", ck.kind)));
        }
        let config = ck.config()?;
        let t = |n: &str| ck.tensor(n).cloned();
        let opt = |n: &str| if ck.has_tensor(n) { ck.tensor(n).cloned().map(Some) } else { Ok(None) };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            let attn = match opt(&p("attn.heads"))? {
                None => None,
                Some(spec) => {
                    let heads = spec
                        .data()
                        .chunks(4)
                        .map(|r| HeadSpec { index: r[0] as usize, q_dims: r[1] as usize, v_dims: r[2] as usize, scale: r[3] })
                        .collect();
                    Some(CompactAttention {
                        heads,
                        wq: t(&p("attn.wq"))?,
                        bq: t(&p("attn.bq"))?,
                        wk: t(&p("attn.wk"))?,
                        bk: t(&p("attn.bk"))?,
                        wv: t(&p("attn.wv"))?,
                        bv: t(&p("attn.bv"))?,
                        wo: t(&p("attn.wo"))?,
                        bo: t(&p("attn.bo"))?,
                    })
                }
            };
            let ffn = if ck.has_tensor(&p("ffn.wu")) {
                Some(CompactFfn { wu: t(&p("ffn.wu"))?, bu: t(&p("ffn.bu"))?, wd: t(&p("ffn.wd"))?, bd: t(&p("ffn.bd"))? })
            } else {
                None
            };
            layers.push(CompactLayer {
                ln1_g: t(&p("ln1_g"))?,
                ln1_b: t(&p("ln1_b"))?,
                attn,
                attn_offset: opt(&p("attn_offset"))?,
                ln2_g: t(&p("ln2_g"))?,
                ln2_b: t(&p("ln2_b"))?,
                ffn,
                ffn_offset: opt(&p("ffn_offset"))?,
            });
        }
        let m = Self { config, w_in: t("w_in")?, b_in: t("b_in")?, layers, w_out: t("w_out")?, b_out: t("b_out")? };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.config.d_hidden;
        let bad = |what: String| Error::Shape { op: "compact_model", detail: what };
        if self.layers.len() != self.config.n_layers {
            return Err(bad(format!("{} layers", self.layers.len())));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.attn {
                let q: usize = a.heads.iter().map(|h| h.q_dims).sum();
                let v: usize = a.heads.iter().map(|h| h.v_dims).sum();
                let ok = a.wq.shape() == [d, q]
                    && a.wk.shape() == [d, q]
                    && a.bq.len() == q
                    && a.bk.len() == q
                    && a.wv.shape() == [d, v]
                    && a.bv.len() == v
                    && a.wo.shape() == [v, d]
                    && a.bo.len() == d;
                if !ok {
                    return Err(bad(format!("layer {l}: attention shapes disagree with head table")));
                }
            }
            if let Some(f) = &layer.ffn {
                let k = f.wu.cols();
                if f.wu.rows() != d || f.bu.len() != k || f.wd.shape() != [k, d] || f.bd.len() != d {
                    return Err(bad(format!("layer {l}: ffn shapes")));
                }
            }
        }
        Ok(())
    }
}

fn add_row(h: &mut Tensor, b: &Tensor) {
    let c = h.cols();
    if c == 0 {
        return;
    }
    for row in h.data_mut().chunks_mut(c) {
        for (v, o) in row.iter_mut().zip(b.data()) {
            *v += o;
        }
    }
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..c {
            row[j] = (row[j] - mu) * r * g.data()[j] + b.data()[j];
        }
    }
    out
}

fn project(a: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut p = gemm(a, false, w, false);
    add_row(&mut p, b);
    p
}

fn attention(att: &CompactAttention, a: &Tensor, batch: usize, seq: usize) -> Tensor {
    let (qw, vw) = (att.wq.cols(), att.wv.cols());
    let n = a.rows();
    let (q, k) = if qw > 0 {
        (project(a, &att.wq, &att.bq), project(a, &att.wk, &att.bk))
    } else {
        (Tensor::zeros(&[n, 0]), Tensor::zeros(&[n, 0]))
    };
    let v = project(a, &att.wv, &att.bv);
    let mut ctx = vec![0.0; n * vw];
    let mut scores = vec![0.0; seq * seq];
    for b in 0..batch {
        let (mut qo, mut vo) = (0, 0);
        for head in &att.heads {
            for i in 0..seq {
                let qi = &q.data()[(b * seq + i) * qw + qo..][..head.q_dims];
                let row = &mut scores[i * seq..(i + 1) * seq];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.data()[(b * seq + j) * qw + qo..][..head.q_dims];
                    *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * head.scale;
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let out = &mut ctx[(b * seq + i) * vw + vo..][..head.v_dims];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v.data()[(b * seq + j) * vw + vo..][..head.v_dims];
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
            qo += head.q_dims;
            vo += head.v_dims;
        }
    }
    let ctx = Tensor::matrix(n, vw, ctx).expect("context shape");
    project(&ctx, &att.wo, &att.bo)
}

fn apply_layer(src: &CompactLayer, p: &LayerPlan, rule: ScaleRule) -> Result<CompactLayer> {
    let gates_ok = p.qk_gate.len() == p.keep_qk.len()
        && p.vo_gate.len() == p.keep_vo.len()
        && p.int_gate.len() == p.keep_int.len();
    if !gates_ok {
        return Err(Error::Config("fold factor count differs from kept index count".into()));
    }
    if (!p.keep_mha && (!p.keep_qk.is_empty() || !p.keep_vo.is_empty())) || (!p.keep_ffn && !p.keep_int.is_empty()) {
        return Err(Error::Config("indices kept inside a removed sublayer".into()));
    }
    check_sorted(&p.keep_qk, src.q_width(), "keep_qk")?;
    check_sorted(&p.keep_vo, src.v_width(), "keep_vo")?;
    check_sorted(&p.keep_int, src.ffn_width(), "keep_int")?;

    let mut attn = None;
    let mut attn_offset = None;
    let src_attn_bias = src.attn.as_ref().map(|a| &a.bo).or(src.attn_offset.as_ref());
    if p.keep_mha {
        let a = src.attn.as_ref().ok_or_else(|| Error::Config("attention kept but absent".into()))?;
        attn = build_attention(a, p, rule)?;
        if attn.is_none() {
            attn_offset = src_attn_bias.map(|b| b.map(|v| v * p.mha_gate));
        }
    } else if p.mha_bias_only {
        attn_offset = src_attn_bias.map(|b| b.map(|v| v * p.mha_gate));
    }

    let mut ffn = None;
    let mut ffn_offset = None;
    let src_ffn_bias = src.ffn.as_ref().map(|f| &f.bd).or(src.ffn_offset.as_ref());
    if p.keep_ffn {
        let f = src.ffn.as_ref().ok_or_else(|| Error::Config("ffn kept but absent".into()))?;
        let mut wd = f.wd.select_rows(&p.keep_int);
        let fold: Vec<f64> = p.int_gate.iter().map(|z| z * p.ffn_gate).collect();
        scale_rows(&mut wd, &fold);
        ffn = Some(CompactFfn {
            wu: f.wu.select_cols(&p.keep_int),
            bu: pick(&f.bu, &p.keep_int),
            wd,
            bd: f.bd.map(|v| v * p.ffn_gate),
        });
    } else if p.ffn_bias_only {
        ffn_offset = src_ffn_bias.map(|b| b.map(|v| v * p.ffn_gate));
    }

    Ok(CompactLayer {
        ln1_g: src.ln1_g.clone(),
        ln1_b: src.ln1_b.clone(),
        attn,
        attn_offset,
        ln2_g: src.ln2_g.clone(),
        ln2_b: src.ln2_b.clone(),
        ffn,
        ffn_offset,
    })
}

fn build_attention(a: &CompactAttention, p: &LayerPlan, rule: ScaleRule) -> Result<Option<CompactAttention>> {
    let (mut q_cols, mut q_fold, mut v_cols, mut v_fold) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut heads = Vec::new();
    let (mut qo, mut vo) = (0, 0);
    let (mut qi, mut vi) = (0, 0);
    for h in &a.heads {
        let q_start = q_cols.len();
        while qi < p.keep_qk.len() && p.keep_qk[qi] < qo + h.q_dims {
            q_cols.push(p.keep_qk[qi]);
            q_fold.push(p.qk_gate[qi]);
            qi += 1;
        }
        let v_start = v_cols.len();
        while vi < p.keep_vo.len() && p.keep_vo[vi] < vo + h.v_dims {
            v_cols.push(p.keep_vo[vi]);
            v_fold.push(p.vo_gate[vi] * p.mha_gate);
            vi += 1;
        }
        let (nq, nv) = (q_cols.len() - q_start, v_cols.len() - v_start);
        if nv == 0 {
            // Head output is identically zero.
            q_cols.truncate(q_start);
            q_fold.truncate(q_start);
        } else {
            let scale = match rule {
                ScaleRule::Keep => h.scale,
                ScaleRule::Retained if nq > 0 => 1.0 / (nq as f64).sqrt(),
                ScaleRule::Retained => h.scale,
            };
            heads.push(HeadSpec { index: h.index, q_dims: nq, v_dims: nv, scale });
        }
        qo += h.q_dims;
        vo += h.v_dims;
    }
    if heads.is_empty() {
        return Ok(None);
    }
    let mut wq = a.wq.select_cols(&q_cols);
    let mut bq = pick(&a.bq, &q_cols);
    scale_cols(&mut wq, &q_fold);
    scale_cols(&mut bq, &q_fold);
    let mut wv = a.wv.select_cols(&v_cols);
    let mut bv = pick(&a.bv, &v_cols);
    scale_cols(&mut wv, &v_fold);
    scale_cols(&mut bv, &v_fold);
    Ok(Some(CompactAttention {
        heads,
        wq,
        bq,
        wk: a.wk.select_cols(&q_cols),
        bk: pick(&a.bk, &q_cols),
        wv,
        bv,
        wo: a.wo.select_rows(&v_cols),
        bo: a.bo.map(|v| v * p.mha_gate),
    }))
}

/// Delete and fold a dense model according to a plan derived from it.
pub fn compact(model: &EncoderModel, plan: &CompactPlan, rule: ScaleRule) -> Result<CompactModel> {
    CompactModel::from_dense(model)?.apply(plan, rule)
}

/// Binary keep-matrix of `W_V` (`d_hidden × n_heads·d_head`) for one layer.
pub fn wv_keep_grid(cfg: &EncoderConfig, plan: &CompactPlan, layer: usize) -> Vec<Vec<u8>> {
    let mut cols = vec![0u8; cfg.attn_width()];
    let p = &plan.layers[layer];
    if p.keep_mha {
        for &j in &p.keep_vo {
            cols[j] = 1;
        }
    }
    vec![cols; cfg.d_hidden]
}

pub fn grid_csv(grid: &[Vec<u8>]) -> String {
    let mut s = String::new();
    for row in grid {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Kept prunable weights of one layer under a dense-layout plan.
pub fn layer_kept_params(cfg: &EncoderConfig, p: &LayerPlan) -> usize {
    use crate::gates::Granularity::*;
    let d = cfg.d_hidden;
    let mut n = p.keep_qk.len() * cfg.params_controlled(QkDim)
        + p.keep_vo.len() * cfg.params_controlled(VoDim)
        + p.keep_int.len() * cfg.params_controlled(FfnInt);
    if p.keep_mha || p.mha_bias_only {
        n += d;
    }
    if p.keep_ffn || p.ffn_bias_only {
        n += d;
    }
    n
}

/// Fraction of each layer's prunable weights that survive.
pub fn remaining_fractions(cfg: &EncoderConfig, plan: &CompactPlan) -> Vec<f64> {
    let per = cfg.prunable_per_layer() as f64;
    plan.layers.iter().map(|p| layer_kept_params(cfg, p) as f64 / per).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub params: usize,
    pub seconds_per_batch: f64,
    pub speedup: f64,
    pub repeats: usize,
    pub batch: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch: usize,
    pub seq: usize,
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median wall-clock seconds per forward over `repeats` timed runs
/// (after `warmup` untimed runs).
pub fn time_forward(model: &CompactModel, x: &Tensor, spec: BatchSpec, repeats: usize, warmup: usize) -> Result<f64> {
    if repeats < 5 {
        return Err(Error::Bench(format!("need at least 5 repeats, got {repeats}")));
    }
    for _ in 0..warmup {
        std::hint::black_box(model.forward(x, spec.batch, spec.seq)?);
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.forward(x, spec.batch, spec.seq)?);
        times.push(t.elapsed());
    }
    times.sort();
    let median = times[repeats / 2];
    let res = timer_resolution();
    if median < res * 1000 {
        return Err(Error::Bench(format!(
            "forward takes {median:?}, too close to timer resolution {res:?}; use a larger batch"
        )));
    }
    Ok(median.as_secs_f64())
}

/// Time `model` and report its speedup over `dense_seconds`.
pub fn bench_inference(
    label: &str,
    model: &CompactModel,
    x: &Tensor,
    spec: BatchSpec,
    repeats: usize,
    dense_seconds: Option<f64>,
) -> Result<BenchReport> {
    let s = time_forward(model, x, spec, repeats, 2)?;
    Ok(BenchReport {
        label: label.to_string(),
        params: model.count_params(),
        seconds_per_batch: s,
        speedup: dense_seconds.map_or(1.0, |d| d / s),
        repeats,
        batch: spec.batch,
        seq: spec.seq,
    })
}

#[cfg(test)]
mod tests;
