//! Graph-building forward pass (dense, sampled-gate, or fixed-gate).

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::masks::{GraphMasks, LayerMaskVars};
use super::{tiled_positional_encoding, EncoderConfig, EncoderModel, LN_EPS};

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub wu: Var,
    pub bu: Var,
    pub wd: Var,
    pub bd: Var,
}

/// Graph handles for every model tensor, in [`EncoderModel::named_tensors`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub w_in: Var,
    pub b_in: Var,
    pub layers: Vec<LayerVars>,
    pub w_out: Var,
    pub b_out: Var,
    pub all: Vec<Var>,
}

/// Put the model's tensors into `g` as trainable leaves (or constants).
pub fn register(g: &mut Graph, model: &EncoderModel, trainable: bool) -> ModelVars {
    let mut all = Vec::new();
    let mut leaf = |g: &mut Graph, t: &Tensor| {
        let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        all.push(v);
        v
    };
    let w_in = leaf(g, &model.w_in);
    let b_in = leaf(g, &model.b_in);
    let mut layers = Vec::with_capacity(model.layers.len());
    for w in &model.layers {
        layers.push(LayerVars {
            ln1_g: leaf(g, &w.ln1_g),
            ln1_b: leaf(g, &w.ln1_b),
            wq: leaf(g, &w.wq),
            bq: leaf(g, &w.bq),
            wk: leaf(g, &w.wk),
            bk: leaf(g, &w.bk),
            wv: leaf(g, &w.wv),
            bv: leaf(g, &w.bv),
            wo: leaf(g, &w.wo),
            bo: leaf(g, &w.bo),
            ln2_g: leaf(g, &w.ln2_g),
            ln2_b: leaf(g, &w.ln2_b),
            wu: leaf(g, &w.wu),
            bu: leaf(g, &w.bu),
            wd: leaf(g, &w.wd),
            bd: leaf(g, &w.bd),
        });
    }
    let w_out = leaf(g, &model.w_out);
    let b_out = leaf(g, &model.b_out);
    ModelVars { w_in, b_in, layers, w_out, b_out, all }
}

/// `softmax(scale · q kᵀ) v` for one head of one sequence.
pub fn attention_head(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, scale);
    let p = g.softmax(s);
    g.matmul(p, v)
}

/// One gated head computed from its own projection matrices.
///
/// `x` is `seq × d_hidden`; the head weights are `d_hidden × d_head` with
/// bias vectors of length `d_head`; masks, when given, have length `d_head`.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention_head(
    g: &mut Graph,
    x: Var,
    (wq, bq): (Var, Var),
    (wk, bk): (Var, Var),
    (wv, bv): (Var, Var),
    z_qk: Option<Var>,
    z_vo: Option<Var>,
    scale: f64,
) -> Result<Var> {
    let dh = g.value(wq).cols();
    for z in [z_qk, z_vo].into_iter().flatten() {
        if g.value(z).len() != dh {
            return Err(Error::Shape {
                op: "masked_attention_head",
                detail: format!("mask length {} for head width {dh}", g.value(z).len()),
            });
        }
    }
    let q = g.matmul(x, wq)?;
    let mut q = g.add_row(q, bq)?;
    if let Some(z) = z_qk {
        q = g.diag_scale(q, z)?;
    }
    let k = g.matmul(x, wk)?;
    let k = g.add_row(k, bk)?;
    let v = g.matmul(x, wv)?;
    let mut v = g.add_row(v, bv)?;
    if let Some(z) = z_vo {
        v = g.diag_scale(v, z)?;
    }
    attention_head(g, q, k, v, scale)
}

/// Gated multi-head attention sublayer on normalized input `a` (`batch·seq × d`).
///
/// Returns `z_mha · (concat_heads · W_O + b_O)`; the residual is added by the caller.
pub fn masked_mha(
    g: &mut Graph,
    cfg: &EncoderConfig,
    a: Var,
    lv: &LayerVars,
    mask: Option<&LayerMaskVars>,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let dh = cfg.d_head;
    let q = g.matmul(a, lv.wq)?;
    let mut q = g.add_row(q, lv.bq)?;
    let k = g.matmul(a, lv.wk)?;
    let k = g.add_row(k, lv.bk)?;
    let v = g.matmul(a, lv.wv)?;
    let mut v = g.add_row(v, lv.bv)?;
    if let Some(m) = mask {
        q = g.diag_scale(q, m.qk)?;
        v = g.diag_scale(v, m.vo)?;
    }
    let scale = cfg.attn_scale();
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let (r0, r1) = (b * seq, (b + 1) * seq);
        let qb = g.slice_rows(q, r0, r1)?;
        let kb = g.slice_rows(k, r0, r1)?;
        let vb = g.slice_rows(v, r0, r1)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(qb, c0, c1)?;
            let kh = g.slice_cols(kb, c0, c1)?;
            let vh = g.slice_cols(vb, c0, c1)?;
            heads.push(attention_head(g, qh, kh, vh, scale)?);
        }
        rows.push(g.concat_cols(&heads)?);
    }
    let ctx = g.concat_rows(&rows)?;
    let o = g.matmul(ctx, lv.wo)?;
    let mut o = g.add_row(o, lv.bo)?;
    if let Some(m) = mask {
        o = g.scale_by(o, m.mha)?;
    }
    Ok(o)
}

/// Gated feed-forward sublayer: `z_ffn · (gelu(a W_U + b_U) diag(z_int) W_D + b_D)`.
pub fn masked_ffn(g: &mut Graph, a: Var, lv: &LayerVars, mask: Option<&LayerMaskVars>) -> Result<Var> {
    let u = g.matmul(a, lv.wu)?;
    let u = g.add_row(u, lv.bu)?;
    let mut u = g.gelu(u);
    if let Some(m) = mask {
        u = g.diag_scale(u, m.int)?;
    }
    let f = g.matmul(u, lv.wd)?;
    let mut f = g.add_row(f, lv.bd)?;
    if let Some(m) = mask {
        f = g.scale_by(f, m.ffn)?;
    }
    Ok(f)
}

fn check_masks(g: &Graph, cfg: &EncoderConfig, masks: &GraphMasks) -> Result<()> {
    if masks.layers.len() != cfg.n_layers {
        return Err(Error::Shape {
            op: "encoder_forward",
            detail: format!("{} mask layers for {} blocks", masks.layers.len(), cfg.n_layers),
        });
    }
    for m in &masks.layers {
        let lens = [
            (g.value(m.mha).len(), 1),
            (g.value(m.ffn).len(), 1),
            (g.value(m.qk).len(), cfg.attn_width()),
            (g.value(m.vo).len(), cfg.attn_width()),
            (g.value(m.int).len(), cfg.d_ffn),
        ];
        if lens.iter().any(|(a, b)| a != b) {
            return Err(Error::Shape { op: "encoder_forward", detail: format!("mask lengths {lens:?}") });
        }
    }
    Ok(())
}

/// Embed `x` (`batch·seq × input_dim`) and run every block.
///
/// Returns the output of each block in order; the last entry is the
/// encoder output.
pub fn encoder_forward(
    g: &mut Graph,
    cfg: &EncoderConfig,
    mv: &ModelVars,
    x: Var,
    batch: usize,
    seq: usize,
    masks: Option<&GraphMasks>,
) -> Result<Vec<Var>> {
    if let Some(m) = masks {
        check_masks(g, cfg, m)?;
    }
    if g.value(x).rows() != batch * seq || seq > cfg.max_seq_len {
        return Err(Error::Shape {
            op: "encoder_forward",
            detail: format!("input {:?} for batch {batch} x seq {seq}", g.value(x).shape()),
        });
    }
    let pe = g.constant(tiled_positional_encoding(batch, seq, cfg.d_hidden));
    let h = g.matmul(x, mv.w_in)?;
    let h = g.add_row(h, mv.b_in)?;
    let mut h = g.add(h, pe)?;
    let mut hiddens = Vec::with_capacity(cfg.n_layers);
    for (l, lv) in mv.layers.iter().enumerate() {
        let mask = masks.map(|m| &m.layers[l]);
        let a = g.layer_norm(h, lv.ln1_g, lv.ln1_b, LN_EPS)?;
        let att = masked_mha(g, cfg, a, lv, mask, batch, seq)?;
        h = g.add(h, att)?;
        let a = g.layer_norm(h, lv.ln2_g, lv.ln2_b, LN_EPS)?;
        let f = masked_ffn(g, a, lv, mask)?;
        h = g.add(h, f)?;
        hiddens.push(h);
    }
    Ok(hiddens)
}
