use proptest::prelude::*;

use super::*;
use crate::autograd::Graph;
use crate::rng::{streams, Rng};

fn small() -> EncoderConfig {
    EncoderConfig { n_layers: 2, d_hidden: 8, n_heads: 2, d_head: 4, d_ffn: 12, max_seq_len: 6, input_dim: 3 }
}

fn input(cfg: &EncoderConfig, batch: usize, seq: usize, seed: u64) -> Tensor {
    let mut rng = Rng::stream(seed, streams::DATA);
    Tensor::from_fn(batch * seq, cfg.input_dim, |_, _| rng.normal(0.0, 1.0))
}

fn run(model: &EncoderModel, x: &Tensor, batch: usize, seq: usize, masks: Option<&MaskSet>) -> Tensor {
    let mut g = Graph::new();
    let mv = register(&mut g, model, false);
    let xv = g.constant(x.clone());
    let gm = masks.map(|m| m.to_graph(&mut g));
    let hs = encoder_forward(&mut g, &model.config, &mv, xv, batch, seq, gm.as_ref()).unwrap();
    g.value(*hs.last().unwrap()).clone()
}

fn model(cfg: EncoderConfig, seed: u64) -> EncoderModel {
    EncoderModel::init(cfg, &mut Rng::stream(seed, streams::INIT)).unwrap()
}

#[test]
fn all_ones_masks_match_unmasked_forward() {
    let cfg = small();
    let m = model(cfg, 1);
    let x = input(&cfg, 2, 5, 9);
    let a = run(&m, &x, 2, 5, None);
    let b = run(&m, &x, 2, 5, Some(&MaskSet::all_ones(&cfg)));
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn zero_intermediate_gate_equals_deleted_neuron() {
    let cfg = small();
    let m = model(cfg, 2);
    let x = input(&cfg, 2, 4, 3);
    let drop = 5;
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[1].int[drop] = 0.0;
    let masked = run(&m, &x, 2, 4, Some(&masks));

    // Deleting the neuron: its W_U column, b_U entry and W_D row are gone.
    let mut cut = m.clone();
    let l = &mut cut.layers[1];
    let d = cfg.d_hidden;
    l.wu = Tensor::from_fn(d, cfg.d_ffn, |r, c| if c == drop { 0.0 } else { m.layers[1].wu.at(r, c) });
    l.bu.data_mut()[drop] = 0.0;
    l.wd = Tensor::from_fn(cfg.d_ffn, d, |r, c| if r == drop { 0.0 } else { m.layers[1].wd.at(r, c) });
    let deleted = run(&cut, &x, 2, 4, None);
    assert!(masked.max_abs_diff(&deleted) <= 1e-9);
}

#[test]
fn zero_value_gates_on_a_head_equal_dropping_the_head() {
    let cfg = small();
    let m = model(cfg, 4);
    let x = input(&cfg, 1, 6, 5);
    let mut masks = MaskSet::all_ones(&cfg);
    for j in 0..cfg.d_head {
        masks.layers[0].vo[j] = 0.0;
    }
    let masked = run(&m, &x, 1, 6, Some(&masks));

    // Graph-level forward of layer 0 with head 0 removed, built by hand.
    let dh = cfg.d_head;
    let mut g = Graph::new();
    let mv = register(&mut g, &m, false);
    let xv = g.constant(x.clone());
    let pe = g.constant(tiled_positional_encoding(1, 6, cfg.d_hidden));
    let h = g.matmul(xv, mv.w_in).unwrap();
    let h = g.add_row(h, mv.b_in).unwrap();
    let mut h = g.add(h, pe).unwrap();
    for (l, lv) in mv.layers.iter().enumerate() {
        let a = g.layer_norm(h, lv.ln1_g, lv.ln1_b, LN_EPS).unwrap();
        let heads: Vec<usize> = if l == 0 { vec![1] } else { (0..cfg.n_heads).collect() };
        let mut outs = Vec::new();
        let mut rows = Vec::new();
        for &hd in &heads {
            let w = &m.layers[l];
            let cols: Vec<usize> = (hd * dh..(hd + 1) * dh).collect();
            let c = |g: &mut Graph, t: &Tensor| g.constant(t.select_cols(&cols));
            let cv = |g: &mut Graph, t: &Tensor| g.constant(Tensor::vector(cols.iter().map(|&j| t.data()[j]).collect()));
            let wq = c(&mut g, &w.wq);
            let bq = cv(&mut g, &w.bq);
            let wk = c(&mut g, &w.wk);
            let bk = cv(&mut g, &w.bk);
            let wv = c(&mut g, &w.wv);
            let bv = cv(&mut g, &w.bv);
            outs.push(masked_attention_head(&mut g, a, (wq, bq), (wk, bk), (wv, bv), None, None, cfg.attn_scale()).unwrap());
            rows.extend(cols);
        }
        let ctx = g.concat_cols(&outs).unwrap();
        let wo = g.constant(m.layers[l].wo.select_rows(&rows));
        let o = g.matmul(ctx, wo).unwrap();
        let o = g.add_row(o, lv.bo).unwrap();
        h = g.add(h, o).unwrap();
        let a = g.layer_norm(h, lv.ln2_g, lv.ln2_b, LN_EPS).unwrap();
        let f = masked_ffn(&mut g, a, lv, None).unwrap();
        h = g.add(h, f).unwrap();
    }
    assert!(masked.max_abs_diff(g.value(h)) <= 1e-9);
}

#[test]
fn zero_layer_gates_remove_both_sublayers() {
    let cfg = small();
    let m = model(cfg, 6);
    let x = input(&cfg, 2, 3, 7);
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[0].mha = 0.0;
    masks.layers[1].ffn = 0.0;
    let masked = run(&m, &x, 2, 3, Some(&masks));
    let mut cut = m.clone();
    cut.layers[0].wo = Tensor::zeros(cut.layers[0].wo.shape());
    cut.layers[0].bo = Tensor::zeros(cut.layers[0].bo.shape());
    cut.layers[1].wd = Tensor::zeros(cut.layers[1].wd.shape());
    cut.layers[1].bd = Tensor::zeros(cut.layers[1].bd.shape());
    assert!(masked.max_abs_diff(&run(&cut, &x, 2, 3, None)) <= 1e-9);
}

#[test]
fn zero_query_gates_make_attention_uniform() {
    let cfg = EncoderConfig { n_layers: 1, ..small() };
    let m = model(cfg, 8);
    let x = input(&cfg, 1, 4, 8);
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[0].qk = vec![0.0; cfg.attn_width()];
    masks.layers[0].ffn = 0.0;
    let out = run(&m, &x, 1, 4, Some(&masks));
    // With zero queries every position sees the mean of V, so the
    // attention output is identical across positions.
    let mut g = Graph::new();
    let mv = register(&mut g, &m, false);
    let xv = g.constant(x.clone());
    let pe = g.constant(tiled_positional_encoding(1, 4, cfg.d_hidden));
    let h = g.matmul(xv, mv.w_in).unwrap();
    let h = g.add_row(h, mv.b_in).unwrap();
    let h0 = g.add(h, pe).unwrap();
    let delta = out.zip_map(g.value(h0), |a, b| a - b);
    for r in 1..4 {
        for c in 0..cfg.d_hidden {
            assert!((delta.at(r, c) - delta.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn mask_length_errors() {
    let cfg = small();
    let m = model(cfg, 1);
    let mut g = Graph::new();
    let mv = register(&mut g, &m, false);
    let xv = g.constant(input(&cfg, 1, 2, 1));
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[0].int.pop();
    let gm = masks.to_graph(&mut g);
    assert!(matches!(
        encoder_forward(&mut g, &cfg, &mv, xv, 1, 2, Some(&gm)),
        Err(Error::Shape { op: "encoder_forward", .. })
    ));
    assert!(masks.validate(&cfg).is_err());
    let x = g.constant(Tensor::zeros(&[2, 8]));
    let wq = g.constant(Tensor::zeros(&[8, 4]));
    let b = g.constant(Tensor::zeros(&[4]));
    let z = g.constant(Tensor::vector(vec![1.0; 3]));
    assert!(masked_attention_head(&mut g, x, (wq, b), (wq, b), (wq, b), Some(z), None, 0.5).is_err());
}

#[test]
fn per_granularity_param_ownership() {
    let cfg = EncoderConfig { d_hidden: 64, ..EncoderConfig::default() };
    assert_eq!(cfg.params_controlled(Granularity::QkDim), 130);
    assert_eq!(cfg.params_controlled(Granularity::VoDim), 129);
    assert_eq!(cfg.params_controlled(Granularity::FfnInt), 129);
}

#[test]
fn prunable_count_matches_enumeration() {
    for cfg in [small(), EncoderConfig::default()] {
        let m = model(cfg, 3);
        let mut total = 0;
        for l in &m.layers {
            for (t, name) in l.tensors().into_iter().zip(LAYER_TENSORS) {
                if !name.starts_with("ln") {
                    total += t.len();
                }
            }
        }
        assert_eq!(total, cfg.prunable_params());
        assert_eq!(total + cfg.unprunable_params(), m.param_count());
    }
}

#[test]
fn base_scale_shapes() {
    let cfg = EncoderConfig::base_scale();
    assert_eq!(cfg.d_hidden, 768);
    assert_eq!(cfg.d_ffn, 3072);
    assert_eq!(cfg.attn_width(), 768);
    assert_eq!(cfg.gate_len(Granularity::FfnInt), 3072);
    let per = 768 * 1538 + 768 * 1537 + 768 + 3072 * 1537 + 768;
    assert_eq!(cfg.prunable_per_layer(), per);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = model(small(), 11);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.to_checkpoint().save(&p).unwrap();
    let back = EncoderModel::from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.checksum(), m.checksum());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = model(small(), 12);
    let bytes = m.to_checkpoint().to_bytes();
    assert!(Checkpoint::from_reader(&b"garbage\n"[..]).is_err());
    assert!(Checkpoint::from_reader(&bytes[..bytes.len() - 8]).is_err());
    let mut ck = m.to_checkpoint();
    ck.set_meta("d_ffn", 13);
    assert!(EncoderModel::from_checkpoint(&ck).is_err());
}

#[test]
fn init_is_seeded() {
    assert_eq!(model(small(), 5).checksum(), model(small(), 5).checksum());
    assert_ne!(model(small(), 5).checksum(), model(small(), 6).checksum());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Reordering heads (with their W_O rows) leaves the output unchanged.
    #[test]
    fn head_permutation_invariance(seed in 0u64..1000, swap in 0usize..2) {
        let cfg = EncoderConfig { n_heads: 3, ..small() };
        let m = model(cfg, seed);
        let x = input(&cfg, 1, 5, seed + 1);
        let perm: Vec<usize> = if swap == 0 { vec![2, 0, 1] } else { vec![1, 0, 2] };
        let dh = cfg.d_head;
        let cols: Vec<usize> = perm.iter().flat_map(|&h| h * dh..(h + 1) * dh).collect();
        let mut p = m.clone();
        for l in &mut p.layers {
            let pick = |t: &Tensor| Tensor::vector(cols.iter().map(|&j| t.data()[j]).collect());
            l.wq = l.wq.select_cols(&cols);
            l.wk = l.wk.select_cols(&cols);
            l.wv = l.wv.select_cols(&cols);
            l.bq = pick(&l.bq);
            l.bk = pick(&l.bk);
            l.bv = pick(&l.bv);
            l.wo = l.wo.select_rows(&cols);
        }
        let a = run(&m, &x, 1, 5, None);
        let b = run(&p, &x, 1, 5, None);
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    /// Masked forward is linear in z_mha when nothing else changes downstream.
    #[test]
    fn mha_gate_scales_sublayer_output(z in 0.0f64..1.0) {
        let cfg = EncoderConfig { n_layers: 1, ..small() };
        let m = model(cfg, 21);
        let x = input(&cfg, 1, 3, 22);
        let at = |v: f64| {
            let mut masks = MaskSet::all_ones(&cfg);
            masks.layers[0].mha = v;
            masks.layers[0].ffn = 0.0;
            run(&m, &x, 1, 3, Some(&masks))
        };
        let (h0, h1, hz) = (at(0.0), at(1.0), at(z));
        let lin = h0.zip_map(&h1, |a, b| a + z * (b - a));
        prop_assert!(hz.max_abs_diff(&lin) <= 1e-12);
    }
}
