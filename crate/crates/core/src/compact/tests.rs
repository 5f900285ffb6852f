use proptest::prelude::*;

use super::*;
use crate::autograd::Graph;
use crate::model::{encoder_forward, register, LayerMask};
use crate::rng::{streams, Rng};

fn small() -> EncoderConfig {
    EncoderConfig { n_layers: 3, d_hidden: 8, n_heads: 3, d_head: 4, d_ffn: 10, max_seq_len: 6, input_dim: 3 }
}

fn model(cfg: EncoderConfig, seed: u64) -> EncoderModel {
    EncoderModel::init(cfg, &mut Rng::stream(seed, streams::INIT)).unwrap()
}

fn input(cfg: &EncoderConfig, batch: usize, seq: usize, seed: u64) -> Tensor {
    let mut rng = Rng::stream(seed, streams::DATA);
    Tensor::from_fn(batch * seq, cfg.input_dim, |_, _| rng.normal(0.0, 1.0))
}

/// The gated dense forward, which compaction must reproduce.
fn gated(model: &EncoderModel, masks: &MaskSet, x: &Tensor, batch: usize, seq: usize) -> Tensor {
    let mut g = Graph::new();
    let mv = register(&mut g, model, false);
    let xv = g.constant(x.clone());
    let gm = masks.to_graph(&mut g);
    let hs = encoder_forward(&mut g, &model.config, &mv, xv, batch, seq, Some(&gm)).unwrap();
    g.value(*hs.last().unwrap()).clone()
}

/// Random gate values; `binary` restricts them to {0, 1}. Zeros are common
/// so that whole heads and sublayers disappear.
fn random_masks(cfg: &EncoderConfig, rng: &mut Rng, binary: bool) -> MaskSet {
    let mut draw = |p_zero: f64| {
        if rng.uniform() < p_zero {
            0.0
        } else if binary {
            1.0
        } else if rng.uniform() < 0.3 {
            1.0
        } else {
            rng.uniform()
        }
    };
    let layers = (0..cfg.n_layers)
        .map(|_| LayerMask {
            mha: draw(0.25),
            ffn: draw(0.25),
            qk: (0..cfg.attn_width()).map(|_| draw(0.4)).collect(),
            vo: (0..cfg.attn_width()).map(|_| draw(0.5)).collect(),
            int: (0..cfg.d_ffn).map(|_| draw(0.5)).collect(),
        })
        .collect();
    MaskSet { layers }
}

#[test]
fn identity_plan_keeps_everything() {
    let cfg = small();
    let m = model(cfg, 1);
    let masks = MaskSet::all_ones(&cfg);
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    for p in &plan.layers {
        assert!(p.keep_mha && p.keep_ffn);
        assert_eq!(p.keep_qk.len(), cfg.attn_width());
        assert_eq!(p.keep_int.len(), cfg.d_ffn);
        assert!(p.qk_gate.iter().chain(&p.vo_gate).chain(&p.int_gate).all(|&z| z == 1.0));
    }
    let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
    assert_eq!(c.count_params(), m.param_count());
    let x = input(&cfg, 2, 5, 2);
    assert!(c.forward(&x, 2, 5).unwrap().max_abs_diff(&gated(&m, &masks, &x, 2, 5)) <= 1e-9);
}

#[test]
fn closed_ffn_gate_removes_sublayer_regardless_of_neurons() {
    let cfg = small();
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[2].ffn = 0.0;
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    let p = &plan.layers[2];
    assert!(!p.keep_ffn && !p.ffn_bias_only && p.keep_int.is_empty());
    let m = model(cfg, 2);
    let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
    let d = cfg.d_hidden;
    assert_eq!(c.count_params(), m.param_count() - (cfg.d_ffn * (2 * d + 1) + d));
    assert!(c.layers[2].ffn_removed());
    assert_eq!(c.removed_sublayers(), 1);
}

#[test]
fn binary_gates_match_masked_dense() {
    let cfg = small();
    let mut rng = Rng::new(11);
    for trial in 0..25 {
        let m = model(cfg, trial);
        let masks = random_masks(&cfg, &mut rng, true);
        let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
        let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
        let x = input(&cfg, 2, 6, trial);
        let diff = c.forward(&x, 2, 6).unwrap().max_abs_diff(&gated(&m, &masks, &x, 2, 6));
        assert!(diff <= 1e-9, "trial {trial}: {diff}");
    }
}

#[test]
fn fractional_gates_fold_into_weights() {
    let cfg = small();
    let mut rng = Rng::new(12);
    for trial in 0..25 {
        let m = model(cfg, 100 + trial);
        let masks = random_masks(&cfg, &mut rng, false);
        let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
        let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
        let x = input(&cfg, 3, 4, trial);
        let diff = c.forward(&x, 3, 4).unwrap().max_abs_diff(&gated(&m, &masks, &x, 3, 4));
        assert!(diff <= 1e-9, "trial {trial}: {diff}");
    }
}

#[test]
fn open_gate_with_no_units_keeps_bias_offset() {
    let cfg = small();
    let m = model(cfg, 3);
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[0].mha = 0.6;
    masks.layers[0].vo = vec![0.0; cfg.attn_width()];
    masks.layers[1].ffn = 0.4;
    masks.layers[1].int = vec![0.0; cfg.d_ffn];
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    assert!(plan.layers[0].mha_bias_only && !plan.layers[0].keep_mha && plan.layers[0].keep_qk.is_empty());
    assert!(plan.layers[1].ffn_bias_only && !plan.layers[1].keep_ffn);
    assert_eq!(plan.notes.len(), 5);
    let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
    assert!(c.layers[0].attn.is_none() && c.layers[0].attn_offset.is_some());
    let x = input(&cfg, 1, 4, 3);
    assert!(c.forward(&x, 1, 4).unwrap().max_abs_diff(&gated(&m, &masks, &x, 1, 4)) <= 1e-9);
}

#[test]
fn everything_pruned_is_residual_path() {
    let cfg = small();
    let m = model(cfg, 4);
    let masks = MaskSet::filled(&cfg, 0.0);
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
    assert_eq!(c.count_params(), cfg.unprunable_params());
    assert_eq!(c.removed_sublayers(), 2 * cfg.n_layers);
    let x = input(&cfg, 2, 3, 4);
    let embedded = x.matmul(&m.w_in).unwrap();
    let pe = crate::model::tiled_positional_encoding(2, 3, cfg.d_hidden);
    let want = Tensor::from_fn(6, cfg.d_hidden, |r, j| embedded.at(r, j) + m.b_in.data()[j] + pe.at(r, j));
    assert!(c.forward(&x, 2, 3).unwrap().max_abs_diff(&want) <= 1e-12);
}

/// Weight-by-weight survivor count, written without the per-unit
/// accounting used by the compactor.
fn enumerate_kept(cfg: &EncoderConfig, m: &EncoderModel, masks: &MaskSet) -> usize {
    let mut kept = cfg.unprunable_params();
    for (w, z) in m.layers.iter().zip(&masks.layers) {
        let head_alive = |j: usize| {
            let h = j / cfg.d_head;
            (h * cfg.d_head..(h + 1) * cfg.d_head).any(|i| z.vo[i] > 0.0)
        };
        for (name, t) in crate::model::LAYER_TENSORS.iter().zip(w.tensors()) {
            let (rows, cols) = if t.shape().len() == 2 { (t.rows(), t.cols()) } else { (t.len(), 1) };
            for r in 0..rows {
                for c in 0..cols {
                    let alive = match *name {
                        "wq" | "wk" => z.mha > 0.0 && z.qk[c] > 0.0 && head_alive(c),
                        "bq" | "bk" => z.mha > 0.0 && z.qk[r] > 0.0 && head_alive(r),
                        "wv" => z.mha > 0.0 && z.vo[c] > 0.0,
                        "bv" | "wo" => z.mha > 0.0 && z.vo[r] > 0.0,
                        "bo" => z.mha > 0.0,
                        "wu" => z.ffn > 0.0 && z.int[c] > 0.0,
                        "bu" | "wd" => z.ffn > 0.0 && z.int[r] > 0.0,
                        "bd" => z.ffn > 0.0,
                        _ => false,
                    };
                    kept += alive as usize;
                }
            }
        }
    }
    kept
}

#[test]
fn kept_count_matches_enumeration() {
    let cfg = small();
    let mut rng = Rng::new(13);
    for trial in 0..20 {
        let m = model(cfg, trial);
        let masks = random_masks(&cfg, &mut rng, trial % 2 == 0);
        let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
        let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
        assert_eq!(c.count_params(), enumerate_kept(&cfg, &m, &masks), "trial {trial}");
        let per_layer: usize = plan.layers.iter().map(|p| layer_kept_params(&cfg, p)).sum();
        assert_eq!(per_layer + cfg.unprunable_params(), c.count_params());
    }
}

#[test]
fn recompacting_with_all_keep_is_bitwise_noop() {
    let cfg = small();
    let m = model(cfg, 5);
    let masks = random_masks(&cfg, &mut Rng::new(5), false);
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    let c = compact(&m, &plan, ScaleRule::Keep).unwrap();
    let again = c.apply(&c.all_keep_plan(), ScaleRule::Keep).unwrap();
    assert_eq!(again, c);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small();
    let m = model(cfg, 6);
    let masks = random_masks(&cfg, &mut Rng::new(6), false);
    let c = compact(&m, &derive_plan_from_masks(&cfg, &masks, 0.0).unwrap(), ScaleRule::Keep).unwrap();
    let back = CompactModel::from_checkpoint(&Checkpoint::from_reader(&c.to_checkpoint().to_bytes()[..]).unwrap()).unwrap();
    assert_eq!(back, c);
    assert!(CompactModel::from_checkpoint(&m.to_checkpoint()).is_err());
}

#[test]
fn retained_scale_matches_when_no_query_dims_are_cut() {
    let cfg = small();
    let m = model(cfg, 7);
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[1].vo[2] = 0.0;
    masks.layers[2].int[4] = 0.0;
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    let keep = compact(&m, &plan, ScaleRule::Keep).unwrap();
    let retained = compact(&m, &plan, ScaleRule::Retained).unwrap();
    assert_eq!(keep, retained);
}

#[test]
fn retained_scale_stays_close_on_light_query_pruning() {
    // One query/key dim cut per head on the default desk shape: the logit
    // scale changes by sqrt(16/15).
    let cfg = EncoderConfig::default();
    let m = model(cfg, 8);
    let mut masks = MaskSet::all_ones(&cfg);
    for l in &mut masks.layers {
        for h in 0..cfg.n_heads {
            l.qk[h * cfg.d_head] = 0.0;
        }
    }
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    let x = input(&cfg, 2, 16, 8);
    let keep = compact(&m, &plan, ScaleRule::Keep).unwrap().forward(&x, 2, 16).unwrap();
    let retained = compact(&m, &plan, ScaleRule::Retained).unwrap().forward(&x, 2, 16).unwrap();
    let num: f64 = keep.data().iter().zip(retained.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = keep.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(num / den <= 1e-2, "relative change {}", num / den);
    assert!(keep.max_abs_diff(&gated(&m, &masks, &x, 2, 16)) <= 1e-9);
}

#[test]
fn heatmap_grids() {
    let cfg = small();
    let all = derive_plan_from_masks(&cfg, &MaskSet::all_ones(&cfg), 0.0).unwrap();
    let g = wv_keep_grid(&cfg, &all, 0);
    assert_eq!(g.len(), cfg.d_hidden);
    assert!(g.iter().flatten().all(|&v| v == 1));
    let mut masks = MaskSet::all_ones(&cfg);
    masks.layers[1].mha = 0.0;
    let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
    assert!(wv_keep_grid(&cfg, &plan, 1).iter().flatten().all(|&v| v == 0));
    let csv = grid_csv(&wv_keep_grid(&cfg, &plan, 0));
    assert_eq!(csv.lines().count(), cfg.d_hidden);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), cfg.attn_width());
    let fr = remaining_fractions(&cfg, &plan);
    assert_eq!(fr[0], 1.0);
    assert!(fr[1] < 1.0);
}

#[test]
fn bench_rejects_few_repeats_and_tiny_work() {
    let cfg = EncoderConfig { n_layers: 1, d_hidden: 2, n_heads: 1, d_head: 1, d_ffn: 1, max_seq_len: 1, input_dim: 1 };
    let c = CompactModel::from_dense(&model(cfg, 9)).unwrap();
    let x = input(&cfg, 1, 1, 9);
    let spec = BatchSpec { batch: 1, seq: 1 };
    assert!(matches!(bench_inference("tiny", &c, &x, spec, 3, None), Err(Error::Bench(_))));
    let e = bench_inference("tiny", &c, &x, spec, 5, None).unwrap_err();
    assert!(e.to_string().contains("larger batch"), "{e}");
}

#[test]
fn dense_against_itself_is_about_one() {
    let cfg = EncoderConfig::default();
    let c = CompactModel::from_dense(&model(cfg, 10)).unwrap();
    let x = input(&cfg, 4, 32, 10);
    let spec = BatchSpec { batch: 4, seq: 32 };
    let base = time_forward(&c, &x, spec, 5, 1).unwrap();
    let r = bench_inference("dense", &c, &x, spec, 5, Some(base)).unwrap();
    assert!(r.seconds_per_batch > 0.0);
    assert!((0.5..2.0).contains(&r.speedup), "{r:?}");
    assert_eq!(r.params, c.count_params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn params_nonincreasing_in_threshold(seed in 0u64..500, t1 in 0.0f64..0.9, dt in 0.0f64..0.5) {
        let cfg = small();
        let m = model(cfg, seed);
        let masks = random_masks(&cfg, &mut Rng::new(seed), false);
        let n = |t: f64| {
            let plan = derive_plan_from_masks(&cfg, &masks, t).unwrap();
            compact(&m, &plan, ScaleRule::Keep).unwrap().count_params()
        };
        prop_assert!(n(t1 + dt) <= n(t1));
    }
}
