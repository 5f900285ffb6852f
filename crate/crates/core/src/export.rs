//! Figure-data exporters over finished run artifacts.

use crate::compact::{grid_csv, remaining_fractions, wv_keep_grid, CompactPlan};
use crate::model::EncoderConfig;
use crate::train::{LayerMeans, TrainRecord};

/// One row per logged step: coarse gate means per layer, then fine means.
pub fn export_gate_trajectories(log: &[TrainRecord]) -> String {
    let n_layers = log.first().map_or(0, |r| r.mean_z.len());
    let mut header = vec!["step".to_string()];
    for kind in ["ffn", "mha", "qk", "vo", "int"] {
        header.extend((0..n_layers).map(|l| format!("z_{kind}_{l}")));
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in log {
        let mut row = vec![r.step.to_string()];
        let picks: [fn(&LayerMeans) -> f64; 5] = [|m| m.ffn, |m| m.mha, |m| m.qk, |m| m.vo, |m| m.int];
        for pick in picks {
            row.extend(r.mean_z.iter().map(|m| pick(m).to_string()));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Per-layer range (max − min) of the mean FFN gate over a log.
pub fn ffn_trajectory_range(log: &[TrainRecord]) -> Vec<f64> {
    let n_layers = log.first().map_or(0, |r| r.mean_z.len());
    (0..n_layers)
        .map(|l| {
            let (lo, hi) = log.iter().map(|r| r.mean_z[l].ffn).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            hi - lo
        })
        .collect()
}

/// W_V keep grids, one CSV per layer, plus a CSV of remaining fractions.
pub struct Heatmaps {
    pub grids: Vec<String>,
    pub fractions_csv: String,
}

pub fn export_weight_heatmaps(cfg: &EncoderConfig, plan: &CompactPlan) -> Heatmaps {
    let grids = (0..cfg.n_layers).map(|l| grid_csv(&wv_keep_grid(cfg, plan, l))).collect();
    let mut fractions_csv = String::from("layer,remaining_fraction,attn_removed,ffn_removed\n");
    for (l, f) in remaining_fractions(cfg, plan).into_iter().enumerate() {
        let p = &plan.layers[l];
        fractions_csv.push_str(&format!("{l},{f},{},{}\n", !p.keep_mha as u8, !p.keep_ffn as u8));
    }
    Heatmaps { grids, fractions_csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compact::derive_plan_from_masks;
    use crate::model::MaskSet;

    fn rec(step: usize, ffn: [f64; 2]) -> TrainRecord {
        TrainRecord {
            step,
            lr: 0.0,
            target_p: 0.0,
            distill_loss: 0.0,
            penalty: 0.0,
            p_hat: 0.0,
            p_hat_deterministic: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            mean_z: ffn.iter().map(|&f| LayerMeans { mha: 1.0, ffn: f, qk: 0.5, vo: 0.25, int: 1.0 }).collect(),
        }
    }

    #[test]
    fn trajectory_rows_match_steps() {
        let log: Vec<TrainRecord> = (0..7).map(|s| rec(s, [1.0, 1.0 - 0.1 * s as f64])).collect();
        let csv = export_gate_trajectories(&log);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0].split(',').count(), 1 + 5 * 2);
        assert!(lines[0].starts_with("step,z_ffn_0,z_ffn_1,z_mha_0"));
        assert!(lines[3].starts_with("2,1,0.8"));
        let r = ffn_trajectory_range(&log);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn heatmaps_for_all_keep_and_closed_layer() {
        let cfg = EncoderConfig { n_layers: 2, d_hidden: 4, n_heads: 2, d_head: 2, d_ffn: 4, max_seq_len: 4, input_dim: 2 };
        let mut masks = MaskSet::all_ones(&cfg);
        masks.layers[1].mha = 0.0;
        let plan = derive_plan_from_masks(&cfg, &masks, 0.0).unwrap();
        let h = export_weight_heatmaps(&cfg, &plan);
        assert!(h.grids[0].lines().all(|l| l.split(',').all(|v| v == "1")));
        assert!(h.grids[1].lines().all(|l| l.split(',').all(|v| v == "0")));
        assert_eq!(h.grids[0].lines().count(), cfg.d_hidden);
        let rows: Vec<&str> = h.fractions_csv.lines().collect();
        assert_eq!(rows[1], "0,1,0,0");
        assert!(rows[2].ends_with(",1,0"));
    }
}
