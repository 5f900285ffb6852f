//! The prune-while-distilling loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::compact::{compact, derive_plan, derive_plan_from_masks, ScaleRule};
use crate::config::RunConfig;
use crate::data::{synthetic_dataset, DatasetSpec, SyntheticStream};
use crate::distill::{distill_loss, make_teacher, pair_layers, per_pair_mse, LayerPairing, PairingMode, PairingRecord, Teacher};
use crate::error::{Error, Result};
use crate::model::{encoder_forward, register, Checkpoint, EncoderModel, MaskSet};
use crate::optim::AdamW;
use crate::rng::{streams, Rng};
use crate::schedule::{gate_lr_schedule, lr_schedule, sparsity_schedule};
use crate::sparsity::{lagrangian_penalty, GateSet, LagrangianState};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const PAIRING_FILE: &str = "pairing_log.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

/// Sequences in the held-out batch used for the final loss numbers.
pub const EVAL_BATCH: usize = 32;

/// Deterministic gate means of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMeans {
    pub mha: f64,
    pub ffn: f64,
    pub qk: f64,
    pub vo: f64,
    pub int: f64,
}

/// One TrainLog line. Loss terms are those of the step's forward pass;
/// multipliers and gate means are taken after the step's updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub target_p: f64,
    pub distill_loss: f64,
    pub penalty: f64,
    pub p_hat: f64,
    pub p_hat_deterministic: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mean_z: Vec<LayerMeans>,
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub p_hat_expected: f64,
    pub p_hat_deterministic: f64,
    /// Distillation loss on a held-out batch with deterministic gates.
    pub eval_distill_loss: f64,
    /// The same loss with every gate closed.
    pub closed_baseline_loss: f64,
    pub removed_sublayers: usize,
    pub compact_params: usize,
    pub dense_params: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub pairs: Vec<(usize, usize)>,
}

fn opt_refs(v: &[Option<Tensor>]) -> Vec<Option<&Tensor>> {
    v.iter().map(|g| g.as_ref()).collect()
}

/// Seeded teacher, optionally trained on sequence denoising.
pub fn build_teacher(cfg: &RunConfig) -> Result<EncoderModel> {
    let mut model = EncoderModel::init(cfg.encoder(), &mut Rng::stream(cfg.seed, streams::INIT))?;
    if cfg.teacher_pretrain_steps == 0 {
        return Ok(model);
    }
    let mut data = synthetic_dataset(DatasetSpec::from_config(cfg), Rng::stream(cfg.seed, streams::TEACHER))?;
    let mut noise = Rng::stream(cfg.seed, streams::TEACHER_NOISE);
    let shapes: Vec<Vec<usize>> = model.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamW::new(&refs, 0.0);
    let (b, t) = (cfg.batch_size, cfg.seq_len);
    for step in 0..cfg.teacher_pretrain_steps {
        let clean = data.next_batch(b);
        let mut noisy = clean.clone();
        for v in noisy.data_mut() {
            *v += noise.normal(0.0, 0.5);
        }
        let mut g = Graph::new();
        let mv = register(&mut g, &model, true);
        let xv = g.constant(noisy);
        let hs = encoder_forward(&mut g, &model.config, &mv, xv, b, t, None)?;
        let last = *hs.last().expect("at least one layer");
        let y = g.matmul(last, mv.w_out)?;
        let y = g.add_row(y, mv.b_out)?;
        let target = g.constant(clean);
        let loss = g.mse(y, target)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!("teacher pretraining loss at step {step}")));
        }
        g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = mv.all.iter().map(|&v| g.take_grad(v)).collect();
        opt.step(&mut model.tensors_mut(), &opt_refs(&grads), cfg.teacher_lr)?;
    }
    Ok(model)
}

/// Everything that evolves during a run.
pub struct Trainer {
    pub config: RunConfig,
    pub student: EncoderModel,
    pub gates: GateSet,
    pub teacher: Teacher,
    pub lagrangian: LagrangianState,
    pub pairing: LayerPairing,
    pub step: usize,
    weight_opt: AdamW,
    gate_opt: AdamW,
    data: SyntheticStream,
    noise: Rng,
}

/// Output of one step.
pub struct StepOutput {
    pub record: TrainRecord,
    pub pairing: Option<PairingRecord>,
}

/// The readout head is not part of the distillation graph, so it is left
/// out of the optimizer.
const READOUT_TENSORS: usize = 2;

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let teacher_model = build_teacher(&config)?;
        let student = teacher_model.clone();
        let teacher = make_teacher(teacher_model)?;
        let enc = config.encoder();
        let gates = GateSet::init(
            &enc,
            config.hard_concrete(),
            config.ste,
            config.gate_init(),
            &mut Rng::stream(config.seed, streams::GATE_INIT),
        )?;
        let layers: Vec<usize> = (0..enc.n_layers).collect();
        let pairing = match config.pairing {
            PairingMode::FixedUniform => LayerPairing::fixed_uniform(enc.n_layers, enc.n_layers, &layers)?,
            PairingMode::DynamicMinMse => {
                LayerPairing::dynamic(enc.n_layers, enc.n_layers, &layers, config.pairing_refresh)?
            }
        };
        let shapes = |ts: Vec<&Tensor>| ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        let mut wshapes = shapes(student.named_tensors().into_iter().map(|(_, t)| t).collect());
        wshapes.truncate(wshapes.len() - READOUT_TENSORS);
        let gshapes = shapes(gates.groups().map(|g| &g.log_alpha).collect());
        let wrefs: Vec<&[usize]> = wshapes.iter().map(|s| s.as_slice()).collect();
        let grefs: Vec<&[usize]> = gshapes.iter().map(|s| s.as_slice()).collect();
        let weight_opt = AdamW::new(&wrefs, config.weight_decay);
        let gate_opt = AdamW::new(&grefs, 0.0);
        let data = synthetic_dataset(DatasetSpec::from_config(&config), Rng::stream(config.seed, streams::DATA))?;
        let noise = Rng::stream(config.seed, streams::GATE_NOISE);
        let lagrangian = LagrangianState::new(0.0);
        Ok(Self { config, student, gates, teacher, lagrangian, pairing, step: 0, weight_opt, gate_opt, data, noise })
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Forward, backward and one update of weights, gates and multipliers.
    /// On a non-finite loss or gradient nothing is updated.
    pub fn step(&mut self) -> Result<StepOutput> {
        let c = &self.config;
        let (b, t, total) = (c.batch_size, c.seq_len, c.total_steps);
        let lr = lr_schedule(self.step, total, c.warmup_fraction, c.peak_lr);
        let target = sparsity_schedule(self.step, total, c.warmup_fraction, c.target_sparsity);
        self.lagrangian.target_p = target;

        let x = self.data.next_batch(b);
        let th = self.teacher.hiddens(&x, b, t)?;

        let mut g = Graph::new();
        let mv = register(&mut g, &self.student, true);
        let gv = self.gates.register(&mut g);
        let masks = self.gates.sample(&mut g, &gv, &mut self.noise)?;
        let xv = g.constant(x);
        let sh = encoder_forward(&mut g, &self.student.config, &mv, xv, b, t, Some(&masks))?;

        let mut pairing_rec = None;
        if self.pairing.due(self.step) {
            let sv: Vec<Tensor> = sh.iter().map(|&h| g.value(h).clone()).collect();
            self.pairing = pair_layers(&sv, &th, &self.pairing)?;
            let mse = per_pair_mse(&sv, &th, &self.pairing)?;
            pairing_rec = Some(PairingRecord { step: self.step, pairs: self.pairing.pairs.clone(), mse });
        }

        let tv: Vec<Var> = th.into_iter().map(|h| g.constant(h)).collect();
        let dl = distill_loss(&mut g, &sh, &tv, &self.pairing)?;
        let ph = self.gates.expected_sparsity(&mut g, &gv)?;
        let pen = lagrangian_penalty(&mut g, ph, &self.lagrangian)?;
        let loss = g.add(dl, pen)?;
        let (dl_v, pen_v, ph_v) = (g.value(dl).item(), g.value(pen).item(), g.value(ph).item());
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: distill {dl_v}, penalty {pen_v}, p_hat {ph_v}",
                self.step
            )));
        }
        g.backward(loss)?;

        let n_w = mv.all.len() - READOUT_TENSORS;
        let wgrads: Vec<Option<Tensor>> = mv.all[..n_w].iter().map(|&v| g.take_grad(v)).collect();
        let ggrads: Vec<Option<Tensor>> = gv.all().iter().map(|&v| g.take_grad(v)).collect();
        if wgrads.iter().chain(&ggrads).flatten().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
        }

        let mut wparams = self.student.tensors_mut();
        wparams.truncate(n_w);
        self.weight_opt.step(&mut wparams, &opt_refs(&wgrads), lr)?;
        let mut gparams: Vec<&mut Tensor> = self.gates.groups_mut().map(|g| &mut g.log_alpha).collect();
        let gate_lr = gate_lr_schedule(self.step, total, c.warmup_fraction, c.gate_lr);
        self.gate_opt.step(&mut gparams, &opt_refs(&ggrads), gate_lr)?;

        self.lagrangian.current_p_hat = ph_v;
        self.lagrangian.update_multipliers(ph_v - target, c.lr_lambda);

        let mean_z = self
            .gates
            .mean_deterministic()
            .into_iter()
            .map(|m| LayerMeans { mha: m[0], ffn: m[1], qk: m[2], vo: m[3], int: m[4] })
            .collect();
        let record = TrainRecord {
            step: self.step,
            lr,
            target_p: target,
            distill_loss: dl_v,
            penalty: pen_v,
            p_hat: ph_v,
            p_hat_deterministic: self.gates.deterministic_sparsity(),
            lambda1: self.lagrangian.lambda1,
            lambda2: self.lagrangian.lambda2,
            mean_z,
        };
        self.step += 1;
        Ok(StepOutput { record, pairing: pairing_rec })
    }

    /// Student weights, gates and multipliers.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.student.to_checkpoint();
        ck.kind = "gated".into();
        self.gates.write_checkpoint(&mut ck);
        ck.set_meta("step", self.step);
        ck.set_meta("lambda1", self.lagrangian.lambda1);
        ck.set_meta("lambda2", self.lagrangian.lambda2);
        ck.set_meta("seed", self.config.seed);
        ck
    }

    /// Held-out losses with deterministic gates and with every gate closed.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let (b, t) = (EVAL_BATCH, self.config.seq_len);
        let spec = DatasetSpec::from_config(&self.config);
        let x = synthetic_dataset(spec, Rng::stream(self.config.seed, streams::EVAL))?.next_batch(b);
        let th = self.teacher.hiddens(&x, b, t)?;
        let enc = self.config.encoder();
        let pruned = compact(&self.student, &derive_plan(&self.gates, 0.0)?, ScaleRule::Keep)?;
        let closed_plan = derive_plan_from_masks(&enc, &MaskSet::filled(&enc, 0.0), 0.0)?;
        let closed = compact(&self.student, &closed_plan, ScaleRule::Keep)?;
        let loss = |sh: Vec<Tensor>| -> Result<f64> { Ok(per_pair_mse(&sh, &th, &self.pairing)?.iter().sum()) };
        Ok((loss(pruned.forward_hiddens(&x, b, t)?)?, loss(closed.forward_hiddens(&x, b, t)?)?))
    }

    pub fn summary(&self) -> Result<TrainSummary> {
        let (eval_distill_loss, closed_baseline_loss) = self.evaluate()?;
        let pruned = compact(&self.student, &derive_plan(&self.gates, 0.0)?, ScaleRule::Keep)?;
        let dense = crate::compact::CompactModel::from_dense(&self.student)?;
        Ok(TrainSummary {
            steps: self.step,
            p_hat_expected: self.gates.expected_sparsity_value(),
            p_hat_deterministic: self.gates.deterministic_sparsity(),
            eval_distill_loss,
            closed_baseline_loss,
            removed_sublayers: pruned.removed_sublayers(),
            compact_params: pruned.count_params(),
            dense_params: dense.count_params(),
            lambda1: self.lagrangian.lambda1,
            lambda2: self.lagrangian.lambda2,
            pairs: self.pairing.pairs.clone(),
        })
    }
}

/// Paths of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub summary: TrainSummary,
}

/// Run the full loop and write the run directory. On a non-finite loss the
/// state before the offending step is saved as `last_good.ckpt` and the
/// error is returned.
pub fn train_prune(config: &RunConfig) -> Result<RunOutputs> {
    train_prune_with(config, |_| {})
}

/// As [`train_prune`], calling `on_record` after every step.
pub fn train_prune_with(config: &RunConfig, mut on_record: impl FnMut(&TrainRecord)) -> Result<RunOutputs> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    let mut trainer = Trainer::new(config.clone())?;
    trainer.teacher.model().to_checkpoint().save(dir.join(TEACHER_FILE))?;
    let mut log = BufWriter::new(File::create(dir.join(LOG_FILE))?);
    let mut pairs = BufWriter::new(File::create(dir.join(PAIRING_FILE))?);
    while !trainer.done() {
        match trainer.step() {
            Ok(out) => {
                serde_json::to_writer(&mut log, &out.record)?;
                log.write_all(b"\n")?;
                if let Some(p) = out.pairing {
                    serde_json::to_writer(&mut pairs, &p)?;
                    pairs.write_all(b"\n")?;
                }
                on_record(&out.record);
            }
            Err(e @ Error::NonFinite(_)) => {
                log.flush()?;
                pairs.flush()?;
                trainer.checkpoint().save(dir.join(LAST_GOOD_FILE))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    log.flush()?;
    pairs.flush()?;
    trainer.checkpoint().save(dir.join(MODEL_FILE))?;
    let summary = trainer.summary()?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(RunOutputs { dir, summary })
}

/// Student weights and gates from a `gated` checkpoint.
pub fn load_gated(ck: &Checkpoint) -> Result<(EncoderModel, GateSet)> {
    if ck.kind != "gated" {
        return Err(Error::Checkpoint(format!("expected a gated checkpoint, found {:?}", ck.kind)));
    }
    Ok((EncoderModel::from_checkpoint(ck)?, GateSet::from_checkpoint(ck)?))
}
