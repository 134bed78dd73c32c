//! The optimization loop: scene batches, loss backward, adaptive parameter
//! updates, and post-step identity-bank maintenance. Everything is driven
//! by one seeded rng so a run is reproducible from (config, seed) alone,
//! and resumable bit-identically from a checkpoint.

use std::io::Write;

use crate::bank::IdentityBank;
use crate::checkpoint::{
    self, restore_banks, restore_model, restore_optimizer, restore_rng, Checkpoint,
};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::loss::{bank_update_entries, total_loss, LossBreakdown, LossConfig};
use crate::model::{ModelConfig, SearchModel};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// First-moment smoothing for the optimizer; 0 keeps the update purely
    /// magnitude-adaptive, which is the documented default.
    pub beta1: f64,
    /// Steps at which the learning rate drops by 10x (two-stage schedule).
    pub lr_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub bank_queue: usize,
    pub bank_tau: f64,
    pub bank_momentum: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 2,
            lr: 1e-3,
            beta1: 0.0,
            lr_milestones: vec![420, 540],
            weight_decay: 1e-4,
            bank_queue: 16,
            bank_tau: 1.0 / 30.0,
            bank_momentum: 0.5,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train_config", format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::invalid(
                "train_config",
                format!("beta1 must be in [0, 1), got {}", self.beta1),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("train_config", "weight_decay must be >= 0"));
        }
        self.loss.weights.validate()
    }

    fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::new(OptimConfig {
            lr: self.lr,
            beta1: self.beta1,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        })
    }
}

/// Learning rate for the (0-indexed) upcoming step: base times 0.1 for
/// every milestone already passed.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| step >= m).count() as i32;
    cfg.lr * 0.1f64.powi(passed)
}

/// One finished optimization step, as reported in the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based step count after the update.
    pub step: usize,
    pub lr: f64,
    /// Batch-mean loss parts (unweighted) and weighted total.
    pub breakdown: LossBreakdown,
    pub scene_indices: Vec<usize>,
}

pub const METRICS_HEADER: &str = "step,L_cls,L_iou,L_l1,L_oim,total";

pub fn metrics_row(rec: &StepRecord) -> String {
    let b = &rec.breakdown;
    format!("{},{},{},{},{},{}", rec.step, b.cls, b.iou, b.l1, b.oim, b.total)
}

pub struct TrainState {
    pub model: SearchModel,
    pub optim: Optimizer,
    /// One bank per configured re-id scale, in scale order.
    pub banks: Vec<IdentityBank>,
    scales: Vec<usize>,
    /// Batch-order rng; part of the checkpoint.
    pub rng: Rng,
}

impl TrainState {
    pub fn init(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        labeled: usize,
        seed: u64,
    ) -> Result<TrainState> {
        model_cfg.validate()?;
        cfg.validate()?;
        let root = Rng::new(seed);
        let model = SearchModel::init(model_cfg, &mut root.fork_named("model"))?;
        let mut bank_rng = root.fork_named("banks");
        let scales = model_cfg.reid.scales.clone();
        let mut banks = Vec::with_capacity(scales.len());
        for _ in &scales {
            banks.push(IdentityBank::new(
                labeled,
                cfg.bank_queue,
                model_cfg.reid.d_reid,
                cfg.bank_tau,
                cfg.bank_momentum,
                &mut bank_rng,
            )?);
        }
        let rng = root.fork_named("batches");
        Ok(TrainState { model, optim: cfg.optimizer()?, banks, scales, rng })
    }

    /// Rebuilds a state from a checkpoint; the resumed run continues
    /// bit-identically with the run that wrote it.
    pub fn from_checkpoint(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<TrainState> {
        model_cfg.validate()?;
        cfg.validate()?;
        let mut model = SearchModel::init(model_cfg, &mut Rng::new(0))?;
        restore_model(&mut model, ckpt)?;
        let optim = restore_optimizer(
            OptimConfig {
                lr: cfg.lr,
                beta1: cfg.beta1,
                weight_decay: cfg.weight_decay,
                ..OptimConfig::default()
            },
            ckpt,
        )?;
        let keyed = restore_banks(ckpt)?;
        let scales = model_cfg.reid.scales.clone();
        let stored: Vec<usize> = keyed.iter().map(|(s, _)| *s).collect();
        if stored != scales {
            return Err(Error::invalid(
                "from_checkpoint",
                format!("checkpoint banks cover scales {stored:?}, model wants {scales:?}"),
            ));
        }
        let banks = keyed.into_iter().map(|(_, b)| b).collect();
        let rng = restore_rng(ckpt)?;
        Ok(TrainState { model, optim, banks, scales, rng })
    }

    pub fn snapshot(&mut self, config_text: &str) -> Checkpoint {
        let keyed: Vec<(usize, &IdentityBank)> =
            self.scales.iter().copied().zip(self.banks.iter()).collect();
        checkpoint::snapshot(&mut self.model, &self.optim, &keyed, &self.rng, config_text)
    }

    pub fn step_count(&self) -> usize {
        self.optim.step_count()
    }

    pub fn draw_batch(&mut self, n_scenes: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.rng.below(n_scenes)).collect()
    }

    /// Runs one optimization step on the given scenes: forward + loss per
    /// scene, backward on the batch mean, parameter update, then bank
    /// momentum/queue updates from the final level's matches.
    pub fn train_step_on(
        &mut self,
        indices: &[usize],
        scenes: &[Scene],
        cfg: &TrainConfig,
    ) -> Result<StepRecord> {
        if indices.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let lr = lr_at(cfg, self.optim.step_count());
        self.optim.set_lr(lr);

        let mut batch_total = None;
        let mut sums = LossBreakdown::default();
        let mut pending = Vec::with_capacity(indices.len());
        for &idx in indices {
            let scene = scenes.get(idx).ok_or_else(|| {
                Error::invalid("train_step", format!("scene index {idx} out of range"))
            })?;
            let image = scene.image_tensor()?;
            let (det, reid) = self.model.forward_train(&image)?;
            let targets = scene.targets();
            let out = total_loss(&det.levels, &reid, &self.scales, &targets, &self.banks, &cfg.loss)?;
            let last = det.levels.len() - 1;
            let assign = out.assignments.last().expect("per-level assignments");
            pending.push(bank_update_entries(&reid, &self.scales, last, assign, &targets)?);
            sums.cls += out.breakdown.cls;
            sums.iou += out.breakdown.iou;
            sums.l1 += out.breakdown.l1;
            sums.oim += out.breakdown.oim;
            sums.total += out.breakdown.total;
            batch_total = Some(match batch_total {
                None => out.total,
                Some(acc) => out.total.add(&acc)?,
            });
        }
        let n = indices.len() as f64;
        let loss = batch_total.expect("non-empty batch").mul_scalar(1.0 / n)?;
        loss.backward()?;

        let mut params = Vec::new();
        self.model.visit(&mut params);
        self.optim.apply(&mut params)?;

        for scene_updates in &pending {
            for (bank, entries) in self.banks.iter_mut().zip(scene_updates) {
                bank.update(entries)?;
                bank.check_invariants()?;
            }
        }

        let breakdown = LossBreakdown {
            cls: sums.cls / n,
            iou: sums.iou / n,
            l1: sums.l1 / n,
            oim: sums.oim / n,
            total: sums.total / n,
        };
        Ok(StepRecord {
            step: self.optim.step_count(),
            lr,
            breakdown,
            scene_indices: indices.to_vec(),
        })
    }
}

/// Drives training until `cfg.steps`, appending one CSV row per step to
/// `metrics` and invoking `on_checkpoint` every `checkpoint_every` steps
/// (0 disables periodic snapshots). On a non-finite loss the offending
/// batch is dumped as a CSV comment before the error propagates.
pub fn run_training<C>(
    state: &mut TrainState,
    scenes: &[Scene],
    cfg: &TrainConfig,
    metrics: &mut dyn Write,
    checkpoint_every: usize,
    mut on_checkpoint: C,
) -> Result<()>
where
    C: FnMut(&mut TrainState) -> Result<()>,
{
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("run_training", "no training scenes"));
    }
    let io_err = |e: std::io::Error| Error::io("metrics stream".to_string(), e);
    if state.step_count() == 0 {
        writeln!(metrics, "{METRICS_HEADER}").map_err(io_err)?;
    }
    while state.step_count() < cfg.steps {
        let replay = (state.rng.seed(), state.rng.state());
        let indices = state.draw_batch(scenes.len(), cfg.batch_size);
        match state.train_step_on(&indices, scenes, cfg) {
            Ok(rec) => {
                writeln!(metrics, "{}", metrics_row(&rec)).map_err(io_err)?;
                if checkpoint_every > 0 && rec.step % checkpoint_every == 0 {
                    on_checkpoint(state)?;
                }
            }
            Err(e) => {
                writeln!(
                    metrics,
                    "# aborted at step {}: batch scenes {:?} (order rng seed {} state {}): {}",
                    state.step_count() + 1,
                    indices,
                    replay.0,
                    replay.1,
                    e
                )
                .map_err(io_err)?;
                return Err(e);
            }
        }
    }
    Ok(())
}
