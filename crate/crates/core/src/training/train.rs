//! Adam training loop, model variants, checkpoints and learning curves.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor::{Adam, Ctx, ParamStore, Tape, Tensor};

use crate::dualdomain::{DualDomain, Prepared, SolverConfig};
use crate::error::{CoreError, Result};
use crate::physics::DoseLevel;
use crate::pmsrnet::{PmsrnetConfig, ThresholdOverride};
use crate::training::dataset::{derive_seed, MetalBin, Sample};
use crate::training::losses::{loss_hybrid, LossConfig, Targets};
use crate::training::metrics::Metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Prompt-guided, one model for all doses.
    Prompted,
    /// Prompt path disabled, trained on mixed doses.
    Blind,
    /// Prompt path disabled, one model per dose.
    PerDose,
    /// Image-domain branch only, prompt-guided.
    ImageOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Prompted, Variant::Blind, Variant::PerDose, Variant::ImageOnly];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prompted" | "pdumsrnet" => Ok(Variant::Prompted),
            "blind" | "bdumsrnet" => Ok(Variant::Blind),
            "per-dose" | "dumsrnet" => Ok(Variant::PerDose),
            "image-only" => Ok(Variant::ImageOnly),
            _ => Err(CoreError::Config(format!(
                "unknown variant '{}' (expected prompted, blind, per-dose or image-only)",
                s
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Prompted => "prompted",
            Variant::Blind => "blind",
            Variant::PerDose => "per-dose",
            Variant::ImageOnly => "image-only",
        }
    }

    pub fn uses_prompt(self) -> bool {
        matches!(self, Variant::Prompted | Variant::ImageOnly)
    }

    pub fn dual_domain(self) -> bool {
        !matches!(self, Variant::ImageOnly)
    }

    /// Applies the variant's switches to the model and solver configs.
    pub fn configure(self, net: &mut PmsrnetConfig, solver: &mut SolverConfig) {
        net.psatg.prompt = self.uses_prompt();
        solver.dual_domain = self.dual_domain();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Fractions of `epochs` after which the learning rate halves.
    pub milestones: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            milestones: vec![0.4, 0.8],
            batch_size: 1,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(CoreError::Config(format!("only batch size 1 is supported, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(CoreError::Config("milestones are fractions in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `epoch`: halved once per milestone
    /// epoch `round(f · epochs)` already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self
            .milestones
            .iter()
            .filter(|&&f| epoch >= (f * self.epochs as f64).round() as usize)
            .count();
        self.lr * 0.5f64.powi(k as i32)
    }
}

/// A sample with its solver inputs precomputed.
#[derive(Clone, Debug)]
pub struct Prepped {
    pub id: String,
    pub dose: DoseLevel,
    pub bin: MetalBin,
    pub prep: Prepared,
    pub targets: Targets,
}

pub fn prepare_samples(solver: &DualDomain, samples: &[Sample]) -> Result<Vec<Prepped>> {
    samples
        .iter()
        .map(|s| {
            let [h, w] = [s.x.shape()[0], s.x.shape()[1]];
            let sh = s.s.shape().to_vec();
            Ok(Prepped {
                id: s.id.clone(),
                dose: s.dose,
                bin: s.bin,
                prep: solver.prepare(&s.y, &[s.dose])?,
                targets: Targets {
                    x: s.x.clone().reshape(vec![1, 1, h, w])?,
                    s: s.s.clone().reshape(vec![1, 1, sh[0], sh[1]])?,
                    m: s.non_metal.clone().reshape(vec![1, 1, h, w])?,
                },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_rmse: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_psnr,val_ssim,val_rmse\n");
    for r in rows {
        writeln!(s, "{},{:.10e},{:.6},{:.6},{:.6}", r.epoch, r.train_loss, r.val_psnr, r.val_ssim, r.val_rmse).expect("string write");
    }
    s
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scored {
    pub id: String,
    pub dose: DoseLevel,
    pub bin: MetalBin,
    pub metrics: Metrics,
}

pub struct Trainer {
    pub solver: DualDomain,
    pub store: ParamStore,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub curve: Vec<CurveRow>,
}

impl Trainer {
    pub fn new(solver: DualDomain, cfg: TrainConfig, loss: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        let mut store = ParamStore::new();
        solver.init(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100, 0)));
        Ok(Trainer {
            adam: Adam::new(cfg.lr, cfg.beta1, cfg.beta2),
            solver,
            store,
            cfg,
            loss,
            epoch: 0,
            curve: Vec::new(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Loss of one sample at the current parameters.
    pub fn loss_of(&self, s: &Prepped) -> Result<f64> {
        let tape = Tape::inference();
        let out = self.solver.forward(Ctx::new(&tape, &self.store), &s.prep, ThresholdOverride::None)?;
        Ok(loss_hybrid(out.x, out.s, &s.targets, &self.loss)?.value().item()?)
    }

    /// One Adam step on one sample; returns the loss before the update.
    pub fn step(&mut self, s: &Prepped) -> Result<f64> {
        let tape = Tape::new();
        let out = self.solver.forward(Ctx::new(&tape, &self.store), &s.prep, ThresholdOverride::None)?;
        let loss = loss_hybrid(out.x, out.s, &s.targets, &self.loss)?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(CoreError::Numeric(format!(
                "loss diverged to {} at epoch {}, sample {}, optimizer step {}",
                value,
                self.epoch + 1,
                s.id,
                self.adam.steps_taken() + 1
            )));
        }
        let grads = tape.param_grads(&tape.backward(loss)?);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(CoreError::Numeric(format!(
                "non-finite gradient for '{}' at epoch {}, sample {}",
                name,
                self.epoch + 1,
                s.id
            )));
        }
        self.adam.step(&mut self.store, &grads).map_err(|e| {
            CoreError::Numeric(format!("optimizer update failed at epoch {}, sample {}: {}", self.epoch + 1, s.id, e))
        })?;
        Ok(value)
    }

    /// Visiting order of epoch `epoch`; a pure function of seed and epoch.
    pub fn order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        if self.cfg.shuffle {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 101, epoch as u64)));
        }
        idx
    }

    /// One pass over `data`; returns the mean training loss.
    pub fn train_epoch(&mut self, data: &[Prepped]) -> Result<f64> {
        if data.is_empty() {
            return Err(CoreError::Config("no training samples".into()));
        }
        self.adam.lr = self.cfg.lr_at(self.epoch);
        let mut total = 0.0;
        for i in self.order(self.epoch, data.len()) {
            total += self.step(&data[i])?;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    pub fn evaluate(&self, data: &[Prepped]) -> Result<Vec<Scored>> {
        evaluate_with(&self.solver, &self.store, data)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn fit(&mut self, train: &[Prepped], val: &[Prepped], on_epoch: impl FnMut(&Trainer, &CurveRow)) -> Result<()> {
        self.fit_until(self.cfg.epochs, train, val, on_epoch)
    }

    /// Like [`Trainer::fit`] but stops once `until` epochs are complete; the
    /// schedule still follows the configured total, so a later resume
    /// continues exactly where an uninterrupted run would be.
    pub fn fit_until(
        &mut self,
        until: usize,
        train: &[Prepped],
        val: &[Prepped],
        mut on_epoch: impl FnMut(&Trainer, &CurveRow),
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs.min(until) {
            let loss = self.train_epoch(train)?;
            let m = if val.is_empty() {
                Metrics { psnr: f64::NAN, ssim: f64::NAN, rmse: f64::NAN }
            } else {
                Metrics::mean(&self.evaluate(val)?.iter().map(|s| s.metrics).collect::<Vec<_>>())
            };
            let row = CurveRow {
                epoch: self.epoch,
                train_loss: loss,
                val_psnr: m.psnr,
                val_ssim: m.ssim,
                val_rmse: m.rmse,
            };
            log::info!("epoch {}: loss {:.6e}, val PSNR {:.3} dB", row.epoch, row.train_loss, row.val_psnr);
            self.curve.push(row);
            on_epoch(self, &row);
        }
        Ok(())
    }

    /// Optimizer moments, epoch counter and curve, for resuming.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.extend_prefixed("optim.", &self.adam.state());
        s.insert("epoch", Tensor::scalar(self.epoch as f64));
        let flat: Vec<f64> = self
            .curve
            .iter()
            .flat_map(|r| [r.epoch as f64, r.train_loss, r.val_psnr, r.val_ssim, r.val_rmse])
            .collect();
        s.insert("curve", Tensor::new(vec![self.curve.len(), 5], flat).expect("five columns"));
        s
    }

    /// Restores parameters and training state written by [`Trainer::state`].
    pub fn resume(&mut self, model: ParamStore, state: &ParamStore) -> Result<()> {
        check_compatible(&self.store, &model)?;
        let epoch = state.get("epoch")?.item()?;
        if !(epoch >= 0.0 && epoch.fract() == 0.0) {
            return Err(CoreError::Format(format!("invalid epoch counter {}", epoch)));
        }
        let curve = state.get("curve")?;
        self.curve = curve
            .data()
            .chunks_exact(5)
            .map(|c| CurveRow {
                epoch: c[0] as usize,
                train_loss: c[1],
                val_psnr: c[2],
                val_ssim: c[3],
                val_rmse: c[4],
            })
            .collect();
        self.adam = Adam::from_state(&state.strip_prefix("optim."))?;
        self.epoch = epoch as usize;
        self.store = model;
        Ok(())
    }
}

/// Checks that `got` has exactly the tensor names and shapes of `want`.
pub fn check_compatible(want: &ParamStore, got: &ParamStore) -> Result<()> {
    for n in want.names() {
        let w = want.get(n)?;
        let g = got
            .get(n)
            .map_err(|_| CoreError::Format(format!("checkpoint lacks parameter '{}'", n)))?;
        if w.shape() != g.shape() {
            return Err(CoreError::Format(format!(
                "checkpoint parameter '{}' has shape {:?}, model expects {:?}",
                n,
                g.shape(),
                w.shape()
            )));
        }
    }
    if got.len() != want.len() {
        return Err(CoreError::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            got.len(),
            want.len()
        )));
    }
    Ok(())
}

/// Loads a checkpoint and checks it against the solver's parameter layout.
pub fn load_checkpoint(solver: &DualDomain, path: &std::path::Path) -> Result<ParamStore> {
    let got = ParamStore::load(path)?;
    let mut want = ParamStore::new();
    solver.init(&mut want, &mut ChaCha8Rng::seed_from_u64(0));
    check_compatible(&want, &got)?;
    Ok(got)
}

/// Scores the solver's reconstructions against the references.
pub fn evaluate_with(solver: &DualDomain, store: &ParamStore, data: &[Prepped]) -> Result<Vec<Scored>> {
    data.iter()
        .map(|s| {
            let tape = Tape::inference();
            let out = solver.forward(Ctx::new(&tape, store), &s.prep, ThresholdOverride::None)?;
            let x = out.x.value();
            x.ensure_finite("reconstruction")?;
            Ok(Scored {
                id: s.id.clone(),
                dose: s.dose,
                bin: s.bin,
                metrics: Metrics::evaluate(&x, &s.targets.x, Some(&s.targets.m))?,
            })
        })
        .collect()
}

/// FBP baseline scores.
pub fn evaluate_fbp(data: &[Prepped]) -> Result<Vec<Scored>> {
    data.iter()
        .map(|s| {
            Ok(Scored {
                id: s.id.clone(),
                dose: s.dose,
                bin: s.bin,
                metrics: Metrics::evaluate(&s.prep.fbp, &s.targets.x, Some(&s.targets.m))?,
            })
        })
        .collect()
}

pub fn mean_psnr(scores: &[Scored]) -> f64 {
    scores.iter().map(|s| s.metrics.psnr).sum::<f64>() / scores.len().max(1) as f64
}
