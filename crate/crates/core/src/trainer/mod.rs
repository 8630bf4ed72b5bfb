//! The composite adaptation objective and the training loop around it.
//!
//! One step records a fresh tape: both domains go through `F` and `N`, the
//! composite loss is built, one backward pass runs, and a single AdamW
//! instance updates `F`, `N` and `D` together. The minimax split between the
//! feature extractor and the discriminator comes from gradient reversal.

mod config;
mod models;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    AdamWConfig, ArchitectureConfig, ConditioningChoice, ConditioningConfig, KernelSettings,
    TrainConfig,
};
pub use models::{BoundModels, Checkpoint, Models, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::AdamW;

use crate::adversarial::cdan_adversarial_loss;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{paired_batches, DomainDataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::kernel::{mmd2_biased, plmmd, plmmd_weights};
use crate::rng::derive_seed;
use crate::target_losses::{im_loss, mcc_loss};

/// Mean cross-entropy of `softmax(logits)` against class indices.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.value(logits).dims2("classification_loss")?;
    if labels.len() != n {
        return Err(Error::shape(
            "classification_loss",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::param(
            "classification loss needs at least one sample",
        ));
    }
    let onehot = Tensor::one_hot(labels, k)?;
    let logp = tape.log_softmax(logits, 1.0)?;
    let y = tape.constant(onehot)?;
    let picked = tape.mul(logp, y)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Class probabilities of the source classifier on `x`, as plain data.
pub fn pseudo_labels(models: &Models, x: &Tensor) -> Result<Tensor> {
    let logits = models.logits(x)?;
    let mut tape = Tape::new();
    let z = tape.constant(logits)?;
    let p = tape.softmax(z, 1.0)?;
    Ok(tape.value(p).clone())
}

/// `λ_max (2 / (1 + e^{-10p}) - 1)`.
pub fn lambda_schedule(progress: f64, lambda_max: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::param(format!(
            "progress must lie in [0, 1], got {progress}"
        )));
    }
    Ok(lambda_max * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0))
}

/// One step's inputs. The target side carries no labels.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
}

/// Per-term values of one composite evaluation. Skipped terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clc: f64,
    pub dis: f64,
    pub im: f64,
    pub mcc: f64,
    pub mmd: f64,
    pub plmmd: f64,
    /// `clc + λ·dis + β·im + γ·mcc + δ·mmd + η·plmmd`.
    pub composite: f64,
    pub lambda: f64,
}

/// Builds the composite objective on `tape`.
///
/// The returned var is what backward runs on: the discriminator term enters
/// unscaled behind a reversal node of scale `λ(p)`, so `D` descends `L_dis`
/// while `F` receives `-λ ∂L_dis/∂θ_F`. Terms with a coefficient of exactly 0
/// (or `λ_max = 0`) are not built.
pub fn composite_loss(
    tape: &mut Tape,
    models: &BoundModels<'_>,
    batch: &DomainBatch,
    cfg: &TrainConfig,
    progress: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut br = LossBreakdown {
        lambda: lambda_schedule(progress, cfg.lambda_max)?,
        ..Default::default()
    };
    let xs = tape.constant(batch.source_x.clone())?;
    let xt = tape.constant(batch.target_x.clone())?;
    let fs = models.feature.forward(tape, xs)?;
    let zs = models.classifier.forward(tape, fs)?;

    let l_clc = classification_loss(tape, zs, &batch.source_y)?;
    br.clc = tape.value(l_clc).item();
    let mut total = l_clc;

    let adapt = cfg.lambda_max != 0.0
        || [cfg.beta, cfg.gamma, cfg.delta, cfg.eta]
            .iter()
            .any(|c| *c != 0.0);
    if !adapt {
        br.composite = br.clc;
        return Ok((total, br));
    }
    let ft = models.feature.forward(tape, xt)?;
    let zt = models.classifier.forward(tape, ft)?;
    let pt = tape.softmax(zt, 1.0)?;

    let add = |tape: &mut Tape, total: &mut Var, term: Var, coef: f64| -> Result<f64> {
        let v = tape.value(term).item();
        let scaled = if coef == 1.0 {
            term
        } else {
            tape.scale(term, coef)?
        };
        *total = tape.add(*total, scaled)?;
        Ok(v)
    };

    if cfg.lambda_max != 0.0 {
        let ps = tape.softmax(zs, 1.0)?;
        let d = cdan_adversarial_loss(
            tape,
            fs,
            ps,
            ft,
            pt,
            &models.discriminator,
            models.conditioning,
            br.lambda,
        )?;
        br.dis = add(tape, &mut total, d, 1.0)?;
    }
    if cfg.beta != 0.0 {
        let l = im_loss(tape, pt)?;
        br.im = add(tape, &mut total, l, cfg.beta)?;
    }
    if cfg.gamma != 0.0 {
        let l = mcc_loss(tape, zt, cfg.temperature)?;
        br.mcc = add(tape, &mut total, l, cfg.gamma)?;
    }
    if cfg.delta != 0.0 || cfg.eta != 0.0 {
        let kernel = cfg.kernel.resolve(tape.value(fs), tape.value(ft))?;
        if cfg.delta != 0.0 {
            let l = mmd2_biased(tape, fs, ft, &kernel)?;
            br.mmd = add(tape, &mut total, l, cfg.delta)?;
        }
        if cfg.eta != 0.0 {
            let k = tape.value(pt).cols();
            let w = plmmd_weights(&Tensor::one_hot(&batch.source_y, k)?, tape.value(pt))?;
            let l = plmmd(tape, fs, ft, &w.weights, &kernel)?;
            br.plmmd = add(tape, &mut total, l, cfg.eta)?;
        }
    }
    br.composite = br.clc
        + br.lambda * br.dis
        + cfg.beta * br.im
        + cfg.gamma * br.mcc
        + cfg.delta * br.mmd
        + cfg.eta * br.plmmd;
    Ok((total, br))
}

/// Fraction of rows whose arg-max logit (lowest index on ties) matches the
/// label.
pub fn evaluate(models: &Models, ds: &DomainDataset) -> Result<f64> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::param("evaluation needs a labeled dataset"))?;
    if ds.is_empty() {
        return Err(Error::param("evaluation needs at least one sample"));
    }
    let pred = models.logits(ds.features())?.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Step means of each term.
    pub losses: LossBreakdown,
    pub source_accuracy: f64,
    /// Present when the caller supplied labeled target data for evaluation.
    pub target_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

/// Runs `cfg.epochs` epochs of `ceil(max(n_s, n_t) / batch)` steps with
/// progress `p = step / total_steps`. `target_eval` only feeds the
/// per-epoch target accuracy; training reads the target through `target`.
pub fn train(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: UnlabeledView<'_>,
    target_eval: Option<&DomainDataset>,
) -> Result<(Models, Vec<EpochMetrics>)> {
    train_with(cfg, source, target, target_eval, |_| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: UnlabeledView<'_>,
    target_eval: Option<&DomainDataset>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(Models, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| Error::param("source dataset must be labeled"))?;
    if source.dim() != target.features().cols() {
        return Err(Error::shape(
            "train",
            format!(
                "source has {} features, target {}",
                source.dim(),
                target.features().cols()
            ),
        ));
    }
    if source.class_count() != target.class_count() {
        return Err(Error::shape(
            "train",
            format!(
                "source has {} classes, target {}",
                source.class_count(),
                target.class_count()
            ),
        ));
    }
    let mut models = Models::init(cfg, source.dim(), source.class_count())?;
    let names = models.param_names();
    let mut opt = AdamW::new(cfg.optimizer.clone(), cfg.lr, names.len());
    let steps_per_epoch = source.len().max(target.len()).div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let batch_seed = derive_seed(cfg.seed, &[5]);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut sums = LossBreakdown::default();
        let schedule = paired_batches(
            source.len(),
            target.len(),
            cfg.batch_size,
            batch_seed,
            epoch as u64,
        )?;
        for pair in &schedule {
            let batch = DomainBatch {
                source_x: source.features().select_rows(&pair.source),
                source_y: pair.source.iter().map(|&i| labels[i]).collect(),
                target_x: target.features().select_rows(&pair.target),
            };
            let progress = global as f64 / total_steps;
            let br = step(&mut models, &mut opt, &names, &batch, cfg, progress)
                .map_err(|e| with_step_context(e, epoch, global))?;
            accumulate(&mut sums, &br);
            global += 1;
        }
        let n = schedule.len() as f64;
        let losses = LossBreakdown {
            clc: sums.clc / n,
            dis: sums.dis / n,
            im: sums.im / n,
            mcc: sums.mcc / n,
            mmd: sums.mmd / n,
            plmmd: sums.plmmd / n,
            composite: sums.composite / n,
            lambda: sums.lambda / n,
        };
        let metrics = EpochMetrics {
            epoch,
            losses,
            source_accuracy: evaluate(&models, source)?,
            target_accuracy: target_eval.map(|t| evaluate(&models, t)).transpose()?,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics)?;
        history.push(metrics);
    }
    Ok((models, history))
}

fn accumulate(sums: &mut LossBreakdown, br: &LossBreakdown) {
    sums.clc += br.clc;
    sums.dis += br.dis;
    sums.im += br.im;
    sums.mcc += br.mcc;
    sums.mmd += br.mmd;
    sums.plmmd += br.plmmd;
    sums.composite += br.composite;
    sums.lambda += br.lambda;
}

fn with_step_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

fn step(
    models: &mut Models,
    opt: &mut AdamW,
    names: &[String],
    batch: &DomainBatch,
    cfg: &TrainConfig,
    progress: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (grads, br) = {
        let bound = models.bind(&mut tape)?;
        let (loss, br) = composite_loss(&mut tape, &bound, batch, cfg, progress)?;
        if !br.composite.is_finite() {
            return Err(Error::NonFinite(format!(
                "composite loss; breakdown {br:?}"
            )));
        }
        let g = tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = bound
            .vars()
            .into_iter()
            .map(|v| g.get(v).cloned())
            .collect();
        (grads, br)
    };
    opt.step(&mut models.params_mut(), &grads, names)?;
    Ok(br)
}
