//! The training loop: supervised cross-entropy plus the two distillation
//! losses, optimized with plain gradient descent under a poly learning-rate
//! schedule with constant-factor warmup.
//!
//! One step processes one sample. The forward pass encodes every available
//! modality with shared weights, fuses the maps, and derives all loss terms
//! from that single pass; the breakdown records each term's weighted
//! contribution so the total is their sum by construction. Loss terms with
//! weight exactly 0 are never placed on the tape, which keeps a
//! supervised-only configuration bit-identical to a hand-built supervised
//! tape.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::IGNORE_LABEL;
use crate::lscd::{
    inter_modal_corr_student, loss_cr, loss_se, map_pool, KlOrder, TeacherEmbeddings, UpsampleMode,
};
use crate::mff::{fuse, AggregateMode, FuseConfig, Modality, ModalityBundle};
use crate::segnet::{downsample_labels, encode, seg_head, ModelDims, ModelParams};
use crate::synthdata::{Dataset, SceneSample};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Base learning rate. The reference setting is 6e-5 for a large
    /// backbone under AdamW; this loop is plain gradient descent on a tiny
    /// patch MLP with batch size 1, which needs far larger steps. 0.1 is
    /// the largest rate that trains stably on the default benchmark —
    /// smaller rates leave the model stuck predicting the background
    /// prior, while 0.3 destabilizes the distillation terms.
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub poly_power: f64,
    /// Distillation softmax temperature (both losses).
    pub tau: f64,
    /// Fusion reweighting temperature.
    pub tau_w: f64,
    pub weight_sup: f64,
    pub weight_cr: f64,
    pub weight_se: f64,
    pub weight_base: f64,
    pub aggregate: AggregateMode,
    pub kl_order: KlOrder,
    pub fuse_steps: usize,
    /// Optional auxiliary: mean over available modalities of the
    /// cross-entropy of each un-fused map. Off by default.
    pub enable_base_loss: bool,
    /// Probability of masking each non-R modality, drawn independently per
    /// step. 0 disables dropout and draws nothing.
    pub modality_dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            total_steps: 2000,
            warmup_steps: 100,
            poly_power: 0.9,
            tau: 1.0,
            tau_w: 1.0,
            weight_sup: 1.0,
            weight_cr: 1.0,
            weight_se: 1.0,
            weight_base: 1.0,
            aggregate: AggregateMode::Mean,
            kl_order: KlOrder::TeacherTarget,
            fuse_steps: 2,
            enable_base_loss: false,
            modality_dropout_prob: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::domain(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::domain(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.tau > 0.0 && self.tau_w > 0.0) {
            return Err(Error::domain("temperatures must be positive"));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::domain(format!("poly power must be positive, got {}", self.poly_power)));
        }
        for (name, w) in [
            ("weight_sup", self.weight_sup),
            ("weight_cr", self.weight_cr),
            ("weight_se", self.weight_se),
            ("weight_base", self.weight_base),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::domain(format!("{} must be finite and >= 0, got {}", name, w)));
            }
        }
        if self.fuse_steps == 0 {
            return Err(Error::domain("fuse_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout_prob) {
            return Err(Error::domain(format!(
                "modality_dropout_prob must lie in [0,1], got {}",
                self.modality_dropout_prob
            )));
        }
        Ok(())
    }

    pub fn fuse_config(&self) -> FuseConfig {
        FuseConfig {
            steps: self.fuse_steps,
            tau_w: self.tau_w,
            aggregate: self.aggregate,
            ..FuseConfig::default()
        }
    }
}

/// Poly learning-rate schedule with constant warmup: steps below
/// `warmup_steps` run at 0.1·base, after which the rate decays as
/// base·(1 − progress)^power, reaching exactly 0 at the final step. The
/// jump from warmup level to poly level is intentional.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.total_steps == 0 {
        return Err(Error::domain("schedule undefined for a zero-step run"));
    }
    if step > cfg.total_steps {
        return Err(Error::domain(format!(
            "step {} beyond total_steps {}",
            step, cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(0.1 * cfg.base_lr);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    Ok(cfg.base_lr * (1.0 - progress).powf(cfg.poly_power))
}

/// Weighted loss contributions for one step; `l_total` is their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_cr: f64,
    pub l_se: f64,
    pub l_base: Option<f64>,
    pub l_total: f64,
}

fn weighted(tape: &Tape, term: Tensor, weight: f64) -> Result<Tensor> {
    if weight == 1.0 {
        Ok(term)
    } else {
        tape.mul_scalar(&term, weight)
    }
}

/// Builds every loss term for one sample on `tape` and returns the total
/// plus the breakdown. `params` must already be watched on the tape if
/// gradients are wanted. Terms with weight exactly 0 never touch the tape.
pub fn forward_losses(
    tape: &Tape,
    params: &ModelParams,
    sample: &SceneSample,
    available: &[Modality],
    teacher: &TeacherEmbeddings,
    cfg: &TrainConfig,
) -> Result<(Tensor, LossBreakdown)> {
    cfg.validate()?;
    if available.is_empty() {
        return Err(Error::train("no modalities available for this step"));
    }
    for (name, t) in params.named_tensors() {
        if t.has_non_finite() {
            return Err(Error::train(format!("parameter {} holds non-finite values", name)));
        }
    }
    let dims = params.dims();
    if teacher.num_classes() < dims.classes {
        return Err(Error::train(format!(
            "teacher covers {} classes but the model predicts {}",
            teacher.num_classes(),
            dims.classes
        )));
    }

    let mut pairs = Vec::with_capacity(available.len());
    for m in Modality::ALL {
        if available.contains(&m) {
            pairs.push((m, encode(tape, sample.raster(m), &params.enc)?));
        }
    }
    let bundle = ModalityBundle::from_pairs(pairs)?;
    let (f_ma, _) = fuse(tape, &bundle, &cfg.fuse_config())?;

    let y_low = downsample_labels(&sample.y, dims.patch)?;
    let mut total: Option<Tensor> = None;
    let mut add_term = |tape: &Tape, t: &Tensor| -> Result<f64> {
        let v = t.item()?;
        total = Some(match total.take() {
            None => t.clone(),
            Some(acc) => tape.add(&acc, t)?,
        });
        Ok(v)
    };

    let mut l_sup = 0.0;
    if cfg.weight_sup != 0.0 {
        let logits = seg_head(tape, &f_ma, &params.head)?;
        let term = weighted(tape, tape.cross_entropy(&logits, &y_low, IGNORE_LABEL)?, cfg.weight_sup)?;
        l_sup = add_term(tape, &term)?;
    }
    let mut l_cr = 0.0;
    if cfg.weight_cr != 0.0 {
        let m_f = inter_modal_corr_student(tape, &bundle, &f_ma)?;
        let m_e = teacher.inter_modal_corr(&bundle.available())?;
        let term = weighted(tape, loss_cr(tape, &m_f, &m_e, cfg.tau, cfg.kl_order)?, cfg.weight_cr)?;
        l_cr = add_term(tape, &term)?;
    }
    let mut l_se = 0.0;
    if cfg.weight_se != 0.0 {
        let reps = map_pool(tape, &f_ma, &sample.y, IGNORE_LABEL, dims.classes, UpsampleMode::Bilinear)?;
        let term = weighted(tape, loss_se(tape, &reps, teacher, cfg.tau, cfg.kl_order)?, cfg.weight_se)?;
        l_se = add_term(tape, &term)?;
    }
    let mut l_base = None;
    if cfg.enable_base_loss && cfg.weight_base != 0.0 {
        let mut acc: Option<Tensor> = None;
        for m in bundle.available() {
            let logits_m = seg_head(tape, bundle.get(m).expect("available"), &params.head)?;
            let ce = tape.cross_entropy(&logits_m, &y_low, IGNORE_LABEL)?;
            acc = Some(match acc {
                None => ce,
                Some(a) => tape.add(&a, &ce)?,
            });
        }
        let mean = tape.mul_scalar(&acc.expect("nonempty"), 1.0 / bundle.available().len() as f64)?;
        let term = weighted(tape, mean, cfg.weight_base)?;
        l_base = Some(add_term(tape, &term)?);
    }

    let total = total.unwrap_or_else(|| Tensor::scalar(0.0));
    let l_total = total.item()?;
    let breakdown = LossBreakdown { l_sup, l_cr, l_se, l_base, l_total };
    if !l_total.is_finite()
        || !l_sup.is_finite()
        || !l_cr.is_finite()
        || !l_se.is_finite()
        || l_base.map_or(false, |v| !v.is_finite())
    {
        return Err(Error::train(format!(
            "non-finite loss (sup {} cr {} se {} base {:?} total {})",
            l_sup, l_cr, l_se, l_base, l_total
        )));
    }
    Ok((total, breakdown))
}

/// One gradient-descent step on one sample. Returns the updated parameters
/// and the loss breakdown; if every active weight is 0 the parameters are
/// returned untouched and no backward pass runs.
pub fn train_step(
    params: &ModelParams,
    sample: &SceneSample,
    available: &[Modality],
    teacher: &TeacherEmbeddings,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(ModelParams, LossBreakdown)> {
    let lr = lr_schedule(step, cfg)?;
    let no_active_term = cfg.weight_sup == 0.0
        && cfg.weight_cr == 0.0
        && cfg.weight_se == 0.0
        && !(cfg.enable_base_loss && cfg.weight_base != 0.0);
    if no_active_term {
        let breakdown = LossBreakdown { l_sup: 0.0, l_cr: 0.0, l_se: 0.0, l_base: None, l_total: 0.0 };
        return Ok((params.clone(), breakdown));
    }

    let tape = Tape::new();
    let watched = params.watched(&tape);
    let (total, breakdown) = forward_losses(&tape, &watched, sample, available, teacher, cfg)?;
    let grads = tape.backward(&total)?;

    let mut updated = Vec::with_capacity(6);
    for (name, t) in watched.named_tensors() {
        let next = match grads.wrt(t) {
            None => t.detach(),
            Some(g) => {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::train(format!("non-finite gradient for {}", name)));
                }
                let stepped: Vec<f64> =
                    t.data().iter().zip(g.data()).map(|(p, gi)| p - lr * gi).collect();
                Tensor::from_vec(t.shape().to_vec(), stepped)?
            }
        };
        updated.push(next);
    }
    let dims = params.dims();
    let next = ModelParams {
        enc: crate::segnet::EncoderParams {
            patch: dims.patch,
            width: dims.width,
            w1: updated[0].clone(),
            b1: updated[1].clone(),
            w2: updated[2].clone(),
            b2: updated[3].clone(),
        },
        head: crate::segnet::HeadParams { w: updated[4].clone(), b: updated[5].clone() },
    };
    Ok((next, breakdown))
}

/// One row of the training curve. Values are the weighted contributions;
/// `l_base` prints as 0 when the auxiliary loss is disabled.
#[derive(Clone, Copy, Debug)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<CurveRow>,
}

/// Runs the full loop over the dataset's train split: seeded shuffling
/// (reshuffled each epoch), optional per-step modality dropout on the
/// non-R modalities, one sample per step. A zero-step run returns the
/// freshly initialized parameters and an empty curve.
pub fn train_loop(
    dataset: &Dataset,
    teacher: &TeacherEmbeddings,
    dims: &ModelDims,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dims.validate()?;
    if dataset.manifest.train_count == 0 {
        return Err(Error::train("dataset has no training samples"));
    }
    if dataset.manifest.num_classes != dims.classes {
        return Err(Error::train(format!(
            "dataset has {} classes but the model predicts {}",
            dataset.manifest.num_classes, dims.classes
        )));
    }

    let mut params = ModelParams::init(cfg.seed, dims)?;
    let mut curve = Vec::with_capacity(cfg.total_steps);
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome { params, curve });
    }

    let n = dataset.manifest.train_count;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(dataset.load_train(i)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for step in 0..cfg.total_steps {
        if step % n == 0 {
            order.shuffle(&mut rng);
        }
        let sample = &samples[order[step % n]];

        let mut available = vec![Modality::R];
        for m in [Modality::D, Modality::E, Modality::L] {
            let keep = if cfg.modality_dropout_prob > 0.0 {
                rng.gen::<f64>() >= cfg.modality_dropout_prob
            } else {
                true
            };
            if keep {
                available.push(m);
            }
        }
        available.sort();

        let (next, losses) = train_step(&params, sample, &available, teacher, cfg, step)
            .map_err(|e| Error::train(format!("step {}: {}", step, e)))?;
        params = next;
        curve.push(CurveRow { step, lr: lr_schedule(step, cfg)?, losses });
    }
    Ok(TrainOutcome { params, curve })
}

/// Writes the loss curve as `step,lr,L_sup,L_cr,L_se,L_base,L_total`.
pub fn write_curve_csv(path: &Path, curve: &[CurveRow]) -> Result<()> {
    let mut out = String::from("step,lr,L_sup,L_cr,L_se,L_base,L_total\n");
    for row in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.step,
            row.lr,
            row.losses.l_sup,
            row.losses.l_cr,
            row.losses.l_se,
            row.losses.l_base.unwrap_or(0.0),
            row.losses.l_total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
