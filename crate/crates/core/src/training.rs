//! The training objective and optimization loop.
//!
//! The loss is the negated objective
//! `E_q[log p(y|x,z,c)] - beta * KL(q(z|x,y) || p(z|x,c)) + I_q`, with the
//! expectation over `z` computed by enumerating every latent value and `I_q`
//! approximated from the batch-marginal of the prior.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{scene_examples, AgentExample, ObservationBatch};
use crate::dataset::AugmentationConfig;
use crate::error::{Error, Result};
use crate::metrics::anll_and_ade;
use crate::model::Haicu;
use crate::nn::{clip_global_norm, Adam, Bound};
use crate::scene::Scene;
use crate::tape::{Matrix, Tape, Var};

/// `start + (end - start) * sigmoid(steepness * (iteration - midpoint))`.
/// Unset midpoint and steepness are resolved from the run length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub midpoint: Option<f64>,
    pub steepness: Option<f64>,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            start: 1e-2,
            end: 1.0,
            midpoint: None,
            steepness: None,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.end >= self.start && self.end.is_finite()) {
            return Err(Error::Config(format!(
                "beta schedule needs 0 <= start <= end, got {} and {}",
                self.start, self.end
            )));
        }
        if self.steepness.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::Config("beta steepness must be non-negative".into()));
        }
        Ok(())
    }

    /// Midpoint at a quarter of the run; the transition spans roughly a
    /// tenth of it, so iteration 0 sits within 1% of `start`.
    pub fn resolved(&self, total_iterations: usize) -> BetaSchedule {
        let total = total_iterations.max(1) as f64;
        BetaSchedule {
            midpoint: Some(self.midpoint.unwrap_or(0.25 * total)),
            steepness: Some(self.steepness.unwrap_or(40.0 / total)),
            ..self.clone()
        }
    }
}

pub fn beta_at(iteration: usize, schedule: &BetaSchedule) -> f64 {
    let mid = schedule.midpoint.unwrap_or(0.0);
    let k = schedule.steepness.unwrap_or(1.0);
    let s = 1.0 / (1.0 + (-(k * (iteration as f64 - mid))).exp());
    schedule.start + (schedule.end - schedule.start) * s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a better validation ANLL.
    pub patience: usize,
    pub seed: u64,
    pub beta: BetaSchedule,
    /// Coefficient on the mutual-information term.
    pub mi_weight: f64,
    pub grad_clip: Option<f64>,
    pub augmentation: AugmentationConfig,
    /// Use every `stride`-th timestep of the training scenes.
    pub example_stride: usize,
    pub val_stride: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            beta: BetaSchedule::default(),
            mi_weight: 1.0,
            grad_clip: Some(10.0),
            augmentation: AugmentationConfig::default(),
            example_stride: 1,
            val_stride: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.mi_weight < 0.0 {
            return Err(Error::Config("mi_weight must be non-negative".into()));
        }
        self.beta.validate()?;
        self.augmentation.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    /// Batch mean of `E_q[log p(y | x, z, c)]` (nats).
    pub reconstruction: f64,
    /// Batch mean of `KL(q || p)`.
    pub kl: f64,
    pub mutual_info: f64,
    pub beta: f64,
}

/// Sum over steps of the log-density of the ground truth under each row's
/// position Gaussians; rows are `b * latent + z`.
fn trajectory_log_density(t: &mut Tape, head: &crate::model::HeadOutput, future: &[Matrix]) -> Var {
    let mut total = None;
    for (s, fut) in future.iter().enumerate() {
        let [mx, my] = head.mean[s];
        let [sxx, sxy, syy] = head.cov[s];
        let gx = t.constant(fut.column(0).to_owned().insert_axis(ndarray::Axis(1)));
        let gy = t.constant(fut.column(1).to_owned().insert_axis(ndarray::Axis(1)));
        let dx = t.sub(gx, mx);
        let dy = t.sub(gy, my);
        let a = t.mul(sxx, syy);
        let b = t.square(sxy);
        let det = t.sub(a, b);
        let dx2 = t.square(dx);
        let q1 = t.mul(syy, dx2);
        let dxy = t.mul(dx, dy);
        let q2 = t.mul(sxy, dxy);
        let q2 = t.scale(q2, 2.0);
        let dy2 = t.square(dy);
        let q3 = t.mul(sxx, dy2);
        let q = t.sub(q1, q2);
        let q = t.add(q, q3);
        let quad = t.div(q, det);
        let ln_det = t.ln(det);
        let l = t.add(ln_det, quad);
        let l = t.scale(l, -0.5);
        let l = t.add_scalar(l, -(2.0 * std::f64::consts::PI).ln());
        total = Some(match total {
            None => l,
            Some(acc) => t.add(acc, l),
        });
    }
    total.expect("at least one step")
}

fn elbo_on(t: &mut Tape, p: &Bound, model: &Haicu, batch: &ObservationBatch, beta: f64, mi_weight: f64) -> Result<(Var, LossTerms)> {
    let horizon = model.config.horizon;
    if !batch.has_futures(horizon) {
        return Err(Error::InvalidParameter(format!("training needs {horizon}-step futures")));
    }
    let z = model.config.latent;
    let b = batch.len();
    let fwd = model.forward_on(t, p, batch, horizon)?;
    let log_q = model.log_posterior_on(t, p, fwd.embedding, batch)?;
    let future: Vec<Matrix> = (0..horizon)
        .map(|s| {
            Array2::from_shape_fn((b * z, 2), |(r, j)| batch.examples[r / z].future.as_ref().expect("checked")[s][j])
        })
        .collect();
    let per_head: Vec<Var> = fwd.heads.iter().map(|h| trajectory_log_density(t, h, &future)).collect();
    let log_lik = if per_head.len() == 1 {
        per_head[0]
    } else {
        // per-trajectory mixture over heads weighted by current probabilities
        let k = per_head.len();
        let ln_mix = t.constant(Array2::from_shape_fn((b * z, k), |(r, j)| {
            batch.examples[r / z].current_probs()[j].ln()
        }));
        let stacked = t.concat_cols(&per_head);
        let weighted = t.add(stacked, ln_mix);
        t.logsumexp(weighted)
    };
    let log_lik = t.reshape(log_lik, b, z);
    let q = t.exp(log_q);
    let rec = t.mul(q, log_lik);
    let rec = t.sum_cols(rec);
    let diff = t.sub(log_q, fwd.log_prior);
    let kl = t.mul(q, diff);
    let kl = t.sum_cols(kl);
    let prior = t.exp(fwd.log_prior);
    let marginal = t.sum_rows(prior);
    let marginal = t.scale(marginal, 1.0 / b as f64);
    let ln_marginal = t.ln(marginal);
    let h_marg = t.mul(marginal, ln_marginal);
    let h_marg = t.sum_all(h_marg);
    let h_marg = t.neg(h_marg);
    let h_cond = t.mul(prior, fwd.log_prior);
    let h_cond = t.sum_all(h_cond);
    let h_cond = t.scale(h_cond, -1.0 / b as f64);
    let mi = t.sub(h_marg, h_cond);
    let bkl = t.scale(kl, beta);
    let per_example = t.sub(bkl, rec);
    let mean = t.mean_all(per_example);
    let wmi = t.scale(mi, mi_weight);
    let loss = t.sub(mean, wmi);
    let mean_of = |t: &Tape, v: Var| t.value(v).mean().unwrap_or(f64::NAN);
    let terms = LossTerms {
        loss: t.scalar(loss),
        reconstruction: mean_of(t, rec),
        kl: mean_of(t, kl),
        mutual_info: t.scalar(mi),
        beta,
    };
    Ok((loss, terms))
}

/// Loss value and term breakdown without gradients.
pub fn elbo_loss(model: &Haicu, batch: &ObservationBatch, beta: f64, mi_weight: f64) -> Result<LossTerms> {
    let mut t = Tape::new();
    let p = model.params.bind(&mut t);
    Ok(elbo_on(&mut t, &p, model, batch, beta, mi_weight)?.1)
}

/// Loss and its gradient for every parameter, in store order.
pub fn loss_and_gradients(model: &Haicu, batch: &ObservationBatch, beta: f64, mi_weight: f64) -> Result<(LossTerms, Vec<Matrix>)> {
    let mut t = Tape::new();
    let p = model.params.bind(&mut t);
    let (loss, terms) = elbo_on(&mut t, &p, model, batch, beta, mi_weight)?;
    let grads = p.gradients(&t.backward(loss), &model.params);
    Ok((terms, grads))
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter entry, using
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(model: &mut Haicu, batch: &ObservationBatch, beta: f64, mi_weight: f64, eps: f64, floor: f64) -> Result<f64> {
    let (_, grads) = loss_and_gradients(model, batch, beta, mi_weight)?;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut eval = |d: f64| -> Result<f64> {
                model.params.values_mut()[pi].as_slice_mut().expect("contiguous")[j] += d;
                let v = elbo_loss(model, batch, beta, mi_weight).map(|t| t.loss);
                model.params.values_mut()[pi].as_slice_mut().expect("contiguous")[j] -= d;
                v
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let analytic = g.as_slice().expect("contiguous")[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_ADE")]
    pub val_ade: f64,
    #[serde(rename = "val_ANLL")]
    pub val_anll: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_anll: f64,
    pub epochs_run: usize,
    pub curve: Vec<CurvePoint>,
}

pub fn collect_examples(model: &Haicu, scenes: &[Scene], stride: usize) -> Result<Vec<AgentExample>> {
    let cfg = model.config.batch_config(model.config.horizon);
    let mut out = Vec::new();
    for s in scenes {
        if s.class_names != model.config.class_names {
            return Err(Error::DimensionMismatch(format!(
                "scene {} classes {:?} differ from the model's {:?}",
                s.scene_id, s.class_names, model.config.class_names
            )));
        }
        out.extend(scene_examples(s, &cfg, stride)?);
    }
    Ok(out)
}

/// Trains in place, leaving the best-validation weights in `model`.
/// Each curve point is also appended to `curve_log` as one JSON line.
pub fn train(model: &mut Haicu, train_scenes: &[Scene], val_scenes: &[Scene], config: &TrainingConfig, curve_log: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ex = collect_examples(model, train_scenes, config.example_stride)?;
    let val_ex = collect_examples(model, val_scenes, config.val_stride)?;
    if train_ex.is_empty() || val_ex.is_empty() {
        return Err(Error::NoEligibleSamples(format!(
            "{} training and {} validation examples with a full {}-step future",
            train_ex.len(),
            val_ex.len(),
            model.config.horizon
        )));
    }
    let mut log = match curve_log {
        Some(p) => Some(BufWriter::new(File::options().create(true).append(true).open(p)?)),
        None => None,
    };
    let batches_per_epoch = train_ex.len().div_ceil(config.batch_size);
    let schedule = config.beta.resolved(batches_per_epoch * config.max_epochs);
    let angles = config.augmentation.angles();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let (k, window, dt) = (model.config.num_classes(), model.config.history + 1, model.config.dt);
    let horizon = model.config.horizon;
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut iteration = 0;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut beta = schedule.start;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let gamma = if config.augmentation.enabled { angles[rng.gen_range(0..angles.len())] } else { 0.0 };
            let examples = idx.iter().map(|&i| train_ex[i].rotated(gamma)).collect();
            let batch = ObservationBatch::new(examples, k, window, dt)?;
            beta = beta_at(iteration, &schedule);
            let (terms, mut grads) = loss_and_gradients(model, &batch, beta, config.mi_weight)?;
            let finite = terms.loss.is_finite() && grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: terms.loss,
                });
            }
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(&mut model.params, &grads);
            loss_sum += terms.loss;
            iteration += 1;
        }
        let (val_anll, val_ade) = anll_and_ade(model, &val_ex, horizon, config.batch_size)?;
        let point = CurvePoint {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_ade,
            val_anll,
            beta,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val ANLL {val_anll:.4} val ADE {val_ade:.3} beta {beta:.3}",
            point.train_loss
        );
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&point)?)?;
            w.flush()?;
        }
        curve.push(point);
        if val_anll < best.0 {
            best = (val_anll, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience.max(1) {
                break;
            }
        }
    }
    let epochs_run = curve.len();
    model.params = best.2;
    Ok(TrainOutcome {
        best_epoch: best.1,
        best_val_anll: best.0,
        epochs_run,
        curve,
    })
}
