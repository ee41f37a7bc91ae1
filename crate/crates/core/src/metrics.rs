//! Displacement and likelihood metrics, aggregation with standard errors,
//! and significance tests.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::batch::{scene_examples, AgentExample, ObservationBatch};
use crate::error::{Error, Result};
use crate::model::{Haicu, TrajectoryDistribution};
use crate::scene::{Scene, Vec2};

fn check_lengths(pred: &[Vec2], gt: &[Vec2], horizon: usize) -> Result<()> {
    if horizon == 0 || pred.len() < horizon || gt.len() < horizon {
        return Err(Error::DimensionMismatch(format!(
            "horizon {horizon} with prediction of {} and ground truth of {} steps",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn l2(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean L2 distance over the first `horizon` steps (m).
pub fn ade(pred: &[Vec2], gt: &[Vec2], horizon: usize) -> Result<f64> {
    check_lengths(pred, gt, horizon)?;
    Ok(pred.iter().zip(gt).take(horizon).map(|(&p, &g)| l2(p, g)).sum::<f64>() / horizon as f64)
}

/// L2 distance at step `horizon` (m).
pub fn fde(pred: &[Vec2], gt: &[Vec2], horizon: usize) -> Result<f64> {
    check_lengths(pred, gt, horizon)?;
    Ok(l2(pred[horizon - 1], gt[horizon - 1]))
}

/// `ln sum_z pi_z N(x; mu_z, Sigma_z)` at step index `step`.
pub fn mixture_log_density(dist: &TrajectoryDistribution, step: usize, x: Vec2) -> f64 {
    let terms: Vec<f64> = dist
        .modes
        .iter()
        .filter(|m| m.weight > 0.0)
        .map(|m| m.weight.ln() + m.positions[step].log_density(x))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllMode {
    Average,
    Final,
}

/// Negative log-likelihood of the ground truth (nats).
pub fn nll(dist: &TrajectoryDistribution, gt: &[Vec2], horizon: usize, mode: NllMode) -> Result<f64> {
    if horizon == 0 || dist.horizon() < horizon || gt.len() < horizon {
        return Err(Error::DimensionMismatch(format!(
            "horizon {horizon} with distribution of {} and ground truth of {} steps",
            dist.horizon(),
            gt.len()
        )));
    }
    Ok(match mode {
        NllMode::Average => -(0..horizon).map(|t| mixture_log_density(dist, t, gt[t])).sum::<f64>() / horizon as f64,
        NllMode::Final => -mixture_log_density(dist, horizon - 1, gt[horizon - 1]),
    })
}

/// Best ADE and best FDE over `n_samples` sampled trajectories.
pub fn min_ade_fde(
    dist: &TrajectoryDistribution,
    gt: &[Vec2],
    horizon: usize,
    n_samples: usize,
    rng: &mut impl rand::Rng,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
    }
    let samples = dist.truncated(horizon).sample(n_samples, rng);
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in &samples {
        best.0 = best.0.min(ade(s, gt, horizon)?);
        best.1 = best.1.min(fde(s, gt, horizon)?);
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over the square root of the count.
    pub se: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            se: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        f64::NAN
    };
    Summary { mean, se, n }
}

/// Two-tailed p-value of the unpaired Student t-test with pooled variance.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return Err(Error::NoEligibleSamples("t-test needs at least two samples per group".into()));
    }
    let (sa, sb) = (summarize(a), summarize(b));
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    let df = (na + nb - 2) as f64;
    let pooled = (var(a, sa.mean) + var(b, sb.mean)) / df;
    let se = (pooled * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
    if se == 0.0 {
        return Ok(if sa.mean == sb.mean { 1.0 } else { 0.0 });
    }
    let t = (sa.mean - sb.mean) / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

pub const METRIC_NAMES: [&str; 6] = ["ade", "fde", "anll", "fnll", "min_ade", "min_fde"];

/// Per-sample metric values, one entry per (agent, timestep).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
    pub anll: Vec<f64>,
    pub fnll: Vec<f64>,
    pub min_ade: Vec<f64>,
    pub min_fde: Vec<f64>,
}

impl MetricValues {
    pub fn get(&self, metric: &str) -> Option<&[f64]> {
        Some(match metric {
            "ade" => &self.ade,
            "fde" => &self.fde,
            "anll" => &self.anll,
            "fnll" => &self.fnll,
            "min_ade" => &self.min_ade,
            "min_fde" => &self.min_fde,
            _ => return None,
        })
    }

    fn push(&mut self, v: [f64; 6]) {
        self.ade.push(v[0]);
        self.fde.push(v[1]);
        self.anll.push(v[2]);
        self.fnll.push(v[3]);
        self.min_ade.push(v[4]);
        self.min_fde.push(v[5]);
    }

    pub fn summaries(&self) -> BTreeMap<String, Summary> {
        METRIC_NAMES
            .iter()
            .map(|&m| (m.to_string(), summarize(self.get(m).expect("known metric"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub seconds: f64,
    pub steps: usize,
    pub overall: BTreeMap<String, Summary>,
    pub per_class: BTreeMap<String, BTreeMap<String, Summary>>,
    #[serde(skip)]
    pub values: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub seconds: f64,
    pub model_a: String,
    pub model_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub num_scenes: usize,
    pub horizons: Vec<HorizonReport>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizons_s: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Evaluate every `stride`-th timestep.
    pub stride: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons_s: vec![1.0, 2.0, 3.0],
            n_samples: 20,
            seed: 0,
            stride: 1,
            batch_size: 256,
        }
    }
}

/// Distributions for `examples`, predicted in chunks.
pub fn predict_examples(
    model: &Haicu,
    examples: &[AgentExample],
    steps: usize,
    batch_size: usize,
) -> Result<Vec<TrajectoryDistribution>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = ObservationBatch::new(chunk.to_vec(), model.config.num_classes(), model.config.history + 1, model.config.dt)?;
        out.extend(model.predict_distributions(&batch, steps)?);
    }
    Ok(out)
}

/// Mean average NLL and mean ADE of the most likely trajectory.
pub fn anll_and_ade(model: &Haicu, examples: &[AgentExample], steps: usize, batch_size: usize) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::NoEligibleSamples("no examples to score".into()));
    }
    let dists = predict_examples(model, examples, steps, batch_size)?;
    let (mut nll_sum, mut ade_sum) = (0.0, 0.0);
    for (d, ex) in dists.iter().zip(examples) {
        let gt = absolute_future(ex);
        nll_sum += nll(d, &gt, steps, NllMode::Average)?;
        ade_sum += ade(&d.most_likely(), &gt, steps)?;
    }
    let n = examples.len() as f64;
    Ok((nll_sum / n, ade_sum / n))
}

pub fn absolute_future(ex: &AgentExample) -> Vec<Vec2> {
    ex.future
        .as_ref()
        .map(|f| f.iter().map(|p| [p[0] + ex.origin[0], p[1] + ex.origin[1]]).collect())
        .unwrap_or_default()
}

pub fn horizon_steps(seconds: f64, dt: f64) -> Result<usize> {
    let steps = (seconds / dt).round();
    if !(steps >= 1.0) || ((steps * dt) - seconds).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!("horizon {seconds} s is not a positive multiple of dt {dt}")));
    }
    Ok(steps as usize)
}

/// Scores `model` on every eligible (agent, timestep) of `scenes`, separately
/// for each horizon.
pub fn evaluate(model: &Haicu, name: &str, scenes: &[Scene], cfg: &EvalConfig) -> Result<EvalReport> {
    let names = &model.config.class_names;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut horizons = Vec::with_capacity(cfg.horizons_s.len());
    for &seconds in &cfg.horizons_s {
        let steps = horizon_steps(seconds, model.config.dt)?;
        let bcfg = model.config.batch_config(steps);
        let mut examples = Vec::new();
        for scene in scenes {
            if scene.class_names != *names {
                return Err(Error::DimensionMismatch(format!(
                    "scene {} classes {:?} differ from the model's {:?}",
                    scene.scene_id, scene.class_names, names
                )));
            }
            examples.extend(scene_examples(scene, &bcfg, cfg.stride)?);
        }
        if examples.is_empty() {
            return Err(Error::NoEligibleSamples(format!("no agent has a {seconds} s future")));
        }
        let dists = predict_examples(model, &examples, steps, cfg.batch_size)?;
        let mut overall = MetricValues::default();
        let mut per_class: BTreeMap<String, MetricValues> = BTreeMap::new();
        for (d, ex) in dists.iter().zip(&examples) {
            let gt = absolute_future(ex);
            let ml = d.most_likely();
            let (mina, minf) = min_ade_fde(d, &gt, steps, cfg.n_samples, &mut rng)?;
            let v = [
                ade(&ml, &gt, steps)?,
                fde(&ml, &gt, steps)?,
                nll(d, &gt, steps, NllMode::Average)?,
                nll(d, &gt, steps, NllMode::Final)?,
                mina,
                minf,
            ];
            overall.push(v);
            per_class.entry(names[ex.class_label].clone()).or_default().push(v);
        }
        horizons.push(HorizonReport {
            seconds,
            steps,
            overall: overall.summaries(),
            per_class: per_class.iter().map(|(k, v)| (k.clone(), v.summaries())).collect(),
            values: overall,
        });
    }
    Ok(EvalReport {
        model: name.to_string(),
        num_scenes: scenes.len(),
        horizons,
        comparisons: Vec::new(),
    })
}

/// Unpaired t-tests of every metric at every shared horizon.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for ha in &a.horizons {
        let Some(hb) = b.horizons.iter().find(|h| h.steps == ha.steps) else { continue };
        for metric in METRIC_NAMES {
            let (va, vb) = (ha.values.get(metric).expect("known"), hb.values.get(metric).expect("known"));
            out.push(Comparison {
                metric: metric.to_string(),
                seconds: ha.seconds,
                model_a: a.model.clone(),
                model_b: b.model.clone(),
                mean_a: summarize(va).mean,
                mean_b: summarize(vb).mean,
                p_value: t_test(va, vb)?,
            });
        }
    }
    Ok(out)
}

impl EvalReport {
    /// Plain-text table with one row per class plus an overall row and
    /// `mean ± SE` cells per metric and horizon.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<14}", "class");
        for h in &self.horizons {
            for m in ["ADE", "FDE", "ANLL", "FNLL"] {
                header.push_str(&format!(" {:>16}", format!("{m}@{}s", h.seconds)));
            }
        }
        let mut lines = vec![format!("model: {}", self.model), header];
        let mut classes: Vec<String> = self
            .horizons
            .iter()
            .flat_map(|h| h.per_class.keys().cloned())
            .collect();
        classes.sort();
        classes.dedup();
        classes.push("overall".into());
        for class in classes {
            let mut row = format!("{class:<14}");
            for h in &self.horizons {
                let table = if class == "overall" { Some(&h.overall) } else { h.per_class.get(&class) };
                for m in ["ade", "fde", "anll", "fnll"] {
                    let cell = match table.and_then(|t| t.get(m)) {
                        Some(s) => format!("{:.2} ± {:.2}", s.mean, s.se),
                        None => "-".into(),
                    };
                    row.push_str(&format!(" {cell:>16}"));
                }
            }
            lines.push(row);
        }
        for c in &self.comparisons {
            lines.push(format!(
                "{} vs {} {}@{}s: {:.3} vs {:.3}, p = {:.4}",
                c.model_a, c.model_b, c.metric, c.seconds, c.mean_a, c.mean_b, c.p_value
            ));
        }
        lines.join("\n") + "\n"
    }
}
