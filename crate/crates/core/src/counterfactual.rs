//! What-if predictions under overridden class probabilities.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::batch::{History, ObservationBatch};
use crate::dynamics::Gaussian2;
use crate::error::{Error, Result};
use crate::model::{Haicu, TrajectoryDistribution};
use crate::scene::{ClassProbVector, SIMPLEX_TOL};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationPath {
    /// `(1 - lambda) * original + lambda * target`.
    #[default]
    Simplex,
    /// Softmax of the interpolated log-probabilities.
    Logit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Override {
    Keep,
    Uniform,
    OneHot {
        class: usize,
    },
    Custom {
        probs: Vec<f64>,
    },
    Interpolate {
        target: Vec<f64>,
        lambda: f64,
        #[serde(default)]
        path: InterpolationPath,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentOverride {
    pub agent_id: String,
    #[serde(flatten)]
    pub mode: Override,
    /// Absolute timesteps to override; the whole history window when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<Vec<i64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    /// Applied to every agent without its own entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all: Option<Override>,
    #[serde(default)]
    pub agents: Vec<AgentOverride>,
}

impl CounterfactualSpec {
    pub fn all(mode: Override) -> Self {
        CounterfactualSpec {
            all: Some(mode),
            agents: Vec::new(),
        }
    }

    pub fn agent(agent_id: impl Into<String>, mode: Override) -> Self {
        CounterfactualSpec {
            all: None,
            agents: vec![AgentOverride {
                agent_id: agent_id.into(),
                mode,
                timesteps: None,
            }],
        }
    }
}

fn simplex(probs: &[f64], k: usize) -> Result<ClassProbVector> {
    if probs.len() != k {
        return Err(Error::DimensionMismatch(format!("override has {} classes, expected {k}", probs.len())));
    }
    let c = ClassProbVector::new(probs.to_vec()).map_err(Error::InvalidParameter)?;
    if (probs.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParameter(format!("override probabilities {probs:?} do not sum to 1")));
    }
    Ok(c)
}

impl Override {
    fn validate(&self, k: usize) -> Result<()> {
        match self {
            Override::Keep | Override::Uniform => Ok(()),
            Override::OneHot { class } if *class < k => Ok(()),
            Override::OneHot { class } => Err(Error::InvalidParameter(format!("class {class} out of range for K={k}"))),
            Override::Custom { probs } => simplex(probs, k).map(|_| ()),
            Override::Interpolate { target, lambda, .. } => {
                if !(0.0..=1.0).contains(lambda) {
                    return Err(Error::InvalidParameter(format!("lambda {lambda} outside [0, 1]")));
                }
                simplex(target, k).map(|_| ())
            }
        }
    }

    /// The overridden vector for one observed step.
    pub fn apply(&self, original: &[f64]) -> Result<Vec<f64>> {
        let k = original.len();
        Ok(match self {
            Override::Keep => original.to_vec(),
            Override::Uniform => ClassProbVector::uniform(k).probs().to_vec(),
            Override::OneHot { class } => ClassProbVector::one_hot(*class, k).probs().to_vec(),
            Override::Custom { probs } => simplex(probs, k)?.probs().to_vec(),
            Override::Interpolate { target, lambda, path } => {
                let target = simplex(target, k)?;
                if *lambda == 0.0 {
                    return Ok(original.to_vec());
                }
                if *lambda == 1.0 {
                    return Ok(target.probs().to_vec());
                }
                match path {
                    InterpolationPath::Simplex => ClassProbVector::new(original.to_vec())
                        .map_err(Error::InvalidParameter)?
                        .interpolate(&target, *lambda)?
                        .probs()
                        .to_vec(),
                    InterpolationPath::Logit => {
                        let logits: Vec<f64> = original
                            .iter()
                            .zip(target.probs())
                            .map(|(&a, &b)| (1.0 - lambda) * a.max(1e-12).ln() + lambda * b.max(1e-12).ln())
                            .collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.into_iter().map(|x| x / s).collect()
                    }
                }
            }
        })
    }
}

fn override_history(h: &mut History, mode: &Override, timesteps: Option<&BTreeSet<i64>>, current: i64) -> Result<()> {
    let window = h.len();
    for i in 0..window {
        let tau = current - (window - 1 - i) as i64;
        if h.mask[i] && timesteps.is_none_or(|ts| ts.contains(&tau)) {
            h.probs[i] = mode.apply(&h.probs[i])?;
        }
    }
    Ok(())
}

/// Returns a copy of `batch` with class probabilities replaced per `spec`
/// wherever each agent appears, as a predicted agent or as a neighbor.
/// States are untouched.
pub fn apply_counterfactual(batch: &ObservationBatch, spec: &CounterfactualSpec) -> Result<ObservationBatch> {
    let k = batch.num_classes;
    if let Some(all) = &spec.all {
        all.validate(k)?;
    }
    let mut known = BTreeSet::new();
    for e in &batch.examples {
        known.insert(e.agent_id.as_str());
        known.extend(e.neighbors.iter().map(|n| n.agent_id.as_str()));
    }
    for a in &spec.agents {
        if !known.contains(a.agent_id.as_str()) {
            return Err(Error::UnknownAgent(a.agent_id.clone()));
        }
        a.mode.validate(k)?;
    }
    let rule = |id: &str| -> Option<(&Override, Option<BTreeSet<i64>>)> {
        match spec.agents.iter().find(|a| a.agent_id == id) {
            Some(a) => Some((&a.mode, a.timesteps.as_ref().map(|t| t.iter().copied().collect()))),
            None => spec.all.as_ref().map(|m| (m, None)),
        }
    };
    let mut out = batch.clone();
    for e in &mut out.examples {
        let t = e.timestep;
        if let Some((mode, ts)) = rule(&e.agent_id) {
            override_history(&mut e.node, mode, ts.as_ref(), t)?;
        }
        for n in &mut e.neighbors {
            if let Some((mode, ts)) = rule(&n.agent_id) {
                override_history(&mut n.history, mode, ts.as_ref(), t)?;
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Differential entropy (nats) of a Gaussian mixture, using the 2-D
/// unscented sigma points of each component (exact for one component).
pub fn mixture_entropy(components: &[(f64, Gaussian2)]) -> f64 {
    let log_density = |x: [f64; 2]| {
        let terms: Vec<f64> = components
            .iter()
            .filter(|(w, _)| *w > 0.0)
            .map(|(w, g)| w.ln() + g.log_density(x))
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    };
    // n = 2, kappa = 1: centre weight 1/3, four points at sqrt(3) * L columns
    let spread = 3f64.sqrt();
    let mut h = 0.0;
    for (w, g) in components.iter().filter(|(w, _)| *w > 0.0) {
        let a = g.cov[0][0].sqrt();
        let b = if a > 0.0 { g.cov[0][1] / a } else { 0.0 };
        let c = (g.cov[1][1] - b * b).max(0.0).sqrt();
        let cols = [[a, b], [0.0, c]];
        let mut e = log_density(g.mean) / 3.0;
        for col in cols {
            for s in [1.0, -1.0] {
                let x = [g.mean[0] + s * spread * col[0], g.mean[1] + s * spread * col[1]];
                e += log_density(x) / 6.0;
            }
        }
        h -= w * e;
    }
    h
}

/// Mean over steps of the mixture entropy at each step.
pub fn mean_mixture_entropy(dist: &TrajectoryDistribution) -> f64 {
    let steps = dist.horizon();
    (0..steps)
        .map(|t| {
            let comps: Vec<(f64, Gaussian2)> = dist.modes.iter().map(|m| (m.weight, m.positions[t])).collect();
            mixture_entropy(&comps)
        })
        .sum::<f64>()
        / steps as f64
}

/// Mean index-matched mean displacement over steps and modes plus the total
/// variation distance between mode weights.
pub fn divergence(a: &TrajectoryDistribution, b: &TrajectoryDistribution) -> f64 {
    let mut disp = 0.0;
    let mut n = 0usize;
    for (ma, mb) in a.modes.iter().zip(&b.modes) {
        for (ga, gb) in ma.positions.iter().zip(&mb.positions) {
            disp += (ga.mean[0] - gb.mean[0]).hypot(ga.mean[1] - gb.mean[1]);
            n += 1;
        }
    }
    let tv = 0.5 * a.modes.iter().zip(&b.modes).map(|(x, y)| (x.weight - y.weight).abs()).sum::<f64>();
    disp / n.max(1) as f64 + tv
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub lambda: f64,
    pub divergence: f64,
    /// Mean mixture differential entropy per step (nats).
    pub uncertainty: f64,
}

fn probe_batch(batch: &ObservationBatch, agent_id: &str, target: &ClassProbVector, lambda: f64, path: InterpolationPath) -> Result<ObservationBatch> {
    apply_counterfactual(
        batch,
        &CounterfactualSpec::agent(
            agent_id,
            Override::Interpolate {
                target: target.probs().to_vec(),
                lambda,
                path,
            },
        ),
    )
}

fn agent_distribution(model: &Haicu, batch: &ObservationBatch, agent_id: &str, steps: usize) -> Result<TrajectoryDistribution> {
    let idx = batch
        .examples
        .iter()
        .position(|e| e.agent_id == agent_id)
        .ok_or_else(|| Error::UnknownAgent(agent_id.to_string()))?;
    let single = ObservationBatch::new(vec![batch.examples[idx].clone()], batch.num_classes, batch.window, batch.dt)?;
    Ok(model.predict_distributions(&single, steps)?.remove(0))
}

/// Interpolates `agent_id`'s probabilities towards `target` over `lambdas`
/// and reports how far the agent's prediction moves from the `lambda = 0`
/// prediction.
pub fn probe_smoothness(
    model: &Haicu,
    batch: &ObservationBatch,
    agent_id: &str,
    target: &ClassProbVector,
    lambdas: &[f64],
    steps: usize,
    path: InterpolationPath,
) -> Result<Vec<ProbePoint>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidParameter("empty lambda grid".into()));
    }
    let base = agent_distribution(model, &probe_batch(batch, agent_id, target, 0.0, path)?, agent_id, steps)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let d = agent_distribution(model, &probe_batch(batch, agent_id, target, lambda, path)?, agent_id, steps)?;
            Ok(ProbePoint {
                lambda,
                divergence: divergence(&d, &base),
                uncertainty: mean_mixture_entropy(&d),
            })
        })
        .collect()
}

pub fn lambda_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Largest divergence change between neighboring grid points.
    pub max_jump: f64,
    /// Largest local slope from a small finite difference at each point.
    pub max_slope: f64,
    /// `3 * max_slope * grid spacing`.
    pub bound: f64,
    pub passed: bool,
}

/// Empirical Lipschitz check of a probe curve: no jump between neighboring
/// grid points may exceed three times the steepest locally measured slope
/// times the grid spacing.
pub fn lipschitz_check(
    model: &Haicu,
    batch: &ObservationBatch,
    agent_id: &str,
    target: &ClassProbVector,
    n_lambdas: usize,
    steps: usize,
    h: f64,
    path: InterpolationPath,
) -> Result<LipschitzReport> {
    if n_lambdas < 2 {
        return Err(Error::InvalidParameter("need at least two lambda points".into()));
    }
    let grid = lambda_grid(n_lambdas);
    let curve = probe_smoothness(model, batch, agent_id, target, &grid, steps, path)?;
    let shifted: Vec<f64> = grid.iter().map(|&l| if l + h <= 1.0 { l + h } else { l - h }).collect();
    let near = probe_smoothness(model, batch, agent_id, target, &shifted, steps, path)?;
    let max_slope = curve
        .iter()
        .zip(&near)
        .map(|(a, b)| (a.divergence - b.divergence).abs() / h)
        .fold(0.0, f64::max);
    let max_jump = curve
        .windows(2)
        .map(|w| (w[1].divergence - w[0].divergence).abs())
        .fold(0.0, f64::max);
    let bound = 3.0 * max_slope * (grid[1] - grid[0]);
    Ok(LipschitzReport {
        max_jump,
        max_slope,
        bound,
        passed: max_jump <= bound + 1e-12,
    })
}
