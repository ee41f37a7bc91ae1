//! Per-agent prediction examples cut from scenes.
//!
//! Positions are stored relative to the agent's position at the prediction
//! timestep (its origin); velocities and accelerations are absolute.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::augment::rotate;
use crate::error::{Error, Result};
use crate::scene::{distance, AgentState, AgentTrack, Scene, Vec2, SIMPLEX_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    /// History steps before the current one, so windows hold `history + 1`.
    pub history: usize,
    /// Future steps required per example.
    pub horizon: usize,
    pub interaction_radius: f64,
    /// Neighbors are agents within range at any step of the history window
    /// rather than only at the current step.
    pub edge_window_union: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            history: 20,
            horizon: 20,
            interaction_radius: crate::scene::DEFAULT_INTERACTION_RADIUS,
            edge_window_union: true,
        }
    }
}

/// A fixed-length history window. Missing steps are zero and masked out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub states: Vec<[f64; AgentState::DIM]>,
    pub probs: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl History {
    fn empty(len: usize, k: usize) -> Self {
        History {
            states: vec![[0.0; AgentState::DIM]; len],
            probs: vec![vec![0.0; k]; len],
            mask: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    fn rotate(&mut self, cos: f64, sin: f64) {
        for s in &mut self.states {
            for k in 0..3 {
                let v = rotate([s[2 * k], s[2 * k + 1]], cos, sin);
                s[2 * k] = v[0];
                s[2 * k + 1] = v[1];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub agent_id: String,
    pub history: History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentExample {
    pub scene_id: String,
    pub agent_id: String,
    pub timestep: i64,
    /// Modal argmax class over the whole track.
    pub class_label: usize,
    /// Absolute position at the prediction timestep.
    pub origin: Vec2,
    pub velocity: Vec2,
    pub node: History,
    pub neighbors: Vec<Neighbor>,
    /// Future positions relative to `origin`.
    pub future: Option<Vec<Vec2>>,
}

impl AgentExample {
    pub fn current_probs(&self) -> &[f64] {
        self.node.probs.last().expect("nonempty window")
    }

    /// Rotates every relative quantity about the origin.
    pub fn rotated(&self, gamma_deg: f64) -> Self {
        let (sin, cos) = gamma_deg.to_radians().sin_cos();
        let mut out = self.clone();
        out.velocity = rotate(out.velocity, cos, sin);
        out.node.rotate(cos, sin);
        for n in &mut out.neighbors {
            n.history.rotate(cos, sin);
        }
        if let Some(f) = &mut out.future {
            for p in f.iter_mut() {
                *p = rotate(*p, cos, sin);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationBatch {
    pub examples: Vec<AgentExample>,
    pub num_classes: usize,
    /// Window length, `history + 1`.
    pub window: usize,
    pub dt: f64,
}

impl ObservationBatch {
    pub fn new(examples: Vec<AgentExample>, num_classes: usize, window: usize, dt: f64) -> Result<Self> {
        let batch = ObservationBatch {
            examples,
            num_classes,
            window,
            dt,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_futures(&self, horizon: usize) -> bool {
        self.examples
            .iter()
            .all(|e| e.future.as_ref().is_some_and(|f| f.len() >= horizon))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        for e in &self.examples {
            let histories = std::iter::once(&e.node).chain(e.neighbors.iter().map(|n| &n.history));
            for h in histories {
                if h.len() != self.window || h.states.len() != self.window || h.probs.len() != self.window {
                    return Err(Error::DimensionMismatch(format!(
                        "agent {} window has {} steps, expected {}",
                        e.agent_id,
                        h.len(),
                        self.window
                    )));
                }
                for (i, (s, p)) in h.states.iter().zip(&h.probs).enumerate() {
                    if p.len() != self.num_classes {
                        return Err(Error::DimensionMismatch(format!(
                            "agent {} has {} class probabilities, expected {}",
                            e.agent_id,
                            p.len(),
                            self.num_classes
                        )));
                    }
                    if !s.iter().chain(p).all(|x| x.is_finite()) {
                        return Err(Error::NonFinite(format!("agent {} history step {i}", e.agent_id)));
                    }
                    if h.mask[i] && ((p.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&x| x < 0.0)) {
                        return Err(Error::SimplexViolation {
                            agent_id: e.agent_id.clone(),
                            timestep: e.timestep - (self.window - 1 - i) as i64,
                            reason: "class probabilities off the simplex".into(),
                        });
                    }
                }
            }
            if !e.node.mask.last().copied().unwrap_or(false) {
                return Err(Error::Invariant {
                    agent_id: e.agent_id.clone(),
                    timestep: e.timestep,
                    reason: "agent not observed at the prediction timestep".into(),
                });
            }
            if let Some(f) = &e.future {
                if !f.iter().flatten().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite(format!("agent {} future", e.agent_id)));
                }
            }
        }
        Ok(())
    }
}

fn window_history(track: &AgentTrack, t: i64, window: usize, origin: Vec2, k: usize) -> History {
    let mut h = History::empty(window, k);
    for i in 0..window {
        let tau = t - (window - 1 - i) as i64;
        if let Some(idx) = track.index_of(tau) {
            let s = &track.states[idx];
            let mut arr = s.to_array();
            arr[0] -= origin[0];
            arr[1] -= origin[1];
            h.states[i] = arr;
            h.probs[i] = track.class_probs[idx].probs().to_vec();
            h.mask[i] = true;
        }
    }
    h
}

fn future_positions(track: &AgentTrack, t: i64, horizon: usize, origin: Vec2) -> Option<Vec<Vec2>> {
    (1..=horizon as i64)
        .map(|k| {
            track
                .state_at(t + k)
                .map(|s| [s.position[0] - origin[0], s.position[1] - origin[1]])
        })
        .collect()
}

fn neighbor_ids(scene: &Scene, ti: usize, t: i64, cfg: &BatchConfig) -> BTreeSet<usize> {
    let me = &scene.tracks[ti];
    let first = if cfg.edge_window_union { t - cfg.history as i64 } else { t };
    let mut out = BTreeSet::new();
    for tau in first..=t {
        let Some(mine) = me.state_at(tau) else { continue };
        for (tj, other) in scene.tracks.iter().enumerate() {
            if tj == ti || out.contains(&tj) {
                continue;
            }
            if let Some(s) = other.state_at(tau) {
                if distance(mine.position, s.position) <= cfg.interaction_radius {
                    out.insert(tj);
                }
            }
        }
    }
    out
}

/// Example for track `ti` at timestep `t`. With `horizon > 0` the future is
/// attached when fully observed.
pub fn build_example(scene: &Scene, ti: usize, t: i64, cfg: &BatchConfig) -> Result<AgentExample> {
    let track = &scene.tracks[ti];
    let current = track.state_at(t).ok_or_else(|| Error::Invariant {
        agent_id: track.agent_id.clone(),
        timestep: t,
        reason: "agent not observed at this timestep".into(),
    })?;
    let k = scene.num_classes();
    let window = cfg.history + 1;
    let origin = current.position;
    let neighbors = neighbor_ids(scene, ti, t, cfg)
        .into_iter()
        .map(|tj| Neighbor {
            agent_id: scene.tracks[tj].agent_id.clone(),
            history: window_history(&scene.tracks[tj], t, window, origin, k),
        })
        .collect();
    Ok(AgentExample {
        scene_id: scene.scene_id.clone(),
        agent_id: track.agent_id.clone(),
        timestep: t,
        class_label: track.modal_class(),
        origin,
        velocity: current.velocity,
        node: window_history(track, t, window, origin, k),
        neighbors,
        future: if cfg.horizon > 0 { future_positions(track, t, cfg.horizon, origin) } else { None },
    })
}

/// Examples for the given agents (all present agents when `None`) at `t`.
pub fn examples_at(scene: &Scene, t: i64, agent_ids: Option<&[String]>, cfg: &BatchConfig) -> Result<Vec<AgentExample>> {
    let present = scene.agents_at(t);
    match agent_ids {
        None => present.iter().map(|&(ti, _)| build_example(scene, ti, t, cfg)).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                let ti = scene
                    .tracks
                    .iter()
                    .position(|tr| &tr.agent_id == id)
                    .ok_or_else(|| Error::UnknownAgent(id.clone()))?;
                build_example(scene, ti, t, cfg)
            })
            .collect(),
    }
}

/// Every (agent, timestep) with an observed current state and a fully
/// observed future of `cfg.horizon` steps, visiting timesteps whose offset
/// from the scene start is a multiple of `stride`.
pub fn scene_examples(scene: &Scene, cfg: &BatchConfig, stride: usize) -> Result<Vec<AgentExample>> {
    let Some((start, end)) = scene.time_span() else {
        return Ok(Vec::new());
    };
    let stride = stride.max(1) as i64;
    let mut out = Vec::new();
    let mut t = start;
    while t + cfg.horizon as i64 <= end {
        for (ti, track) in scene.tracks.iter().enumerate() {
            if track.state_at(t).is_some() && future_positions(track, t, cfg.horizon, [0.0, 0.0]).is_some() {
                out.push(build_example(scene, ti, t, cfg)?);
            }
        }
        t += stride;
    }
    Ok(out)
}
