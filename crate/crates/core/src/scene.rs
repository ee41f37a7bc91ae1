//! Agents, per-timestep class probabilities, scenes and the distance-threshold
//! interaction graph.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per timestep used throughout unless a scene says otherwise.
pub const DEFAULT_DT: f64 = 0.1;

/// Default interaction radius in meters.
pub const DEFAULT_INTERACTION_RADIUS: f64 = 10.0;

/// Sum tolerance accepted (and renormalized) when building a probability vector.
pub const SIMPLEX_ACCEPT_TOL: f64 = 1e-3;

/// Sum tolerance a constructed probability vector is guaranteed to satisfy.
pub const SIMPLEX_TOL: f64 = 1e-6;

pub type Vec2 = [f64; 2];

/// Kinematic state of one agent at one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub acceleration: Vec2,
    pub timestep: i64,
}

impl AgentState {
    /// Scalar state dimensions: position, velocity and acceleration in 2D.
    pub const DIM: usize = 6;

    pub fn new(timestep: i64, position: Vec2, velocity: Vec2, acceleration: Vec2) -> Self {
        Self {
            position,
            velocity,
            acceleration,
            timestep,
        }
    }

    pub fn to_array(&self) -> [f64; Self::DIM] {
        [
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.acceleration[0],
            self.acceleration[1],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// A point on the (K-1)-simplex: a categorical distribution over agent classes.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ClassProbVector(Vec<f64>);

impl ClassProbVector {
    /// Validates and normalizes `probs`.
    ///
    /// Vectors whose sum is within [`SIMPLEX_ACCEPT_TOL`] of one are rescaled so
    /// that the stored sum is one to within [`SIMPLEX_TOL`]; anything further
    /// off, negative or non-finite is rejected.
    pub fn new(probs: Vec<f64>) -> std::result::Result<Self, String> {
        if probs.is_empty() {
            return Err("empty probability vector".into());
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite()) {
            return Err(format!("non-finite entry {p}"));
        }
        if let Some(p) = probs.iter().find(|&&p| !(0.0..=1.0 + SIMPLEX_ACCEPT_TOL).contains(&p)) {
            return Err(format!("entry {p} outside [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_ACCEPT_TOL {
            return Err(format!("entries sum to {sum}, not 1"));
        }
        let probs = probs.into_iter().map(|p| (p / sum).min(1.0)).collect();
        Ok(Self(probs))
    }

    pub fn one_hot(class: usize, k: usize) -> Self {
        assert!(class < k, "class {class} out of range for K={k}");
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        Self(probs)
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0);
        Self(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Most likely class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn is_one_hot(&self) -> bool {
        self.0.iter().filter(|&&p| p == 1.0).count() == 1 && self.0.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// The one-hot vector of the argmax class.
    pub fn quantized(&self) -> Self {
        Self::one_hot(self.argmax(), self.num_classes())
    }

    /// `(1 - lambda) * self + lambda * target`, which stays on the simplex.
    pub fn interpolate(&self, target: &Self, lambda: f64) -> Result<Self> {
        if self.num_classes() != target.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "interpolating K={} towards K={}",
                self.num_classes(),
                target.num_classes()
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParameter(format!("lambda {lambda} outside [0, 1]")));
        }
        if lambda == 0.0 {
            return Ok(self.clone());
        }
        if lambda == 1.0 {
            return Ok(target.clone());
        }
        let probs = self
            .0
            .iter()
            .zip(&target.0)
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect();
        Ok(Self::new(probs).expect("convex combination of simplex points"))
    }
}

impl<'de> Deserialize<'de> for ClassProbVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(deserializer)?;
        ClassProbVector::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn class_entropy(c: &ClassProbVector) -> f64 {
    let h: f64 = c.probs().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// One agent's observed states and perceived class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub agent_id: String,
    pub states: Vec<AgentState>,
    pub class_probs: Vec<ClassProbVector>,
    pub true_class: Option<usize>,
}

impl AgentTrack {
    pub fn new(
        agent_id: impl Into<String>,
        states: Vec<AgentState>,
        class_probs: Vec<ClassProbVector>,
        true_class: Option<usize>,
    ) -> Result<Self> {
        let agent_id = agent_id.into();
        if states.len() != class_probs.len() {
            return Err(Error::Invariant {
                agent_id,
                timestep: states.first().map_or(0, |s| s.timestep),
                reason: format!("{} states but {} probability vectors", states.len(), class_probs.len()),
            });
        }
        if states.is_empty() {
            return Err(Error::Invariant {
                agent_id,
                timestep: 0,
                reason: "track has no observations".into(),
            });
        }
        let k = class_probs[0].num_classes();
        for (i, (s, c)) in states.iter().zip(&class_probs).enumerate() {
            if !s.is_finite() {
                return Err(Error::Invariant {
                    agent_id,
                    timestep: s.timestep,
                    reason: "non-finite state".into(),
                });
            }
            if c.num_classes() != k {
                return Err(Error::Invariant {
                    agent_id,
                    timestep: s.timestep,
                    reason: format!("expected {k} classes, found {}", c.num_classes()),
                });
            }
            if i > 0 && s.timestep <= states[i - 1].timestep {
                return Err(Error::Invariant {
                    agent_id,
                    timestep: s.timestep,
                    reason: "timesteps must be strictly increasing".into(),
                });
            }
        }
        if let Some(tc) = true_class {
            if tc >= k {
                return Err(Error::Invariant {
                    agent_id,
                    timestep: states[0].timestep,
                    reason: format!("true class {tc} out of range for K={k}"),
                });
            }
        }
        Ok(Self {
            agent_id,
            states,
            class_probs,
            true_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs[0].num_classes()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first_timestep(&self) -> i64 {
        self.states[0].timestep
    }

    pub fn last_timestep(&self) -> i64 {
        self.states[self.states.len() - 1].timestep
    }

    /// Position of `timestep` in `states`, if observed.
    pub fn index_of(&self, timestep: i64) -> Option<usize> {
        self.states.binary_search_by_key(&timestep, |s| s.timestep).ok()
    }

    pub fn state_at(&self, timestep: i64) -> Option<&AgentState> {
        self.index_of(timestep).map(|i| &self.states[i])
    }

    /// Index ranges of maximal runs of consecutive timesteps.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.states.len() {
            if i == self.states.len() || self.states[i].timestep != self.states[i - 1].timestep + 1 {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Segment containing state index `idx`.
    pub fn segment_of(&self, idx: usize) -> Range<usize> {
        self.segments()
            .into_iter()
            .find(|r| r.contains(&idx))
            .expect("index inside track")
    }

    pub fn argmax_sequence(&self) -> Vec<usize> {
        self.class_probs.iter().map(ClassProbVector::argmax).collect()
    }

    /// The agent's most often most-likely class (lowest index on ties).
    pub fn modal_class(&self) -> usize {
        let mut counts = vec![0usize; self.num_classes()];
        for c in self.argmax_sequence() {
            counts[c] += 1;
        }
        let counts: Vec<f64> = counts.into_iter().map(|c| c as f64).collect();
        argmax(&counts)
    }

    /// Per-class probabilities averaged over the whole track.
    pub fn mean_probs(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.num_classes()];
        for c in &self.class_probs {
            for (m, p) in mean.iter_mut().zip(c.probs()) {
                *m += p;
            }
        }
        let n = self.class_probs.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Mean class-probability entropy over the track's timesteps.
    pub fn mean_entropy(&self) -> f64 {
        self.class_probs.iter().map(class_entropy).sum::<f64>() / self.class_probs.len() as f64
    }
}

/// Time-indexed agent tracks sharing one class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub tracks: Vec<AgentTrack>,
    pub class_names: Vec<String>,
    pub dt: f64,
}

impl Scene {
    pub fn new(
        scene_id: impl Into<String>,
        tracks: Vec<AgentTrack>,
        class_names: Vec<String>,
        dt: f64,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        if class_names.is_empty() {
            return Err(Error::InvalidParameter(format!("scene {scene_id} has no class names")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("scene {scene_id} has dt={dt}")));
        }
        let mut seen = BTreeSet::new();
        for t in &tracks {
            if t.num_classes() != class_names.len() {
                return Err(Error::Invariant {
                    agent_id: t.agent_id.clone(),
                    timestep: t.first_timestep(),
                    reason: format!("track has K={} but scene has {} class names", t.num_classes(), class_names.len()),
                });
            }
            if !seen.insert(t.agent_id.as_str()) {
                return Err(Error::Invariant {
                    agent_id: t.agent_id.clone(),
                    timestep: t.first_timestep(),
                    reason: "duplicate agent id".into(),
                });
            }
        }
        Ok(Self {
            scene_id,
            tracks,
            class_names,
            dt,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn track(&self, agent_id: &str) -> Option<&AgentTrack> {
        self.tracks.iter().find(|t| t.agent_id == agent_id)
    }

    /// Inclusive timestep span covered by any track.
    pub fn time_span(&self) -> Option<(i64, i64)> {
        let first = self.tracks.iter().map(AgentTrack::first_timestep).min()?;
        let last = self.tracks.iter().map(AgentTrack::last_timestep).max()?;
        Some((first, last))
    }

    /// Tracks observed at `timestep`, paired with the state index.
    pub fn agents_at(&self, timestep: i64) -> Vec<(usize, usize)> {
        self.tracks
            .iter()
            .enumerate()
            .filter_map(|(ti, t)| t.index_of(timestep).map(|si| (ti, si)))
            .collect()
    }

    /// N(t), the number of agents present at `timestep`.
    pub fn num_agents_at(&self, timestep: i64) -> usize {
        self.agents_at(timestep).len()
    }
}

/// Undirected interaction graph at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub timestep: i64,
    pub nodes: Vec<String>,
    /// Unordered pairs stored with the lexicographically smaller id first.
    pub edges: BTreeSet<(String, String)>,
    pub distance_threshold: f64,
}

impl SceneGraph {
    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.edges.contains(&key)
    }

    pub fn neighbors(&self, agent_id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter_map(|(a, b)| {
                if a == agent_id {
                    Some(b.as_str())
                } else if b == agent_id {
                    Some(a.as_str())
                } else {
                    None
                }
            })
            .collect()
    }
}

pub fn distance(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Connects every pair of agents present at `timestep` whose positions are at
/// most `d` meters apart (inclusive).
pub fn build_scene_graph(scene: &Scene, timestep: i64, d: f64) -> Result<SceneGraph> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidParameter(format!("distance threshold must be positive, got {d}")));
    }
    let present = scene.agents_at(timestep);
    if present.is_empty() {
        return Err(Error::EmptyScene(format!(
            "scene {} has no agents at timestep {timestep}",
            scene.scene_id
        )));
    }
    let nodes: Vec<String> = present.iter().map(|&(ti, _)| scene.tracks[ti].agent_id.clone()).collect();
    let mut edges = BTreeSet::new();
    for (a, &(ti, si)) in present.iter().enumerate() {
        for &(tj, sj) in &present[a + 1..] {
            let (ta, tb) = (&scene.tracks[ti], &scene.tracks[tj]);
            if distance(ta.states[si].position, tb.states[sj].position) <= d {
                let (x, y) = (ta.agent_id.clone(), tb.agent_id.clone());
                edges.insert(if x <= y { (x, y) } else { (y, x) });
            }
        }
    }
    Ok(SceneGraph {
        timestep,
        nodes,
        edges,
        distance_threshold: d,
    })
}
