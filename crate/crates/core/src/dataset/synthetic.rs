//! Synthetic multi-class scenes with a configurable perception noise model.
//!
//! Each agent has a ground-truth class that drives its kinematics. The
//! perceived class probabilities come from a Dirichlet centred on a row of
//! the agent's current perceived mode: by default that mode's confusion row,
//! or its row of `centers` when given. The mode starts as a draw from the
//! confusion row of the true class and jumps to a different class with
//! probability `switch_rate` per step.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{AgentState, AgentTrack, ClassProbVector, Scene, DEFAULT_DT};

/// Motion statistics for one agent class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassKinematics {
    pub name: String,
    /// Relative frequency of the class among generated agents.
    #[serde(default = "one")]
    pub weight: f64,
    /// Initial speed drawn uniformly from this range, m/s.
    pub speed_range: [f64; 2],
    /// Per-step standard deviation of the speed random walk, m/s.
    #[serde(default)]
    pub speed_noise: f64,
    /// Per-step standard deviation of the heading random walk, rad.
    #[serde(default)]
    pub heading_noise: f64,
    /// Probability per step of an abrupt turn.
    #[serde(default)]
    pub turn_rate: f64,
    /// Largest abrupt heading change, rad. Turns are uniform in
    /// `±[turn_magnitude / 2, turn_magnitude]`.
    #[serde(default)]
    pub turn_magnitude: f64,
}

fn one() -> f64 {
    1.0
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

/// How perceived class probabilities are corrupted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionNoiseModel {
    /// Row-stochastic K×K matrix; row `k` is the perceived-class distribution
    /// for an agent whose perceived mode is `k`.
    pub confusion: Vec<Vec<f64>>,
    /// Dirichlet concentration around the confusion row; `inf` yields the
    /// row itself.
    pub concentration: f64,
    /// Probability per timestep that the perceived mode switches class.
    pub switch_rate: f64,
    /// Weight in `[0, 1)` of the previous step's vector when the mode did not
    /// change; zero draws every step independently.
    #[serde(default)]
    pub persistence: f64,
    /// Per-agent blend weight towards the uniform vector, drawn uniformly
    /// from this range. Agents with higher ambiguity also receive more
    /// position measurement noise (see `GeneratorConfig::position_noise`).
    #[serde(default)]
    pub ambiguity_range: [f64; 2],
    /// Dirichlet centers per perceived mode, replacing the confusion rows.
    /// Lets two classes share an argmax while keeping distinct vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
}

impl PerceptionNoiseModel {
    pub fn identity(k: usize) -> Self {
        let confusion = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self {
            confusion,
            concentration: f64::INFINITY,
            switch_rate: 0.0,
            persistence: 0.0,
            ambiguity_range: [0.0, 0.0],
            centers: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.confusion.len();
        if k == 0 {
            return Err(Error::InvalidParameter("confusion matrix is empty".into()));
        }
        check_stochastic("confusion", &self.confusion, k)?;
        if let Some(c) = &self.centers {
            if c.len() != k {
                return Err(Error::InvalidParameter(format!("{} center rows, expected {k}", c.len())));
            }
            check_stochastic("center", c, k)?;
        }
        if !(self.concentration > 0.0) {
            return Err(Error::InvalidParameter(format!("concentration must be positive, got {}", self.concentration)));
        }
        if !(0.0..=1.0).contains(&self.switch_rate) {
            return Err(Error::InvalidParameter(format!("switch_rate {} outside [0, 1]", self.switch_rate)));
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return Err(Error::InvalidParameter(format!("persistence {} outside [0, 1)", self.persistence)));
        }
        let [lo, hi] = self.ambiguity_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidParameter(format!("ambiguity range [{lo}, {hi}] invalid")));
        }
        Ok(())
    }
}

fn check_stochastic(what: &str, rows: &[Vec<f64>], k: usize) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != k {
            return Err(Error::InvalidParameter(format!("{what} row {i} has {} entries, expected {k}", row.len())));
        }
        if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidParameter(format!("{what} row {i} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("{what} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: Vec<ClassKinematics>,
    pub num_scenes: usize,
    /// Inclusive range of agents per scene.
    pub agents_per_scene: [usize; 2],
    /// Scene length in timesteps.
    pub scene_length: usize,
    /// Shortest generated track, in timesteps.
    #[serde(default = "default_min_track")]
    pub min_track_length: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Agents start uniformly inside `[-half_extent, half_extent]²`, meters.
    #[serde(default = "default_extent")]
    pub half_extent: f64,
    /// Position measurement noise standard deviation (m) for a fully
    /// ambiguous agent; scales linearly with the agent's ambiguity.
    #[serde(default)]
    pub position_noise: f64,
    #[serde(default = "default_prefix")]
    pub scene_prefix: String,
}

fn default_min_track() -> usize {
    10
}

fn default_extent() -> f64 {
    30.0
}

fn default_prefix() -> String {
    "synthetic".into()
}

/// The file layout accepted by `generate --spec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub generator: GeneratorConfig,
    pub noise: PerceptionNoiseModel,
}

impl GeneratorSpec {
    /// Three classes with identical speed statistics whose futures differ
    /// only in how often and how sharply they turn. Perception never lies
    /// about the class but is never confident either (mean entropy about
    /// 1.05 nats): bicycles and cars share an argmax and are told apart only
    /// by the secondary probabilities.
    pub fn confusable_classes(num_scenes: usize) -> Self {
        let mut generator = GeneratorConfig::urban_default();
        generator.num_scenes = num_scenes;
        generator.scene_length = 50;
        generator.min_track_length = 31;
        generator.agents_per_scene = [2, 4];
        for c in &mut generator.classes {
            c.weight = 1.0;
            c.speed_range = [1.0, 6.0];
            c.heading_noise = 0.01;
            c.speed_noise = 0.05;
        }
        let ped = &mut generator.classes[1];
        ped.turn_rate = 0.06;
        ped.turn_magnitude = 1.5;
        ped.speed_noise = 0.3;
        let bike = &mut generator.classes[2];
        bike.turn_rate = 0.06;
        bike.turn_magnitude = 1.2;
        let noise = PerceptionNoiseModel {
            concentration: 100.0,
            persistence: 0.9,
            centers: Some(vec![vec![0.50, 0.15, 0.35], vec![0.25, 0.45, 0.30], vec![0.40, 0.25, 0.35]]),
            ..PerceptionNoiseModel::identity(3)
        };
        GeneratorSpec { generator, noise }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<Scene>> {
        generate_synthetic(&self.generator, &self.noise, seed)
    }
}

impl GeneratorConfig {
    /// Cars, pedestrians and bicycles with clearly separated speeds.
    pub fn urban_default() -> Self {
        Self {
            classes: vec![
                ClassKinematics {
                    name: "car".into(),
                    weight: 0.6,
                    speed_range: [5.0, 15.0],
                    speed_noise: 0.05,
                    heading_noise: 0.005,
                    turn_rate: 0.0,
                    turn_magnitude: 0.0,
                },
                ClassKinematics {
                    name: "pedestrian".into(),
                    weight: 0.25,
                    speed_range: [0.5, 2.0],
                    speed_noise: 0.05,
                    heading_noise: 0.1,
                    turn_rate: 0.0,
                    turn_magnitude: 0.0,
                },
                ClassKinematics {
                    name: "bicycle".into(),
                    weight: 0.15,
                    speed_range: [2.0, 7.0],
                    speed_noise: 0.05,
                    heading_noise: 0.02,
                    turn_rate: 0.0,
                    turn_magnitude: 0.0,
                },
            ],
            num_scenes: 20,
            agents_per_scene: [2, 6],
            scene_length: 60,
            min_track_length: 10,
            dt: DEFAULT_DT,
            half_extent: 30.0,
            position_noise: 0.0,
            scene_prefix: default_prefix(),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self, noise: &PerceptionNoiseModel) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidParameter("no classes configured".into()));
        }
        if self.num_scenes == 0 {
            return Err(Error::InvalidParameter("num_scenes must be positive".into()));
        }
        let [lo, hi] = self.agents_per_scene;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidParameter(format!("agents_per_scene [{lo}, {hi}] invalid")));
        }
        if self.min_track_length == 0 || self.min_track_length > self.scene_length {
            return Err(Error::InvalidParameter(format!(
                "min_track_length {} must be in [1, scene_length={}]",
                self.min_track_length, self.scene_length
            )));
        }
        if !(self.dt > 0.0) || !(self.half_extent > 0.0) || !(self.position_noise >= 0.0) {
            return Err(Error::InvalidParameter("dt, half_extent must be positive and position_noise non-negative".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.name.trim().is_empty() || !names.insert(c.name.as_str()) {
                return Err(Error::InvalidParameter(format!("class name {:?} is empty or duplicated", c.name)));
            }
            let [s0, s1] = c.speed_range;
            if !(c.weight > 0.0) || !(0.0 <= s0 && s0 <= s1) || c.speed_noise < 0.0 || c.heading_noise < 0.0 {
                return Err(Error::InvalidParameter(format!("invalid kinematics for class {}", c.name)));
            }
            if !(0.0..=1.0).contains(&c.turn_rate) || c.turn_magnitude < 0.0 {
                return Err(Error::InvalidParameter(format!("invalid turn parameters for class {}", c.name)));
            }
        }
        noise.validate()?;
        if noise.num_classes() != self.classes.len() {
            return Err(Error::InvalidParameter(format!(
                "noise model has {} classes, generator has {}",
                noise.num_classes(),
                self.classes.len()
            )));
        }
        Ok(())
    }
}

/// Generates `config.num_scenes` scenes; identical seeds give identical scenes.
pub fn generate_synthetic(config: &GeneratorConfig, noise: &PerceptionNoiseModel, seed: u64) -> Result<Vec<Scene>> {
    config.validate(noise)?;
    (0..config.num_scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(config, noise, &format!("{}-{i:05}", config.scene_prefix), &mut rng)
        })
        .collect()
}

fn generate_scene(config: &GeneratorConfig, noise: &PerceptionNoiseModel, scene_id: &str, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let class_dist = WeightedIndex::new(config.classes.iter().map(|c| c.weight))
        .map_err(|e| Error::InvalidParameter(format!("class weights: {e}")))?;
    let n_agents = rng.gen_range(config.agents_per_scene[0]..=config.agents_per_scene[1]);
    let tracks = (0..n_agents)
        .map(|a| {
            let class = class_dist.sample(rng);
            generate_track(config, noise, class, &format!("{a}"), rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Scene::new(scene_id, tracks, config.class_names(), config.dt)
}

fn generate_track(
    config: &GeneratorConfig,
    noise: &PerceptionNoiseModel,
    class: usize,
    agent_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<AgentTrack> {
    let kin = &config.classes[class];
    let len = config.scene_length;
    let start = rng.gen_range(0..=len - config.min_track_length);
    let duration = rng.gen_range(config.min_track_length..=len - start);

    let ambiguity = if noise.ambiguity_range[0] < noise.ambiguity_range[1] {
        rng.gen_range(noise.ambiguity_range[0]..noise.ambiguity_range[1])
    } else {
        noise.ambiguity_range[0]
    };
    let pos_sigma = config.position_noise * ambiguity;

    let mut position = [
        rng.gen_range(-config.half_extent..config.half_extent),
        rng.gen_range(-config.half_extent..config.half_extent),
    ];
    let mut heading: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut speed = if kin.speed_range[0] < kin.speed_range[1] {
        rng.gen_range(kin.speed_range[0]..kin.speed_range[1])
    } else {
        kin.speed_range[0]
    };
    let speed_cap = kin.speed_range[1] * 1.5;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut states = Vec::with_capacity(duration);
    let mut prev_velocity = [speed * heading.cos(), speed * heading.sin()];
    for step in 0..duration {
        if step > 0 {
            heading += kin.heading_noise * std_normal.sample(rng);
            if kin.turn_rate > 0.0 && rng.gen_bool(kin.turn_rate) {
                let magnitude = rng.gen_range(0.5..=1.0) * kin.turn_magnitude;
                heading += if rng.gen_bool(0.5) { magnitude } else { -magnitude };
            }
            speed = (speed + kin.speed_noise * std_normal.sample(rng)).clamp(0.0, speed_cap);
        }
        let velocity = [speed * heading.cos(), speed * heading.sin()];
        if step > 0 {
            position[0] += velocity[0] * config.dt;
            position[1] += velocity[1] * config.dt;
        }
        let acceleration = if step == 0 {
            [0.0, 0.0]
        } else {
            [
                (velocity[0] - prev_velocity[0]) / config.dt,
                (velocity[1] - prev_velocity[1]) / config.dt,
            ]
        };
        prev_velocity = velocity;
        let observed = if pos_sigma > 0.0 {
            [
                position[0] + pos_sigma * std_normal.sample(rng),
                position[1] + pos_sigma * std_normal.sample(rng),
            ]
        } else {
            position
        };
        states.push(AgentState::new((start + step) as i64, observed, velocity, acceleration));
    }

    let class_probs = perceive(noise, class, ambiguity, duration, rng);
    AgentTrack::new(agent_id, states, class_probs, Some(class))
}

fn perceive(noise: &PerceptionNoiseModel, class: usize, ambiguity: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<ClassProbVector> {
    let k = noise.num_classes();
    let row = &noise.confusion[class];
    let mut mode = WeightedIndex::new(row).map(|d| d.sample(rng)).unwrap_or(class);
    let mut out: Vec<ClassProbVector> = Vec::with_capacity(len);
    let mut prev: Option<Vec<f64>> = None;
    for step in 0..len {
        let mut switched = false;
        if step > 0 && noise.switch_rate > 0.0 && k > 1 && rng.gen_bool(noise.switch_rate) {
            mode = switch_target(row, mode, rng);
            switched = true;
        }
        let center: Vec<f64> = noise.centers.as_ref().unwrap_or(&noise.confusion)[mode]
            .iter()
            .map(|&p| (1.0 - ambiguity) * p + ambiguity / k as f64)
            .collect();
        let draw = dirichlet(&center, noise.concentration, rng);
        let probs = match (&prev, switched) {
            (Some(p), false) if noise.persistence > 0.0 => p
                .iter()
                .zip(&draw)
                .map(|(a, b)| noise.persistence * a + (1.0 - noise.persistence) * b)
                .collect(),
            _ => draw,
        };
        let c = ClassProbVector::new(probs).expect("dirichlet draws lie on the simplex");
        prev = Some(c.probs().to_vec());
        out.push(c);
    }
    out
}

/// A class other than `current`, weighted by the true class's confusion row
/// (uniform over the other classes when that row puts no mass on them).
fn switch_target(row: &[f64], current: usize, rng: &mut ChaCha8Rng) -> usize {
    let weights: Vec<f64> = row.iter().enumerate().map(|(j, &p)| if j == current { 0.0 } else { p }).collect();
    match WeightedIndex::new(&weights) {
        Ok(d) => d.sample(rng),
        Err(_) => {
            let others: Vec<usize> = (0..row.len()).filter(|&j| j != current).collect();
            *others.choose(rng).expect("at least two classes")
        }
    }
}

fn dirichlet(center: &[f64], concentration: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if concentration.is_infinite() {
        return center.to_vec();
    }
    let draws: Vec<f64> = center
        .iter()
        .map(|&c| {
            let alpha = concentration * c;
            if alpha <= 0.0 {
                0.0
            } else {
                Gamma::new(alpha, 1.0).expect("positive shape").sample(rng)
            }
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|d| d / sum).collect()
    } else {
        center.to_vec()
    }
}
