//! Line-delimited JSON scene files: one scene object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{AgentState, AgentTrack, ClassProbVector, Scene, Vec2};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: i64,
    pub px: f64,
    pub py: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ax: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ay: Option<f64>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<usize>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub dt: f64,
    pub class_names: Vec<String>,
    pub agents: Vec<AgentRecord>,
}

impl From<&Scene> for SceneRecord {
    fn from(scene: &Scene) -> Self {
        let agents = scene
            .tracks
            .iter()
            .map(|track| AgentRecord {
                agent_id: track.agent_id.clone(),
                true_class: track.true_class,
                steps: track
                    .states
                    .iter()
                    .zip(&track.class_probs)
                    .map(|(s, c)| StepRecord {
                        t: s.timestep,
                        px: s.position[0],
                        py: s.position[1],
                        vx: Some(s.velocity[0]),
                        vy: Some(s.velocity[1]),
                        ax: Some(s.acceleration[0]),
                        ay: Some(s.acceleration[1]),
                        probs: c.probs().to_vec(),
                    })
                    .collect(),
            })
            .collect();
        SceneRecord {
            scene_id: scene.scene_id.clone(),
            dt: scene.dt,
            class_names: scene.class_names.clone(),
            agents,
        }
    }
}

impl SceneRecord {
    /// Validates the record and fills in any missing velocities and
    /// accelerations by finite differences within each contiguous segment.
    pub fn into_scene(self) -> Result<Scene> {
        let k = self.class_names.len();
        let mut tracks = Vec::with_capacity(self.agents.len());
        for agent in self.agents {
            let mut steps = agent.steps;
            steps.sort_by_key(|s| s.t);
            let mut probs = Vec::with_capacity(steps.len());
            for step in &steps {
                if step.probs.len() != k {
                    return Err(Error::SimplexViolation {
                        agent_id: agent.agent_id.clone(),
                        timestep: step.t,
                        reason: format!("expected {k} probabilities, found {}", step.probs.len()),
                    });
                }
                let c = ClassProbVector::new(step.probs.clone()).map_err(|reason| Error::SimplexViolation {
                    agent_id: agent.agent_id.clone(),
                    timestep: step.t,
                    reason,
                })?;
                probs.push(c);
            }
            let states = reconstruct_states(&steps, self.dt);
            tracks.push(AgentTrack::new(agent.agent_id, states, probs, agent.true_class)?);
        }
        Scene::new(self.scene_id, tracks, self.class_names, self.dt)
    }
}

fn reconstruct_states(steps: &[StepRecord], dt: f64) -> Vec<AgentState> {
    let positions: Vec<Vec2> = steps.iter().map(|s| [s.px, s.py]).collect();
    let mut velocities: Vec<Vec2> = vec![[0.0; 2]; steps.len()];
    let mut accelerations: Vec<Vec2> = vec![[0.0; 2]; steps.len()];
    for seg in contiguous_runs(steps) {
        let fd_vel = finite_difference(&positions[seg.clone()], dt);
        for (i, idx) in seg.clone().enumerate() {
            let s = &steps[idx];
            velocities[idx] = [s.vx.unwrap_or(fd_vel[i][0]), s.vy.unwrap_or(fd_vel[i][1])];
        }
        let fd_acc = finite_difference(&velocities[seg.clone()], dt);
        for (i, idx) in seg.enumerate() {
            let s = &steps[idx];
            accelerations[idx] = [s.ax.unwrap_or(fd_acc[i][0]), s.ay.unwrap_or(fd_acc[i][1])];
        }
    }
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| AgentState::new(s.t, positions[i], velocities[i], accelerations[i]))
        .collect()
}

fn contiguous_runs(steps: &[StepRecord]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=steps.len() {
        if i == steps.len() || steps[i].t != steps[i - 1].t + 1 {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// Central differences in the interior, one-sided at the ends; a single
/// sample has zero derivative.
pub fn finite_difference(values: &[Vec2], dt: f64) -> Vec<Vec2> {
    let n = values.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                [0.0; 2]
            } else if i == 0 {
                [(values[1][0] - values[0][0]) / dt, (values[1][1] - values[0][1]) / dt]
            } else if i == n - 1 {
                [(values[i][0] - values[i - 1][0]) / dt, (values[i][1] - values[i - 1][1]) / dt]
            } else {
                [
                    (values[i + 1][0] - values[i - 1][0]) / (2.0 * dt),
                    (values[i + 1][1] - values[i - 1][1]) / (2.0 * dt),
                ]
            }
        })
        .collect()
}

/// Result of a lenient load: accepted scenes plus per-line rejection reasons.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub scenes: Vec<Scene>,
    pub rejected: Vec<(usize, Error)>,
}

pub fn parse_scene_line(line: &str, line_no: usize) -> Result<Scene> {
    let record: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        reason: e.to_string(),
    })?;
    record.into_scene()
}

/// Loads every scene, failing on the first malformed line or invalid scene.
pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let report = load_scenes_with(path, false)?;
    Ok(report.scenes)
}

/// Loads every scene, collecting invalid scenes into the report instead of
/// failing. Lines that are not valid JSON still abort the load.
pub fn load_scenes_lenient(path: impl AsRef<Path>) -> Result<LoadReport> {
    load_scenes_with(path, true)
}

fn load_scenes_with(path: impl AsRef<Path>, lenient: bool) -> Result<LoadReport> {
    let reader = BufReader::new(File::open(path)?);
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_scene_line(&line, i + 1) {
            Ok(scene) => report.scenes.push(scene),
            Err(e @ Error::Parse { .. }) => return Err(e),
            Err(e) if lenient => report.rejected.push((i + 1, e)),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

pub fn scene_to_line(scene: &Scene) -> String {
    serde_json::to_string(&SceneRecord::from(scene)).expect("scene records always serialize")
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for scene in scenes {
        w.write_all(scene_to_line(scene).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(probs: &str) -> String {
        format!(
            r#"{{"scene_id":"s","dt":0.1,"class_names":["car","pedestrian","bicycle"],"agents":[{{"agent_id":"a","steps":[{{"t":0,"px":0.0,"py":0.0,"probs":{probs}}},{{"t":1,"px":1.0,"py":0.0,"probs":{probs}}}]}}]}}"#
        )
    }

    #[test]
    fn near_simplex_rows_are_renormalized() {
        let scene = parse_scene_line(&line("[0.6, 0.4001, 0.0]"), 1).unwrap();
        let c = &scene.tracks[0].class_probs[0];
        assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn far_from_simplex_is_rejected() {
        let err = parse_scene_line(&line("[0.7, 0.7, 0.0]"), 1).unwrap_err();
        assert!(matches!(err, Error::SimplexViolation { ref agent_id, timestep: 0, .. } if agent_id == "a"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_scene_line("{not json", 7).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }));
    }

    #[test]
    fn missing_velocities_are_differenced() {
        let scene = parse_scene_line(&line("[1.0, 0.0, 0.0]"), 1).unwrap();
        let s = &scene.tracks[0].states;
        assert!((s[0].velocity[0] - 10.0).abs() < 1e-12);
        assert!((s[1].velocity[0] - 10.0).abs() < 1e-12);
        assert_eq!(s[0].acceleration, [0.0, 0.0]);
    }

    #[test]
    fn central_differences_inside_segments() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]];
        let v = finite_difference(&pts, 1.0);
        assert_eq!(v, vec![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        assert_eq!(finite_difference(&[[3.0, 3.0]], 0.1), vec![[0.0, 0.0]]);
    }

    #[test]
    fn lenient_load_reports_bad_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        std::fs::write(&path, format!("{}\n{}\n", line("[1.0, 0.0, 0.0]"), line("[0.7, 0.7, 0.0]"))).unwrap();
        let report = load_scenes_lenient(&path).unwrap();
        assert_eq!(report.scenes.len(), 1);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].0, 2);
        assert!(load_scenes(&path).is_err());
    }
}
