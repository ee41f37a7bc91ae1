//! Class-uncertainty statistics over perceived probabilities: entropy, class
//! switching, majority-vote smoothing, confusion matrices and top-k accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{AgentTrack, ClassProbVector, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSwitch {
    pub timestep: i64,
    pub from_class: usize,
    pub to_class: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub count: usize,
    pub switches: Vec<ClassSwitch>,
    pub distinct_classes: usize,
}

/// Records a switch at every observation whose argmax class differs from the
/// previous observation's. Argmax ties go to the lowest class index.
pub fn detect_class_switches(track: &AgentTrack) -> SwitchReport {
    if track.len() < 2 {
        return SwitchReport::default();
    }
    let seq = track.argmax_sequence();
    let switches: Vec<ClassSwitch> = seq
        .windows(2)
        .zip(&track.states[1..])
        .filter(|(w, _)| w[0] != w[1])
        .map(|(w, s)| ClassSwitch {
            timestep: s.timestep,
            from_class: w[0],
            to_class: w[1],
        })
        .collect();
    let mut distinct = seq.clone();
    distinct.sort_unstable();
    distinct.dedup();
    SwitchReport {
        count: switches.len(),
        switches,
        distinct_classes: distinct.len(),
    }
}

/// Replaces each observation's class by the majority argmax over a centred
/// window (truncated at segment boundaries). The probability vector becomes
/// the one-hot of the winner. Ties prefer the centre's own argmax, then the
/// lowest class index.
pub fn majority_vote_smooth(track: &AgentTrack, window: usize) -> Result<AgentTrack> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("smoothing window must be odd and positive, got {window}")));
    }
    let half = window / 2;
    let k = track.num_classes();
    let seq = track.argmax_sequence();
    let mut probs = Vec::with_capacity(track.len());
    for seg in track.segments() {
        for i in seg.clone() {
            let lo = i.saturating_sub(half).max(seg.start);
            let hi = (i + half + 1).min(seg.end);
            let mut counts = vec![0usize; k];
            for &c in &seq[lo..hi] {
                counts[c] += 1;
            }
            let best = *counts.iter().max().expect("K >= 1");
            let winner = if counts[seq[i]] == best {
                seq[i]
            } else {
                counts.iter().position(|&c| c == best).expect("max exists")
            };
            probs.push(ClassProbVector::one_hot(winner, k));
        }
    }
    AgentTrack::new(track.agent_id.clone(), track.states.clone(), probs, track.true_class)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub count: usize,
    pub percent: f64,
    /// Mean over agents of each agent's mean class-probability entropy (nats).
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_scenes: usize,
    pub num_agents: usize,
    pub num_observations: usize,
    /// Agents are grouped by their modal argmax class.
    pub classes: Vec<ClassRow>,
    pub mean_entropy: f64,
    pub switching_agent_fraction: f64,
    /// Argmax switches per consecutive observation pair.
    pub switch_rate_per_step: f64,
    /// `"from->to"` class-name pairs with their switch counts.
    pub switch_histogram: BTreeMap<String, usize>,
    /// Fraction of switching agents left without any switch after 5-step
    /// majority-vote smoothing.
    pub smoothing_corrected_fraction: f64,
    /// Mean probability of the most likely class, indexed by track age in
    /// timesteps since first observation.
    pub mean_top_prob_by_age: Vec<f64>,
}

/// Table-I-style summary over all tracks in `scenes`.
pub fn dataset_statistics(scenes: &[Scene]) -> Result<DatasetStats> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::EmptyScene("dataset has no scenes".into()))?;
    let names = first.class_names.clone();
    let k = names.len();
    if let Some(s) = scenes.iter().find(|s| s.class_names != names) {
        return Err(Error::DimensionMismatch(format!("scene {} has different class names", s.scene_id)));
    }

    let mut counts = vec![0usize; k];
    let mut entropy_sums = vec![0.0; k];
    let mut num_agents = 0;
    let mut num_obs = 0;
    let mut switching = 0;
    let mut corrected = 0;
    let mut pair_count = 0usize;
    let mut switch_count = 0usize;
    let mut hist = BTreeMap::new();
    let mut age_sum: Vec<f64> = Vec::new();
    let mut age_n: Vec<usize> = Vec::new();
    let mut total_entropy = 0.0;

    for track in scenes.iter().flat_map(|s| &s.tracks) {
        num_agents += 1;
        num_obs += track.len();
        let class = track.modal_class();
        let h = track.mean_entropy();
        counts[class] += 1;
        entropy_sums[class] += h;
        total_entropy += h;
        let report = detect_class_switches(track);
        pair_count += track.len().saturating_sub(1);
        switch_count += report.count;
        if report.count > 0 {
            switching += 1;
            if detect_class_switches(&majority_vote_smooth(track, 5)?).count == 0 {
                corrected += 1;
            }
        }
        for sw in &report.switches {
            *hist.entry(format!("{}->{}", names[sw.from_class], names[sw.to_class])).or_insert(0) += 1;
        }
        for (age, c) in track.class_probs.iter().enumerate() {
            if age_sum.len() <= age {
                age_sum.push(0.0);
                age_n.push(0);
            }
            age_sum[age] += c.probs()[c.argmax()];
            age_n[age] += 1;
        }
    }
    if num_agents == 0 {
        return Err(Error::EmptyScene("dataset has no agents".into()));
    }
    let classes = names
        .iter()
        .enumerate()
        .map(|(i, name)| ClassRow {
            class: name.clone(),
            count: counts[i],
            percent: 100.0 * counts[i] as f64 / num_agents as f64,
            mean_entropy: if counts[i] > 0 { entropy_sums[i] / counts[i] as f64 } else { 0.0 },
        })
        .collect();
    Ok(DatasetStats {
        num_scenes: scenes.len(),
        num_agents,
        num_observations: num_obs,
        classes,
        mean_entropy: total_entropy / num_agents as f64,
        switching_agent_fraction: switching as f64 / num_agents as f64,
        switch_rate_per_step: if pair_count > 0 { switch_count as f64 / pair_count as f64 } else { 0.0 },
        switch_histogram: hist,
        smoothing_corrected_fraction: if switching > 0 { corrected as f64 / switching as f64 } else { 0.0 },
        mean_top_prob_by_age: age_sum.iter().zip(&age_n).map(|(s, &n)| s / n as f64).collect(),
    })
}

impl DatasetStats {
    /// Plain-text table: class, count (percent), mean entropy.
    pub fn to_table(&self) -> String {
        let mut out = String::from("class            num (%)             S_probs\n");
        for row in &self.classes {
            out.push_str(&format!(
                "{:<16} {:>8} ({:>5.1})    {:>8.2}\n",
                row.class, row.count, row.percent, row.mean_entropy
            ));
        }
        out.push_str(&format!(
            "agents with class switches: {:.1}%  (per-step switch rate {:.3})\n",
            100.0 * self.switching_agent_fraction,
            self.switch_rate_per_step
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// Row = true class, column = predicted class; rows sum to one (or are all
    /// zero when a class never occurs).
    pub matrix: Vec<Vec<f64>>,
    /// Top-k accuracy for k = 1..=5 (k beyond K counts every track as a hit).
    pub top_k: Vec<f64>,
    pub num_tracks: usize,
}

/// Confusion matrix of per-track modal argmax classes against `true_class`,
/// plus top-k accuracy over per-track mean probabilities.
pub fn confusion_and_topk<'a>(tracks: impl IntoIterator<Item = &'a AgentTrack>) -> Result<ConfusionReport> {
    let tracks: Vec<&AgentTrack> = tracks.into_iter().collect();
    let k = tracks
        .first()
        .map(|t| t.num_classes())
        .ok_or_else(|| Error::NoEligibleSamples("no tracks".into()))?;
    let mut counts = vec![vec![0usize; k]; k];
    let mut hits = [0usize; 5];
    for track in &tracks {
        let truth = track
            .true_class
            .ok_or_else(|| Error::MissingTrueClass(track.agent_id.clone()))?;
        counts[truth][track.modal_class()] += 1;
        let mean = track.mean_probs();
        let mut order: Vec<usize> = (0..k).collect();
        // stable sort keeps the lowest index first among equal probabilities
        order.sort_by(|&a, &b| mean[b].partial_cmp(&mean[a]).expect("finite probabilities"));
        let rank = order.iter().position(|&c| c == truth).expect("truth in range");
        for (i, h) in hits.iter_mut().enumerate() {
            if rank <= i {
                *h += 1;
            }
        }
    }
    let matrix = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&c| if n > 0 { c as f64 / n as f64 } else { 0.0 }).collect()
        })
        .collect();
    let n = tracks.len() as f64;
    Ok(ConfusionReport {
        matrix,
        top_k: hits.iter().map(|&h| h as f64 / n).collect(),
        num_tracks: tracks.len(),
    })
}
