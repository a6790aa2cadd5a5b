//! Trajectory datasets and their JSON-lines file format.
//!
//! A dataset file starts with a metadata line prefixed `#meta ` followed by
//! one JSON object per trajectory:
//!
//! ```text
//! #meta {"env":"bidirectional-car","mode":"both","seed":7,...}
//! {"observations":[[x,v],...],"actions":[[a],...],"rewards":[...],"terminals":[...],"timeouts":[...]}
//! ```

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub timeouts: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        if n == 0 {
            return Err(Error::invalid("empty trajectory"));
        }
        for (what, len) in [
            ("observations", self.observations.len()),
            ("actions", self.actions.len()),
            ("terminals", self.terminals.len()),
            ("timeouts", self.timeouts.len()),
        ] {
            if len != n {
                return Err(Error::shape(format!("trajectory {what}"), n, len));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("trajectory rewards".into()));
        }
        if self
            .observations
            .iter()
            .chain(&self.actions)
            .any(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("trajectory observations/actions".into()));
        }
        for i in 0..n - 1 {
            if self.terminals[i] || self.timeouts[i] {
                return Err(Error::invalid(format!("episode end flag set at inner step {i}")));
            }
        }
        if self.terminals[n - 1] == self.timeouts[n - 1] {
            return Err(Error::invalid(
                "last step must have exactly one of terminal/timeout set",
            ));
        }
        Ok(())
    }

    pub fn final_observation(&self) -> &[f64] {
        &self.observations[self.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub mode: String,
    pub seed: u64,
    pub n_trajectories: usize,
    pub n_records: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    /// Builds a dataset, filling the count and dimension fields of `meta`.
    pub fn new(env: &str, mode: &str, seed: u64, trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::invalid("dataset has no trajectories"))?;
        let state_dim = first.observations.first().map_or(0, Vec::len);
        let action_dim = first.actions.first().map_or(0, Vec::len);
        let meta = DatasetMeta {
            env: env.into(),
            mode: mode.into(),
            seed,
            n_trajectories: trajectories.len(),
            n_records: trajectories.iter().map(Trajectory::len).sum(),
            state_dim,
            action_dim,
        };
        let ds = Self { meta, trajectories };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::invalid("dataset has no trajectories"));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            t.validate()
                .map_err(|e| Error::invalid(format!("trajectory {i}: {e}")))?;
            let dims_ok = t.observations.iter().all(|o| o.len() == self.meta.state_dim)
                && t.actions.iter().all(|a| a.len() == self.meta.action_dim);
            if !dims_ok {
                return Err(Error::invalid(format!(
                    "trajectory {i}: state/action dims differ from ({}, {})",
                    self.meta.state_dim, self.meta.action_dim
                )));
            }
        }
        Ok(())
    }

    pub fn num_records(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn transitions(&self) -> Transitions {
        let n = self.num_records();
        let (sd, ad) = (self.meta.state_dim, self.meta.action_dim);
        let mut states = Array2::zeros((n, sd));
        let mut actions = Array2::zeros((n, ad));
        let mut rewards = Vec::with_capacity(n);
        let mut terminals = Vec::with_capacity(n);
        let mut timeouts = Vec::with_capacity(n);
        let mut row = 0;
        for t in &self.trajectories {
            for i in 0..t.len() {
                for (j, &v) in t.observations[i].iter().enumerate() {
                    states[[row, j]] = v;
                }
                for (j, &v) in t.actions[i].iter().enumerate() {
                    actions[[row, j]] = v;
                }
                row += 1;
            }
            rewards.extend_from_slice(&t.rewards);
            terminals.extend_from_slice(&t.terminals);
            timeouts.extend_from_slice(&t.timeouts);
        }
        Transitions {
            states,
            actions,
            rewards,
            terminals,
            timeouts,
            targets: vec![0.0; n],
        }
    }
}

/// Flattened, time-ordered records of a dataset with a scratch column for
/// Q-training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub timeouts: Vec<bool>,
    pub targets: Vec<f64>,
}

impl Transitions {
    /// Records of a single action dimension and a dummy one-dimensional state,
    /// grouped into episodes by `episode_ends`. Mostly useful in tests.
    pub fn from_rewards(rewards: &[f64], episode_ends: &[bool]) -> Self {
        let n = rewards.len();
        Self {
            states: Array2::zeros((n, 1)),
            actions: Array2::zeros((n, 1)),
            rewards: rewards.to_vec(),
            terminals: episode_ends.to_vec(),
            timeouts: vec![false; n],
            targets: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn is_episode_end(&self, i: usize) -> bool {
        self.terminals[i] || self.timeouts[i]
    }

    /// Index ranges of consecutive episodes. Fails if the last record does not
    /// close an episode.
    pub fn episodes(&self) -> Result<Vec<Range<usize>>> {
        let n = self.len();
        if self.terminals.len() != n || self.timeouts.len() != n {
            return Err(Error::shape("episode flags", n, self.terminals.len()));
        }
        if n > 0 && !self.is_episode_end(n - 1) {
            return Err(Error::invalid("final record is not marked terminal or timeout"));
        }
        let mut out = Vec::new();
        let mut start = 0;
        for i in 0..n {
            if self.is_episode_end(i) {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        Ok(out)
    }
}

const META_PREFIX: &str = "#meta ";

pub fn encode_dataset(dataset: &Dataset) -> Result<String> {
    dataset.validate()?;
    let mut out = String::new();
    writeln!(out, "{META_PREFIX}{}", serde_json::to_string(&dataset.meta)?).unwrap();
    for t in &dataset.trajectories {
        writeln!(out, "{}", serde_json::to_string(t)?).unwrap();
    }
    Ok(out)
}

pub fn decode_dataset(text: &str) -> Result<Dataset> {
    let mut meta: Option<DatasetMeta> = None;
    let mut trajectories = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(META_PREFIX) {
            if idx != 0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "metadata must be the first line".into(),
                });
            }
            meta = Some(serde_json::from_str(rest).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?);
            continue;
        }
        let t: Trajectory = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        t.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        trajectories.push(t);
    }
    if trajectories.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: "no trajectories".into(),
        });
    }
    let ds = match meta {
        Some(meta) => {
            let ds = Dataset { meta, trajectories };
            if ds.meta.n_trajectories != ds.trajectories.len() || ds.meta.n_records != ds.num_records() {
                return Err(Error::Parse {
                    line: 1,
                    message: format!(
                        "metadata announces {} trajectories / {} records, file holds {} / {}",
                        ds.meta.n_trajectories,
                        ds.meta.n_records,
                        ds.trajectories.len(),
                        ds.num_records()
                    ),
                });
            }
            ds
        }
        None => Dataset::new("unknown", "unknown", 0, trajectories)?,
    };
    ds.validate().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    Ok(ds)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(dataset)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rewards: &[f64], terminal: bool) -> Trajectory {
        let n = rewards.len();
        let mut terminals = vec![false; n];
        let mut timeouts = vec![false; n];
        if terminal {
            terminals[n - 1] = true;
        } else {
            timeouts[n - 1] = true;
        }
        Trajectory {
            observations: (0..n).map(|i| vec![i as f64 * 0.1, 0.05]).collect(),
            actions: (0..n).map(|i| vec![0.1 + i as f64 / 3.0]).collect(),
            rewards: rewards.to_vec(),
            terminals,
            timeouts,
        }
    }

    fn sample() -> Dataset {
        Dataset::new(
            "toy",
            "both",
            3,
            vec![traj(&[0.0, 0.0, 1.0], true), traj(&[0.0, 0.0], false)],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = sample();
        let text = encode_dataset(&ds).unwrap();
        assert!(text.starts_with("#meta "));
        assert_eq!(decode_dataset(&text).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = encode_dataset(&sample()).unwrap();
        let cut = &text[..text.len() - 15];
        match decode_dataset(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dropped_trajectory_line_detected_through_meta() {
        let text = encode_dataset(&sample()).unwrap();
        let without_last: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            decode_dataset(&without_last),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_dataset_rejected_on_write() {
        let mut ds = sample();
        ds.trajectories.clear();
        assert!(encode_dataset(&ds).is_err());
        assert!(Dataset::new("toy", "both", 0, vec![]).is_err());
    }

    #[test]
    fn last_step_flags_are_enforced() {
        let mut t = traj(&[0.0, 1.0], true);
        t.timeouts[1] = true;
        assert!(t.validate().is_err());
        let mut t = traj(&[0.0, 1.0], true);
        t.terminals[0] = true;
        assert!(t.validate().is_err());
    }

    #[test]
    fn transitions_flatten_in_order() {
        let tr = sample().transitions();
        assert_eq!(tr.len(), 5);
        assert_eq!(tr.episodes().unwrap(), vec![0..3, 3..5]);
        assert_eq!(tr.rewards, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(tr.terminals[2] && tr.timeouts[4]);
        assert_eq!(tr.states[[1, 0]], 0.1);
    }
}
