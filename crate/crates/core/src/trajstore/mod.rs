//! Offline trajectory datasets: the `GDTRAJ01` file format, returns-to-go,
//! K-step training windows and score normalization.

mod format;
mod sampler;
mod scores;
mod synth;

use serde::{Deserialize, Serialize};

pub use format::{decode_dataset, encode_dataset, load_dataset, write_dataset, DATASET_MAGIC};
pub use sampler::{sample_windows, Window};
pub use scores::{normalize_score, NormalizationTable, ScoreRow};
pub use synth::{generate_synthetic, SynthSpec};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateKind {
    Vector {
        dim: usize,
    },
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl StateKind {
    /// Scalars per state payload.
    pub fn len(&self) -> usize {
        match *self {
            StateKind::Vector { dim } => dim,
            StateKind::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match *self {
            StateKind::Vector { dim } => vec![dim],
            StateKind::Image {
                height,
                width,
                channels,
            } => vec![height, width, channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    Discrete { n: usize },
    Continuous { dim: usize },
}

impl ActionKind {
    /// Width of the model's action output (logits or vector).
    pub fn output_width(&self) -> usize {
        match *self {
            ActionKind::Discrete { n } => n,
            ActionKind::Continuous { dim } => dim,
        }
    }
}

/// States of one episode, flattened `T x state_len`.
#[derive(Debug, Clone, PartialEq)]
pub enum States {
    Vector(Vec<f32>),
    Image(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Actions {
    Discrete(Vec<u32>),
    /// Flattened `T x dim`.
    Continuous(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: States,
    pub actions: Actions,
    pub rewards: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    /// Checks the per-episode invariants against a dataset header.
    pub fn validate(
        &self,
        state: &StateKind,
        action: &ActionKind,
    ) -> std::result::Result<(), String> {
        let t = self.len();
        if t == 0 {
            return Err("episode has zero steps".into());
        }
        let slen = state.len();
        match (&self.states, state) {
            (States::Vector(v), StateKind::Vector { .. }) if v.len() == t * slen => {}
            (States::Image(v), StateKind::Image { .. }) if v.len() == t * slen => {}
            _ => return Err("state payloads do not match header shape".into()),
        }
        match (&self.actions, action) {
            (Actions::Discrete(a), ActionKind::Discrete { n }) => {
                if a.len() != t {
                    return Err("action count differs from episode length".into());
                }
                if let Some(bad) = a.iter().find(|&&x| x as usize >= *n) {
                    return Err(format!("action id {bad} out of range for {n} actions"));
                }
            }
            (Actions::Continuous(a), ActionKind::Continuous { dim }) if a.len() == t * dim => {}
            _ => return Err("actions do not match header kind".into()),
        }
        Ok(())
    }

    pub fn state_vector(&self, t: usize, dim: usize) -> Option<&[f32]> {
        match &self.states {
            States::Vector(v) => Some(&v[t * dim..(t + 1) * dim]),
            States::Image(_) => None,
        }
    }
}

/// Suffix sums `rtg[t] = rewards[t] + ... + rewards[T-1]`, accumulated in f64.
pub fn compute_rtg(rewards: &[f32]) -> Result<Vec<f64>> {
    contract!(
        !rewards.is_empty(),
        "returns-to-go of an empty reward sequence"
    );
    let mut out = vec![0.0f64; rewards.len()];
    let mut acc = 0.0f64;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t] as f64;
        out[t] = acc;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub state: StateKind,
    pub action: ActionKind,
    /// Ordered key/value pairs; order is preserved through a round trip.
    pub metadata: Vec<(String, String)>,
}

impl DatasetHeader {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Per-dimension affine normalizer `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(data: &[f32], dim: usize) -> Self {
        let rows = if dim == 0 { 0 } else { data.len() / dim };
        let mut mean = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        for r in 0..rows {
            for j in 0..dim {
                mean[j] += data[r * dim + j] as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.max(1) as f64);
        for r in 0..rows {
            for j in 0..dim {
                sq[j] += (data[r * dim + j] as f64 - mean[j]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let s = (s / rows.max(1) as f64).sqrt();
                if s < 1e-6 {
                    1.0
                } else {
                    s as f32
                }
            })
            .collect();
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        let d = self.mean.len();
        out.extend(
            x.iter()
                .enumerate()
                .map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d]),
        );
    }

    pub fn invert(&self, z: &[f32]) -> Vec<f32> {
        let d = self.mean.len();
        z.iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % d] + self.mean[i % d])
            .collect()
    }
}

/// Continuous-action normalizer plus the dataset action range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub standardizer: Standardizer,
    pub low: Vec<f32>,
    pub high: Vec<f32>,
}

impl ActionNormalizer {
    /// Action range in normalized units, as (center, half-width) per dimension.
    pub fn normalized_bounds(&self) -> (Vec<f32>, Vec<f32>) {
        let s = &self.standardizer;
        let lo: Vec<f32> = self
            .low
            .iter()
            .enumerate()
            .map(|(i, &l)| (l - s.mean[i]) / s.std[i])
            .collect();
        let hi: Vec<f32> = self
            .high
            .iter()
            .enumerate()
            .map(|(i, &h)| (h - s.mean[i]) / s.std[i])
            .collect();
        let center = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let half = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (0.5 * (h - l)).max(1e-3))
            .collect();
        (center, half)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub episodes: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub min_return: f64,
    pub max_return: f64,
    pub max_len: usize,
    pub state_norm: Option<Standardizer>,
    pub action_norm: Option<ActionNormalizer>,
}

/// A validated, immutable dataset with returns-to-go attached.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
    pub rtg: Vec<Vec<f64>>,
    pub stats: DatasetStats,
    /// `cumulative[e]` = steps in episodes before `e`.
    cumulative: Vec<usize>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, trajectories: Vec<Trajectory>) -> Result<Self> {
        contract!(!trajectories.is_empty(), "dataset has no episodes");
        for (i, t) in trajectories.iter().enumerate() {
            t.validate(&header.state, &header.action)
                .map_err(|m| crate::GdtError::Contract(format!("episode {i}: {m}")))?;
        }
        let rtg = trajectories
            .iter()
            .map(|t| compute_rtg(&t.rewards))
            .collect::<Result<Vec<_>>>()?;
        let stats = compute_stats(&header, &trajectories);
        let mut cumulative = Vec::with_capacity(trajectories.len());
        let mut acc = 0;
        for t in &trajectories {
            cumulative.push(acc);
            acc += t.len();
        }
        Ok(Self {
            header,
            trajectories,
            rtg,
            stats,
            cumulative,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.stats.steps
    }

    /// Maps a global step index to `(episode, t)`.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let e = self.cumulative.partition_point(|&c| c <= global) - 1;
        (e, global - self.cumulative[e])
    }
}

fn compute_stats(header: &DatasetHeader, trajectories: &[Trajectory]) -> DatasetStats {
    let returns: Vec<f64> = trajectories.iter().map(|t| t.total_return()).collect();
    let steps = trajectories.iter().map(|t| t.len()).sum();
    let state_norm = match header.state {
        StateKind::Vector { dim } => {
            let all: Vec<f32> = trajectories
                .iter()
                .flat_map(|t| match &t.states {
                    States::Vector(v) => v.clone(),
                    States::Image(_) => Vec::new(),
                })
                .collect();
            Some(Standardizer::fit(&all, dim))
        }
        StateKind::Image { .. } => None,
    };
    let action_norm = match header.action {
        ActionKind::Continuous { dim } => {
            let all: Vec<f32> = trajectories
                .iter()
                .flat_map(|t| match &t.actions {
                    Actions::Continuous(a) => a.clone(),
                    Actions::Discrete(_) => Vec::new(),
                })
                .collect();
            let mut low = vec![f32::INFINITY; dim];
            let mut high = vec![f32::NEG_INFINITY; dim];
            for (i, &a) in all.iter().enumerate() {
                low[i % dim] = low[i % dim].min(a);
                high[i % dim] = high[i % dim].max(a);
            }
            Some(ActionNormalizer {
                standardizer: Standardizer::fit(&all, dim),
                low,
                high,
            })
        }
        ActionKind::Discrete { .. } => None,
    };
    DatasetStats {
        episodes: trajectories.len(),
        steps,
        mean_return: returns.iter().sum::<f64>() / returns.len().max(1) as f64,
        min_return: returns.iter().copied().fold(f64::INFINITY, f64::min),
        max_return: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_len: trajectories.iter().map(|t| t.len()).max().unwrap_or(0),
        state_norm,
        action_norm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(compute_rtg(&[5.0]).unwrap(), vec![5.0]);
        assert!(compute_rtg(&[]).is_err());
    }

    proptest! {
        #[test]
        fn rtg_telescopes_exactly(raw in prop::collection::vec(-4096i32..4096, 1..200)) {
            // rewards on a 1/64 grid are exactly representable, so 64-bit
            // suffix sums are exact
            let rewards: Vec<f32> = raw.iter().map(|&r| r as f32 / 64.0).collect();
            let rtg = compute_rtg(&rewards).unwrap();
            prop_assert_eq!(rtg.len(), rewards.len());
            prop_assert_eq!(*rtg.last().unwrap(), *rewards.last().unwrap() as f64);
            for t in 0..rewards.len() - 1 {
                prop_assert_eq!(rtg[t] - rtg[t + 1], rewards[t] as f64);
            }
        }
    }

    #[test]
    fn locate_maps_global_steps() {
        let ep = |n: usize| Trajectory {
            states: States::Vector(vec![0.0; n]),
            actions: Actions::Discrete(vec![0; n]),
            rewards: vec![1.0; n],
        };
        let header = DatasetHeader {
            state: StateKind::Vector { dim: 1 },
            action: ActionKind::Discrete { n: 2 },
            metadata: vec![],
        };
        let ds = Dataset::new(header, vec![ep(3), ep(1), ep(2)]).unwrap();
        let located: Vec<_> = (0..6).map(|g| ds.locate(g)).collect();
        assert_eq!(
            located,
            vec![(0, 0), (0, 1), (0, 2), (1, 0), (2, 0), (2, 1)]
        );
        assert_eq!(ds.stats.mean_return, 2.0);
    }

    #[test]
    fn standardizer_handles_constant_dims() {
        let s = Standardizer::fit(&[1.0, 0.0, 3.0, 0.0], 2);
        assert_eq!(s.mean, vec![2.0, 0.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        let mut out = Vec::new();
        s.apply(&[3.0, 5.0], &mut out);
        assert_eq!(out, vec![1.0, 5.0]);
        assert_eq!(s.invert(&out), vec![3.0, 5.0]);
    }
}
