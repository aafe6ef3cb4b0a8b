//! Synthetic datasets rolled out on the toy environments by an
//! epsilon-optimal scripted policy.

use rand::Rng;

use super::{Actions, DatasetHeader, NormalizationTable, States, Trajectory};
use crate::error::Result;
use crate::evalrollout::{EnvSpec, Observation};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub env: EnvSpec,
    /// Exploration rates; episode `i` uses `epsilons[i % len]`.
    pub epsilons: Vec<f64>,
    pub episodes: usize,
    pub seed: u64,
}

/// Rolls out `spec.episodes` episodes. The header records the environment,
/// the exploration rates and the random/optimal baselines for score
/// normalization.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    crate::error::contract!(
        !spec.epsilons.is_empty(),
        "at least one exploration rate is required"
    );
    crate::error::contract!(
        spec.epsilons.iter().all(|e| (0.0..=1.0).contains(e)),
        "exploration rates must lie in [0, 1]"
    );
    let plan = spec.env.plan();
    let mut env = spec.env.make(spec.seed);
    let mut policy = seed::rng(spec.seed, Stream::Synth, 0);
    let n_actions = spec.env.num_actions();
    let mut episodes = Vec::with_capacity(spec.episodes);
    for i in 0..spec.episodes {
        let eps = spec.epsilons[i % spec.epsilons.len()];
        let mut obs = env.reset();
        let (mut vec_states, mut img_states) = (Vec::new(), Vec::new());
        let (mut actions, mut rewards) = (Vec::new(), Vec::new());
        loop {
            match obs {
                Observation::Vector(v) => vec_states.extend(v),
                Observation::Image(v) => img_states.extend(v),
            }
            let a = if policy.random::<f64>() < eps {
                policy.random_range(0..n_actions)
            } else {
                plan.best_action(env.t(), env.cell())
            };
            let step = env.step(a)?;
            actions.push(a as u32);
            rewards.push(step.reward);
            obs = step.observation;
            if step.done {
                break;
            }
        }
        let states = if img_states.is_empty() {
            States::Vector(vec_states)
        } else {
            States::Image(img_states)
        };
        episodes.push(Trajectory {
            states,
            actions: Actions::Discrete(actions),
            rewards,
        });
    }
    let eps_list: Vec<String> = spec.epsilons.iter().map(|e| e.to_string()).collect();
    let header = DatasetHeader {
        state: spec.env.state_kind(),
        action: spec.env.action_kind(),
        metadata: vec![
            ("env".into(), spec.env.to_string()),
            ("eps".into(), eps_list.join(",")),
            ("seed".into(), spec.seed.to_string()),
            ("task".into(), spec.env.to_string()),
            ("score.random".into(), plan.random_mean.to_string()),
            ("score.expert".into(), plan.optimal_return.to_string()),
        ],
    };
    Ok((header, episodes))
}

impl NormalizationTable {
    /// The default table plus the baseline row carried in a dataset header,
    /// if any.
    pub fn with_dataset(header: &DatasetHeader) -> Result<Self> {
        let mut table = Self::default();
        if let (Some(task), Some(r), Some(e)) = (
            header.meta("task"),
            header.meta("score.random"),
            header.meta("score.expert"),
        ) {
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    crate::GdtError::Config(format!("bad baseline score `{s}` in dataset metadata"))
                })
            };
            table.insert(task, parse(r)?, parse(e)?)?;
        }
        Ok(table)
    }
}
