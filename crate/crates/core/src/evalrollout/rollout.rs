use std::collections::VecDeque;

use rand::Rng;

use super::env::{EnvSpec, Observation};
use crate::error::{GdtError, Result};
use crate::graphrep::RewardSetting;
use crate::model::{Batch, BatchActions, Gdt};
use crate::ndcore::ParamStore;
use crate::seed::{self, Stream};
use crate::trajstore::{ActionKind, NormalizationTable};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    /// Initial return-to-go.
    pub target: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Lower bound on the running return-to-go.
    pub floor: Option<f64>,
    /// Sample discrete actions from the softmax instead of taking the argmax.
    pub sample: bool,
}

impl RolloutConfig {
    pub fn new(target: f64, episodes: usize, seed: u64) -> Self {
        Self {
            target,
            episodes,
            seed,
            floor: None,
            sample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub raw_return: f64,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    /// Return-to-go after the last decrement.
    pub final_rtg: f64,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub env: EnvSpec,
    pub target: f64,
    pub seed: u64,
    pub episodes: Vec<EpisodeTrace>,
    pub mean_return: f64,
    pub std_return: f64,
    /// Mean return on the 0 (random) to 100 (expert) scale, when the
    /// environment has a table row.
    pub normalized: Option<f64>,
    pub action_histogram: Vec<usize>,
}

impl RolloutReport {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(EpisodeTrace::steps).sum()
    }
}

/// Sliding window of the most recent `k` steps fed to the model.
#[derive(Debug, Clone)]
pub struct RolloutContext {
    k: usize,
    setting: RewardSetting,
    states: VecDeque<Vec<f32>>,
    actions: VecDeque<usize>,
    returns: VecDeque<f32>,
    timesteps: VecDeque<usize>,
}

impl RolloutContext {
    pub fn new(k: usize, setting: RewardSetting) -> Self {
        Self {
            k,
            setting,
            states: VecDeque::new(),
            actions: VecDeque::new(),
            returns: VecDeque::new(),
            timesteps: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Opens step `t` with a preprocessed state and the value of its reward
    /// token. The action slot stays a placeholder until [`Self::commit`].
    pub fn push(&mut self, state: Vec<f32>, token_value: f32, t: usize) {
        if self.states.len() == self.k {
            self.states.pop_front();
            self.actions.pop_front();
            self.returns.pop_front();
            self.timesteps.pop_front();
        }
        self.states.push_back(state);
        self.actions.push_back(0);
        self.returns.push_back(token_value);
        self.timesteps.push_back(t);
    }

    pub fn commit(&mut self, action: usize) {
        if let Some(a) = self.actions.back_mut() {
            *a = action;
        }
    }

    /// Left-padded single-window batch.
    pub fn batch(&self, model: &Gdt) -> Batch {
        let slen = model.io.state.len();
        let pad = self.k - self.len();
        let mut states = vec![0.0; pad * slen];
        let mut actions = vec![0; pad];
        let mut returns = vec![0.0; pad];
        let mut timesteps = vec![0; pad];
        for i in 0..self.len() {
            states.extend_from_slice(&self.states[i]);
            actions.push(self.actions[i]);
            returns.push(if self.setting == RewardSetting::NoReward {
                0.0
            } else {
                self.returns[i]
            });
            timesteps.push(self.timesteps[i]);
        }
        Batch {
            size: 1,
            k: self.k,
            states,
            actions: BatchActions::Discrete(actions),
            returns,
            timesteps,
            pad: (0..self.k).map(|i| i < pad).collect(),
        }
    }
}

fn check_spec(model: &Gdt, env: &EnvSpec) -> Result<()> {
    env.validate()?;
    if model.io.state != env.state_kind() || model.io.action != env.action_kind() {
        return Err(GdtError::Config(format!(
            "model expects {:?} states and {:?} actions; {env} provides {:?} and {:?}",
            model.io.state,
            model.io.action,
            env.state_kind(),
            env.action_kind()
        )));
    }
    match model.io.action {
        ActionKind::Discrete { .. } => Ok(()),
        ActionKind::Continuous { .. } => Err(GdtError::Config(
            "toy environments take discrete actions".into(),
        )),
    }
}

/// Normalization rows for the built-in tables plus `env`, using its exact
/// random-policy and optimal returns.
pub fn env_table(env: &EnvSpec) -> NormalizationTable {
    let mut table = NormalizationTable::default();
    let plan = env.plan();
    // a degenerate environment where random play is optimal has no row
    let _ = table.insert(&env.to_string(), plan.random_mean, plan.optimal_return);
    table
}

fn pick(logits: &[f32], sample: bool, rng: &mut impl Rng) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    if !sample {
        return best;
    }
    let m = logits[best] as f64;
    let w: Vec<f64> = logits.iter().map(|&x| (x as f64 - m).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    best
}

/// Runs `cfg.episodes` return-conditioned episodes of `env`.
pub fn rollout(
    model: &Gdt,
    store: &ParamStore<f32>,
    env: &EnvSpec,
    cfg: &RolloutConfig,
    table: &NormalizationTable,
) -> Result<RolloutReport> {
    check_spec(model, env)?;
    let setting = model.config.reward;
    let scale = model.io.return_scale as f64;
    let n_actions = env.num_actions();
    let mut sim = env.make(cfg.seed);
    let mut sampler = seed::rng(cfg.seed, Stream::Env, 1);
    let mut histogram = vec![0; n_actions];
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let mut obs = sim.reset();
        let mut ctx = RolloutContext::new(model.config.context, setting);
        let mut rtg = cfg.target;
        let mut trace = EpisodeTrace {
            raw_return: 0.0,
            actions: Vec::new(),
            rewards: Vec::new(),
            final_rtg: rtg,
        };
        loop {
            let mut state = Vec::with_capacity(model.io.state.len());
            match &obs {
                Observation::Vector(v) => model.io.push_state_vector(v, &mut state),
                Observation::Image(v) => model.io.push_state_image(v, &mut state),
            }
            let token = match setting {
                RewardSetting::Rtg => rtg / scale,
                RewardSetting::StepReward => {
                    trace.rewards.last().map_or(0.0, |&r| r as f64 / scale)
                }
                RewardSetting::NoReward => 0.0,
            };
            ctx.push(state, token as f32, sim.t());
            let logits = model.predict_last(store, &ctx.batch(model))?.remove(0);
            let a = pick(&logits, cfg.sample, &mut sampler);
            ctx.commit(a);
            let step = sim.step(a)?;
            histogram[a] += 1;
            trace.actions.push(a);
            trace.rewards.push(step.reward);
            trace.raw_return += step.reward as f64;
            rtg -= step.reward as f64;
            if let Some(floor) = cfg.floor {
                rtg = rtg.max(floor);
            }
            obs = step.observation;
            if step.done {
                break;
            }
        }
        trace.final_rtg = rtg;
        episodes.push(trace);
    }
    let returns: Vec<f64> = episodes.iter().map(|e| e.raw_return).collect();
    let (mean_return, std_return) = mean_std(&returns);
    let normalized = table.normalize(mean_return, &env.to_string()).ok();
    Ok(RolloutReport {
        env: *env,
        target: cfg.target,
        seed: cfg.seed,
        episodes,
        mean_return,
        std_return,
        normalized,
        action_histogram: histogram,
    })
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphrep::build_causal_adjacency;
    use crate::model::{IoSpec, ModelConfig, SeqConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(env: &EnvSpec, reward: RewardSetting) -> (Gdt, ParamStore<f32>) {
        let cfg = ModelConfig {
            context: 3,
            width: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            max_timestep: 32,
            reward,
            ..ModelConfig::default()
        };
        let io = IoSpec::raw(env.state_kind(), env.action_kind());
        Gdt::build(&cfg, &SeqConfig::default(), io, 4).unwrap()
    }

    #[test]
    fn rtg_decrement_telescopes() {
        let env: EnvSpec = "chain:6:0.3".parse().unwrap();
        let (m, store) = model(&env, RewardSetting::Rtg);
        let report = rollout(
            &m,
            &store,
            &env,
            &RolloutConfig::new(4.0, 5, 1),
            &env_table(&env),
        )
        .unwrap();
        for ep in &report.episodes {
            let total: f64 = ep.rewards.iter().map(|&r| r as f64).sum();
            assert_eq!(4.0 - total, ep.final_rtg);
            assert!(ep.steps() <= env.horizon());
        }
        assert_eq!(
            report.action_histogram.iter().sum::<usize>(),
            report.total_steps()
        );
    }

    #[test]
    fn floor_bounds_the_running_target() {
        let env: EnvSpec = "chain:4".parse().unwrap();
        let (m, store) = model(&env, RewardSetting::Rtg);
        let mut cfg = RolloutConfig::new(-3.0, 3, 0);
        cfg.floor = Some(0.0);
        let report = rollout(&m, &store, &env, &cfg, &env_table(&env)).unwrap();
        assert!(report.episodes.iter().all(|e| e.final_rtg >= 0.0));
    }

    #[test]
    fn same_seed_same_trace() {
        let env: EnvSpec = "chain:5:0.2".parse().unwrap();
        let (m, store) = model(&env, RewardSetting::Rtg);
        let mut cfg = RolloutConfig::new(4.0, 4, 9);
        cfg.sample = true;
        let a = rollout(&m, &store, &env, &cfg, &env_table(&env)).unwrap();
        let b = rollout(&m, &store, &env, &cfg, &env_table(&env)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_is_ignored_without_reward_tokens() {
        let env: EnvSpec = "grid:3".parse().unwrap();
        let (m, store) = model(&env, RewardSetting::NoReward);
        let table = env_table(&env);
        let a = rollout(&m, &store, &env, &RolloutConfig::new(0.0, 2, 3), &table).unwrap();
        let b = rollout(&m, &store, &env, &RolloutConfig::new(50.0, 2, 3), &table).unwrap();
        assert_eq!(
            a.episodes.iter().map(|e| &e.actions).collect::<Vec<_>>(),
            b.episodes.iter().map(|e| &e.actions).collect::<Vec<_>>()
        );
    }

    #[test]
    fn spec_mismatch_fails_before_any_episode() {
        let env: EnvSpec = "chain:5".parse().unwrap();
        let (m, store) = model(&env, RewardSetting::Rtg);
        let other: EnvSpec = "grid:3".parse().unwrap();
        let err = rollout(
            &m,
            &store,
            &other,
            &RolloutConfig::new(1.0, 1, 0),
            &env_table(&other),
        )
        .unwrap_err();
        assert!(matches!(err, GdtError::Config(_)), "{err}");
    }

    #[test]
    fn context_keeps_the_latest_k_steps() {
        let env: EnvSpec = "chain:8".parse().unwrap();
        let (m, _) = model(&env, RewardSetting::Rtg);
        let mut ctx = RolloutContext::new(3, RewardSetting::Rtg);
        for t in 0..7 {
            ctx.push(vec![t as f32; 8], -(t as f32), t);
            ctx.commit(t % 2);
            assert_eq!(ctx.len(), (t + 1).min(3));
        }
        let b = ctx.batch(&m);
        assert!(b.pad.iter().all(|p| !p));
        assert_eq!(b.timesteps, vec![4, 5, 6]);
        assert_eq!(b.returns, vec![-4.0, -5.0, -6.0]);
        assert_eq!(b.actions, BatchActions::Discrete(vec![0, 1, 0]));
        // a full window has exactly the fresh K-step graph with no padding edges
        let layout = m.graph().layout(&b);
        let fresh = build_causal_adjacency(3, RewardSetting::Rtg);
        assert_eq!(
            layout.relation.as_deref().unwrap(),
            &fresh.relation_matrix()[..]
        );
    }

    #[test]
    fn sampling_follows_the_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.0f32, (3.0f32).ln()];
        let ones = (0..4000)
            .filter(|_| pick(&logits, true, &mut rng) == 1)
            .count();
        assert!((2850..=3150).contains(&ones), "{ones}");
        assert_eq!(pick(&logits, false, &mut rng), 1);
    }

    #[test]
    fn moments() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }
}
