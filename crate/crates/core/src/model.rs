//! The full model: graph network, optional sequence network, batching and
//! the training objective.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, GdtError, Result};
use crate::graphformer::GraphFormer;
use crate::graphrep::{build_adjacency, ConnectionMode, RewardSetting};
use crate::ndcore::layers::Activation;
use crate::ndcore::{
    load_checkpoint, restore_params, save_checkpoint, AdamState, NamedTensors, ParamStore, Scalar,
    Tape, Var,
};
use crate::seed::{self, Stream};
use crate::seqformer::{SeqFormer, StMethod};
use crate::trajstore::{
    ActionKind, ActionNormalizer, Actions, Dataset, Standardizer, StateKind, States, Window,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Window length K.
    pub context: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Episode steps beyond this share the last timestep embedding.
    pub max_timestep: usize,
    pub activation: Activation,
    /// Nonlinearity between the frame-encoder convolutions.
    pub encoder_activation: Activation,
    pub connection: ConnectionMode,
    pub reward: RewardSetting,
    /// Filters of the three frame-encoder blocks.
    pub conv_channels: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context: 30,
            width: 128,
            layers: 6,
            heads: 8,
            dropout: 0.1,
            max_timestep: 1000,
            activation: Activation::Gelu,
            encoder_activation: Activation::Relu,
            connection: ConnectionMode::Causal,
            reward: RewardSetting::Rtg,
            conv_channels: [32, 64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqConfig {
    pub enabled: bool,
    pub method: StMethod,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            method: StMethod::Stack,
            patch: 14,
            width: 64,
            layers: 2,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, seq: &SeqConfig) -> Result<()> {
        let bad = |m: String| Err(GdtError::Config(m));
        if self.context == 0 || self.width == 0 || self.layers == 0 || self.heads == 0 {
            return bad("context, width, layers and heads must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if seq.enabled {
            if seq.width == 0 || seq.layers == 0 || seq.heads == 0 || seq.width % seq.heads != 0 {
                return bad(format!(
                    "sequence width {} / heads {} invalid",
                    seq.width, seq.heads
                ));
            }
        }
        Ok(())
    }
}

/// Observation and action interface of a trained model, with the
/// normalizers applied to inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSpec {
    pub state: StateKind,
    pub action: ActionKind,
    /// Divides returns-to-go and rewards before they are embedded.
    pub return_scale: f32,
    pub state_norm: Option<Standardizer>,
    pub action_norm: Option<ActionNormalizer>,
    /// Normalized action range as center and half-width, continuous only.
    pub action_center: Vec<f32>,
    pub action_half: Vec<f32>,
}

impl IoSpec {
    pub fn from_dataset(ds: &Dataset, return_scale: f32) -> Self {
        let (action_center, action_half) = match &ds.stats.action_norm {
            Some(n) => n.normalized_bounds(),
            None => (Vec::new(), Vec::new()),
        };
        Self {
            state: ds.header.state,
            action: ds.header.action,
            return_scale,
            state_norm: ds.stats.state_norm.clone(),
            action_norm: ds.stats.action_norm.clone(),
            action_center,
            action_half,
        }
    }

    /// Interface without normalizers.
    pub fn raw(state: StateKind, action: ActionKind) -> Self {
        let dim = match action {
            ActionKind::Continuous { dim } => dim,
            ActionKind::Discrete { .. } => 0,
        };
        Self {
            state,
            action,
            return_scale: 1.0,
            state_norm: None,
            action_norm: None,
            action_center: vec![0.0; dim],
            action_half: vec![1.0; dim],
        }
    }

    /// Appends one preprocessed state to `out`.
    pub fn push_state_vector(&self, raw: &[f32], out: &mut Vec<f32>) {
        match &self.state_norm {
            Some(n) => n.apply(raw, out),
            None => out.extend_from_slice(raw),
        }
    }

    pub fn push_state_image(&self, raw: &[u8], out: &mut Vec<f32>) {
        out.extend(raw.iter().map(|&p| p as f32 / 255.0));
    }

    pub fn push_action(&self, raw: &[f32], out: &mut Vec<f32>) {
        match &self.action_norm {
            Some(n) => n.standardizer.apply(raw, out),
            None => out.extend_from_slice(raw),
        }
    }

    /// Maps a normalized continuous prediction back to environment units.
    pub fn denormalize_action(&self, z: &[f32]) -> Vec<f32> {
        match &self.action_norm {
            Some(n) => n.standardizer.invert(z),
            None => z.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchActions {
    Discrete(Vec<usize>),
    /// `batch * K x dim`, normalized.
    Continuous(Vec<f32>),
}

/// Model input for `size` windows of `k` steps, rows ordered (window, step).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub k: usize,
    /// Preprocessed states, `size * k x state_len`.
    pub states: Vec<f32>,
    pub actions: BatchActions,
    /// Value of the reward-kind token of each step (scaled return-to-go or
    /// previous reward); unused without reward tokens.
    pub returns: Vec<f32>,
    pub timesteps: Vec<usize>,
    /// True at left-padded steps.
    pub pad: Vec<bool>,
}

impl Batch {
    pub fn check(&self, io: &IoSpec) -> Result<()> {
        let rows = self.size * self.k;
        contract!(rows > 0, "empty batch");
        contract!(
            self.states.len() == rows * io.state.len(),
            "batch holds {} state values, expected {}",
            self.states.len(),
            rows * io.state.len()
        );
        let alen = match (&self.actions, io.action) {
            (BatchActions::Discrete(a), ActionKind::Discrete { .. }) => a.len(),
            (BatchActions::Continuous(a), ActionKind::Continuous { dim }) => a.len() / dim,
            _ => {
                return Err(GdtError::Contract(
                    "batch action kind differs from model".into(),
                ))
            }
        };
        contract!(alen == rows, "batch holds {alen} actions for {rows} steps");
        contract!(
            self.returns.len() == rows && self.timesteps.len() == rows && self.pad.len() == rows,
            "batch side arrays do not match {rows} steps"
        );
        Ok(())
    }

    /// Random well-formed batch: windows are left-padded by a random number
    /// of steps (`max_pad` at most, never the whole window).
    pub fn random<R: Rng + ?Sized>(
        io: &IoSpec,
        size: usize,
        k: usize,
        max_pad: usize,
        rng: &mut R,
    ) -> Self {
        let rows = size * k;
        let mut pad = Vec::with_capacity(rows);
        for _ in 0..size {
            let p = rng.random_range(0..=max_pad.min(k - 1));
            pad.extend((0..k).map(|i| i < p));
        }
        let states = match io.state {
            StateKind::Vector { dim } => (0..rows * dim)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
            StateKind::Image { .. } => (0..rows * io.state.len())
                .map(|_| rng.random_range(0..=255u8) as f32 / 255.0)
                .collect(),
        };
        let actions = match io.action {
            ActionKind::Discrete { n } => {
                BatchActions::Discrete((0..rows).map(|_| rng.random_range(0..n)).collect())
            }
            ActionKind::Continuous { dim } => BatchActions::Continuous(
                (0..rows * dim)
                    .map(|_| rng.random_range(-0.9f32..0.9))
                    .collect(),
            ),
        };
        let mut timesteps = Vec::with_capacity(rows);
        for b in 0..size {
            let start = rng.random_range(0..8usize);
            for i in 0..k {
                timesteps.push(if pad[b * k + i] { 0 } else { start + i });
            }
        }
        Self {
            size,
            k,
            states,
            actions,
            returns: (0..rows).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
            timesteps,
            pad,
        }
    }

    /// Gathers windows from a dataset.
    pub fn from_windows(
        ds: &Dataset,
        windows: &[Window],
        io: &IoSpec,
        setting: RewardSetting,
    ) -> Result<Self> {
        contract!(!windows.is_empty(), "no windows to batch");
        let k = windows[0].k;
        contract!(windows.iter().all(|w| w.k == k), "windows of mixed length");
        let slen = io.state.len();
        let rows = windows.len() * k;
        let mut states = Vec::with_capacity(rows * slen);
        let mut returns = Vec::with_capacity(rows);
        let mut timesteps = Vec::with_capacity(rows);
        let mut pad = Vec::with_capacity(rows);
        let mut discrete = Vec::new();
        let mut continuous = Vec::new();
        let adim = io.action.output_width();
        for w in windows {
            let ep = &ds.trajectories[w.episode];
            for slot in w.steps() {
                let Some(t) = slot else {
                    states.extend(std::iter::repeat_n(0.0, slen));
                    match io.action {
                        ActionKind::Discrete { .. } => discrete.push(0),
                        ActionKind::Continuous { dim } => {
                            continuous.extend(std::iter::repeat_n(0.0, dim))
                        }
                    }
                    returns.push(0.0);
                    timesteps.push(0);
                    pad.push(true);
                    continue;
                };
                match &ep.states {
                    States::Vector(v) => {
                        io.push_state_vector(&v[t * slen..(t + 1) * slen], &mut states)
                    }
                    States::Image(v) => {
                        io.push_state_image(&v[t * slen..(t + 1) * slen], &mut states)
                    }
                }
                match &ep.actions {
                    Actions::Discrete(a) => discrete.push(a[t] as usize),
                    Actions::Continuous(a) => {
                        io.push_action(&a[t * adim..(t + 1) * adim], &mut continuous)
                    }
                }
                let value = match setting {
                    RewardSetting::Rtg => ds.rtg[w.episode][t],
                    RewardSetting::StepReward if t > 0 => ep.rewards[t - 1] as f64,
                    _ => 0.0,
                };
                returns.push((value / io.return_scale as f64) as f32);
                timesteps.push(t);
                pad.push(false);
            }
        }
        let actions = match io.action {
            ActionKind::Discrete { .. } => BatchActions::Discrete(discrete),
            ActionKind::Continuous { .. } => BatchActions::Continuous(continuous),
        };
        let batch = Self {
            size: windows.len(),
            k,
            states,
            actions,
            returns,
            timesteps,
            pad,
        };
        batch.check(io)?;
        Ok(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy for discrete actions.
    #[default]
    CrossEntropy,
    /// Squared error between the softmax and one-hot targets.
    MseOnehot,
}

/// Graph network plus optional sequence network. Parameters live in a
/// separate store so the same architecture runs in either precision.
#[derive(Debug, Clone)]
pub struct Gdt {
    pub config: ModelConfig,
    pub seq_config: SeqConfig,
    pub io: IoSpec,
    /// Root seed the parameters and any random edge set were drawn from.
    pub seed: u64,
    graph: GraphFormer,
    seq: Option<SeqFormer>,
}

impl Gdt {
    /// Builds the model and initializes parameters from `seed`. A random
    /// connection mode takes its edge seed from `seed` as well.
    pub fn build<F: Scalar>(
        config: &ModelConfig,
        seq_config: &SeqConfig,
        io: IoSpec,
        seed: u64,
    ) -> Result<(Self, ParamStore<F>)> {
        config.validate(seq_config)?;
        let mode = match config.connection {
            ConnectionMode::Random { p, .. } => ConnectionMode::Random {
                p,
                seed: seed::derive(seed, Stream::Graph),
            },
            other => other,
        };
        let graph = build_adjacency(config.context, mode, config.reward);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, Stream::Init));
        let gf = GraphFormer::new(
            &mut store,
            config,
            &io,
            graph,
            !seq_config.enabled,
            &mut rng,
        )?;
        let seq = if seq_config.enabled {
            Some(SeqFormer::new(
                &mut store, config, seq_config, &io, &mut rng,
            )?)
        } else {
            None
        };
        Ok((
            Self {
                config: config.clone(),
                seq_config: seq_config.clone(),
                io,
                seed,
                graph: gf,
                seq,
            },
            store,
        ))
    }

    pub fn graph(&self) -> &GraphFormer {
        &self.graph
    }

    pub fn seq(&self) -> Option<&SeqFormer> {
        self.seq.as_ref()
    }

    /// Action predictions for every step, `batch * K x out`: logits for
    /// discrete actions, normalized vectors for continuous ones.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
    ) -> Result<Var> {
        match &self.seq {
            None => {
                let out = self.graph.forward(tape, store, batch, &self.io, &[])?;
                let g = out
                    .features
                    .last()
                    .copied()
                    .flatten()
                    .expect("final layer feature");
                self.graph.head(tape, store, g, &self.io)
            }
            Some(seq) => {
                let out =
                    self.graph
                        .forward(tape, store, batch, &self.io, &seq.wanted_graph_layers())?;
                seq.forward(tape, store, batch, &self.io, &out)
            }
        }
    }

    /// Mean action loss over unpadded steps.
    pub fn loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        kind: LossKind,
    ) -> Result<Var> {
        let pred = self.forward(tape, store, batch)?;
        let weight: Vec<F> = batch
            .pad
            .iter()
            .map(|&p| if p { F::zero() } else { F::one() })
            .collect();
        match (&batch.actions, self.io.action) {
            (BatchActions::Discrete(ids), ActionKind::Discrete { n }) => match kind {
                LossKind::CrossEntropy => tape.cross_entropy(pred, ids, &weight),
                LossKind::MseOnehot => {
                    let probs = tape.softmax(pred)?;
                    let mut target = vec![F::zero(); ids.len() * n];
                    for (r, &a) in ids.iter().enumerate() {
                        contract!(a < n, "action {a} out of range for {n} actions");
                        target[r * n + a] = F::one();
                    }
                    tape.mse_loss(probs, &target, &weight)
                }
            },
            (BatchActions::Continuous(v), ActionKind::Continuous { .. }) => {
                let target: Vec<F> = v.iter().map(|&x| F::from_f32(x)).collect();
                tape.mse_loss(pred, &target, &weight)
            }
            _ => Err(GdtError::Contract(
                "batch action kind differs from model".into(),
            )),
        }
    }

    /// Predictions for the last step of every window, computed on an
    /// inference tape.
    pub fn predict_last(&self, store: &ParamStore<f32>, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let pred = self.forward(&mut tape, store, batch)?;
        let t = tape.value(pred);
        Ok((0..batch.size)
            .map(|b| t.row(b * batch.k + batch.k - 1).to_vec())
            .collect())
    }
}

/// Metadata stored in a model checkpoint, as TOML text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub model: ModelConfig,
    pub seqformer: SeqConfig,
    pub io: IoSpec,
    /// Trainer state, opaque to the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<toml::Table>,
}

/// A model restored from a checkpoint file.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Gdt,
    pub store: ParamStore<f32>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<(u64, NamedTensors)>,
}

impl Gdt {
    pub fn meta(&self, train: Option<toml::Table>) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.seed,
            model: self.config.clone(),
            seqformer: self.seq_config.clone(),
            io: self.io.clone(),
            train,
        }
    }

    pub fn save(
        &self,
        path: &Path,
        store: &ParamStore<f32>,
        optimizer: Option<&AdamState<f32>>,
        train: Option<toml::Table>,
    ) -> Result<()> {
        let meta =
            toml::to_string(&self.meta(train)).map_err(|e| GdtError::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &meta, store, optimizer)
    }

    pub fn load(path: &Path) -> Result<LoadedModel> {
        let ckpt = load_checkpoint(path)?;
        let meta: CheckpointMeta = toml::from_str(&ckpt.meta)
            .map_err(|e| GdtError::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let (model, mut store) =
            Gdt::build::<f32>(&meta.model, &meta.seqformer, meta.io.clone(), meta.seed)?;
        restore_params(&mut store, &ckpt.params)?;
        Ok(LoadedModel {
            model,
            store,
            meta,
            optimizer: ckpt.optimizer,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::trajstore::{generate_synthetic, sample_windows, SynthSpec};

    #[test]
    fn padded_steps_do_not_change_the_loss() {
        let io = discrete_io(3, 4);
        let cfg = tiny(3, RewardSetting::Rtg);
        let (model, store) = Gdt::build::<f32>(&cfg, &SeqConfig::default(), io.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = Batch::random(&io, 2, 3, 0, &mut rng);
        let mut tape = Tape::new();
        let base = model
            .loss(&mut tape, &store, &batch, LossKind::CrossEntropy)
            .unwrap();
        let base = tape.value(base).item();

        // duplicating every window leaves the mean unchanged
        let mut doubled = batch.clone();
        doubled.size = 4;
        doubled.states.extend(batch.states.iter());
        doubled.returns.extend(batch.returns.iter());
        doubled.timesteps.extend(batch.timesteps.iter());
        doubled.pad.extend(batch.pad.iter());
        if let (BatchActions::Discrete(a), BatchActions::Discrete(b)) =
            (&mut doubled.actions, &batch.actions)
        {
            a.extend(b.iter());
        }
        let mut tape = Tape::new();
        let dup = model
            .loss(&mut tape, &store, &doubled, LossKind::CrossEntropy)
            .unwrap();
        assert!((tape.value(dup).item() - base).abs() < 1e-6);

        // extra padded steps on the left of a window leave its loss unchanged
        let single = |b: &Batch, w: usize| -> Batch {
            let k = b.k;
            let r = w * k..(w + 1) * k;
            Batch {
                size: 1,
                k,
                states: b.states[r.start * 3..r.end * 3].to_vec(),
                actions: match &b.actions {
                    BatchActions::Discrete(a) => BatchActions::Discrete(a[r.clone()].to_vec()),
                    BatchActions::Continuous(_) => unreachable!(),
                },
                returns: b.returns[r.clone()].to_vec(),
                timesteps: b.timesteps[r.clone()].to_vec(),
                pad: b.pad[r].to_vec(),
            }
        };
        let mut w = single(&batch, 0);
        w.pad = vec![true, false, false];
        let mut tape = Tape::new();
        let a = model
            .loss(&mut tape, &store, &w, LossKind::CrossEntropy)
            .unwrap();
        let a = tape.value(a).item();
        w.states[..3].copy_from_slice(&[9.0, -9.0, 4.0]);
        w.returns[0] = 77.0;
        w.timesteps[0] = 5;
        let mut tape = Tape::new();
        let b = model
            .loss(&mut tape, &store, &w, LossKind::CrossEntropy)
            .unwrap();
        assert_eq!(a.to_bits(), tape.value(b).item().to_bits());
    }

    #[test]
    fn dataset_windows_become_batches() {
        let (h, eps) = generate_synthetic(&SynthSpec {
            env: "chain:4".parse().unwrap(),
            epsilons: vec![0.5],
            episodes: 6,
            seed: 3,
        })
        .unwrap();
        let ds = Dataset::new(h, eps).unwrap();
        let io = IoSpec::from_dataset(&ds, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let windows = sample_windows(&ds, 5, 8, &mut rng);
        for setting in RewardSetting::ALL {
            let b = Batch::from_windows(&ds, &windows, &io, setting).unwrap();
            for (wi, w) in windows.iter().enumerate() {
                let ep = &ds.trajectories[w.episode];
                for (slot, step) in w.steps().into_iter().enumerate() {
                    let row = wi * 5 + slot;
                    assert_eq!(b.pad[row], step.is_none());
                    let Some(t) = step else { continue };
                    let want = match setting {
                        RewardSetting::Rtg => ds.rtg[w.episode][t] / 2.0,
                        RewardSetting::StepReward if t > 0 => ep.rewards[t - 1] as f64 / 2.0,
                        _ => 0.0,
                    };
                    assert_eq!(b.returns[row], want as f32);
                    assert_eq!(b.timesteps[row], t);
                }
            }
        }
    }

    #[test]
    fn reward_relabel_is_invisible_without_reward_tokens() {
        let (h, mut eps) = generate_synthetic(&SynthSpec {
            env: "chain:5".parse().unwrap(),
            epsilons: vec![0.5],
            episodes: 8,
            seed: 4,
        })
        .unwrap();
        let ds = Dataset::new(h.clone(), eps.clone()).unwrap();
        let io = IoSpec::from_dataset(&ds, 1.0);
        let cfg = tiny(4, RewardSetting::NoReward);
        let (model, store) = Gdt::build::<f32>(&cfg, &SeqConfig::default(), io.clone(), 5).unwrap();
        let windows = sample_windows(&ds, 4, 16, &mut ChaCha8Rng::seed_from_u64(1));
        let loss = |ds: &Dataset| {
            let b = Batch::from_windows(ds, &windows, &io, RewardSetting::NoReward).unwrap();
            let mut tape = Tape::new();
            let l = model
                .loss(&mut tape, &store, &b, LossKind::CrossEntropy)
                .unwrap();
            tape.value(l).item().to_bits()
        };
        let before = loss(&ds);
        for e in &mut eps {
            e.rewards.iter_mut().for_each(|r| *r = *r * -3.0 + 7.0);
        }
        let relabeled = Dataset::new(h, eps).unwrap();
        assert_eq!(loss(&relabeled), before);
    }

    #[test]
    fn checkpoint_restores_bitwise() {
        let ds = {
            let spec = SynthSpec {
                env: "chain:5".parse().unwrap(),
                epsilons: vec![0.5],
                episodes: 6,
                seed: 2,
            };
            let (h, eps) = generate_synthetic(&spec).unwrap();
            Dataset::new(h, eps).unwrap()
        };
        let mut cfg = tiny(3, RewardSetting::Rtg);
        cfg.connection = ConnectionMode::Random {
            p: Some(0.3),
            seed: 0,
        };
        let (m, mut store) = Gdt::build::<f32>(
            &cfg,
            &SeqConfig::default(),
            IoSpec::from_dataset(&ds, 4.0),
            11,
        )
        .unwrap();
        store.jitter(0.1, &mut ChaCha8Rng::seed_from_u64(0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut train = toml::Table::new();
        train.insert("step".into(), toml::Value::Integer(7));
        m.save(&path, &store, None, Some(train.clone())).unwrap();
        let loaded = Gdt::load(&path).unwrap();
        assert_eq!(loaded.meta.train, Some(train));
        assert_eq!(loaded.model.graph().graph(), m.graph().graph());
        let windows = sample_windows(&ds, 3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let batch = Batch::from_windows(&ds, &windows, &m.io, RewardSetting::Rtg).unwrap();
        let a = m.predict_last(&store, &batch).unwrap();
        let b = loaded.model.predict_last(&loaded.store, &batch).unwrap();
        let bits = |v: Vec<Vec<f32>>| v.concat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny(2, RewardSetting::Rtg);
        cfg.heads = 3;
        assert!(Gdt::build::<f32>(&cfg, &SeqConfig::default(), discrete_io(2, 2), 0).is_err());
        let cfg = tiny(2, RewardSetting::Rtg);
        let seq = SeqConfig {
            enabled: true,
            patch: 5,
            width: 8,
            heads: 2,
            ..SeqConfig::default()
        };
        let io = IoSpec::raw(
            StateKind::Image {
                height: 28,
                width: 28,
                channels: 1,
            },
            ActionKind::Discrete { n: 4 },
        );
        let err = Gdt::build::<f32>(&cfg, &seq, io, 0).unwrap_err();
        assert!(err.to_string().contains("patch size 5"), "{err}");
    }
}
