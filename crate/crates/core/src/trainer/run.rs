use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::TrainConfig;
use crate::error::{contract, GdtError, Result};
use crate::evalrollout::{env_table, rollout, EnvSpec, RolloutConfig, RolloutReport};
use crate::model::{Batch, Gdt, IoSpec};
use crate::ndcore::{restore_optimizer, AdamState, ParamStore, Tape};
use crate::seed::{self, Stream};
use crate::trajstore::{sample_windows, Dataset};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// One optimizer step as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Model, optimizer and step counter. Batches and dropout masks are drawn
/// from streams indexed by the step, so a restored trainer continues exactly
/// where the saved one stopped.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Gdt,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub epoch: u64,
    /// Best evaluation score so far, with the epoch it was reached.
    pub best: Option<(f64, u64)>,
    /// Most recent checkpoint written by this trainer.
    pub last_good: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let io = IoSpec::from_dataset(ds, cfg.rtg_scale);
        Self::with_io(cfg, io)
    }

    pub fn with_io(cfg: &TrainConfig, io: IoSpec) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = Gdt::build::<f32>(&cfg.model, &cfg.seqformer, io, cfg.seed)?;
        let adam = AdamState::new(&store, cfg.optim);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            adam,
            step: 0,
            epoch: 0,
            best: None,
            last_good: None,
        })
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let loaded = Gdt::load(path)?;
        let state = loaded.meta.train.ok_or_else(|| {
            GdtError::Checkpoint(format!("{} holds no trainer state", path.display()))
        })?;
        let get = |key: &str| state.get(key).cloned();
        let cfg: TrainConfig = get("config")
            .ok_or_else(|| GdtError::Checkpoint("trainer state lacks its config".into()))?
            .try_into()
            .map_err(|e: toml::de::Error| GdtError::Checkpoint(e.to_string()))?;
        let int = |key: &str| get(key).and_then(|v| v.as_integer()).unwrap_or(0) as u64;
        let mut adam = AdamState::new(&loaded.store, cfg.optim);
        let (opt_step, moments) = loaded.optimizer.ok_or_else(|| {
            GdtError::Checkpoint(format!("{} holds no optimizer state", path.display()))
        })?;
        restore_optimizer(&mut adam, &loaded.store, opt_step, &moments)?;
        let best = match (
            get("best_score").and_then(|v| v.as_float()),
            get("best_epoch"),
        ) {
            (Some(score), Some(epoch)) => Some((score, epoch.as_integer().unwrap_or(0) as u64)),
            _ => None,
        };
        Ok(Self {
            cfg,
            model: loaded.model,
            store: loaded.store,
            adam,
            step: int("step"),
            epoch: int("epoch"),
            best,
            last_good: Some(path.to_path_buf()),
        })
    }

    fn state_table(&self) -> toml::Table {
        let mut t = toml::Table::new();
        t.insert("step".into(), toml::Value::Integer(self.step as i64));
        t.insert("epoch".into(), toml::Value::Integer(self.epoch as i64));
        if let Some((score, epoch)) = self.best {
            t.insert("best_score".into(), toml::Value::Float(score));
            t.insert("best_epoch".into(), toml::Value::Integer(epoch as i64));
        }
        let cfg = toml::Table::try_from(&self.cfg).expect("config serializes");
        t.insert("config".into(), toml::Value::Table(cfg));
        t
    }

    /// Writes parameters, optimizer moments and trainer state.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.model.save(
            path,
            &self.store,
            Some(&self.adam),
            Some(self.state_table()),
        )?;
        self.last_good = Some(path.to_path_buf());
        Ok(())
    }

    /// Batch for the next step, drawn from the sampler stream of that step.
    pub fn next_batch(&self, ds: &Dataset) -> Result<Batch> {
        let mut rng = seed::rng(self.cfg.seed, Stream::Sampler, self.step);
        let windows = sample_windows(ds, self.cfg.model.context, self.cfg.batch, &mut rng);
        Batch::from_windows(ds, &windows, &self.model.io, self.cfg.model.reward)
    }

    pub fn train_step(&mut self, ds: &Dataset) -> Result<StepRecord> {
        let batch = self.next_batch(ds)?;
        self.train_on(&batch)
    }

    /// One forward, backward, clipped AdamW update and schedule tick.
    pub fn train_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let started = Instant::now();
        contract!(
            batch.pad.iter().any(|p| !p),
            "every slot of the batch is padding"
        );
        let mut tape = Tape::training(seed::rng(self.cfg.seed, Stream::Dropout, self.step));
        let loss = self
            .model
            .loss(&mut tape, &self.store, batch, self.cfg.loss)?;
        let value = tape.value(loss).data()[0].into();
        if !f64::is_finite(value) {
            return Err(GdtError::NanLoss {
                step: self.step,
                last_good: self.last_good.clone(),
            });
        }
        self.store.zero_grad();
        tape.backward(loss, &mut self.store)?;
        let lr = self
            .cfg
            .schedule
            .rate(self.step, self.cfg.tokens_per_step());
        let stats = self.adam.step(&mut self.store, lr).map_err(|e| match e {
            GdtError::NanGradient { .. } => GdtError::NanLoss {
                step: self.step,
                last_good: self.last_good.clone(),
            },
            other => other,
        })?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: value,
            lr,
            grad_norm: stats.grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Rollouts at the configured target (the optimal return by default).
    pub fn evaluate(&self, env: &EnvSpec, seed: u64) -> Result<RolloutReport> {
        let target = self
            .cfg
            .eval_target
            .unwrap_or_else(|| env.plan().optimal_return);
        let mut rc = RolloutConfig::new(target, self.cfg.eval_episodes, seed);
        rc.floor = self.cfg.rtg_floor;
        rollout(&self.model, &self.store, env, &rc, &env_table(env))
    }
}

/// Evaluation environment of a run: the config entry, else the dataset's.
pub fn eval_env(cfg: &TrainConfig, ds: &Dataset) -> Result<Option<EnvSpec>> {
    match (cfg.env, ds.header.meta("env")) {
        (Some(env), _) => Ok(Some(env)),
        (None, Some(name)) => name.parse().map(Some),
        (None, None) => Ok(None),
    }
}

struct CsvLog {
    file: File,
    path: PathBuf,
}

impl CsvLog {
    fn open(path: PathBuf, header: &str, append: bool) -> Result<Self> {
        let fresh = !append || !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| GdtError::io(&path, e))?;
        if fresh {
            file.set_len(0).map_err(|e| GdtError::io(&path, e))?;
            writeln!(file, "{header}").map_err(|e| GdtError::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    fn row(&mut self, line: String) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| GdtError::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub last: PathBuf,
    /// Best-by-evaluation checkpoint, absent when no environment is known.
    pub best: Option<PathBuf>,
    pub best_score: Option<f64>,
    pub final_loss: f64,
    pub steps: u64,
}

/// Trains for the configured number of epochs, evaluating after each one.
/// Writes the resolved config, the step and evaluation logs, and the last
/// and best checkpoints under `out_dir`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    let trainer = Trainer::new(cfg, ds)?;
    run(trainer, ds, out_dir, false)
}

/// Continues a run from `checkpoint` until its configured epoch count.
pub fn resume(checkpoint: &Path, ds: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    let trainer = Trainer::resume(checkpoint)?;
    run(trainer, ds, out_dir, true)
}

fn run(mut trainer: Trainer, ds: &Dataset, out_dir: &Path, append: bool) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| GdtError::io(out_dir, e))?;
    let snapshot = out_dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot, trainer.cfg.to_toml()).map_err(|e| GdtError::io(&snapshot, e))?;
    let env = eval_env(&trainer.cfg, ds)?;
    let mut log = CsvLog::open(
        out_dir.join(TRAIN_LOG),
        "step,epoch,loss,lr,grad_norm,wall_ms",
        append,
    )?;
    let mut evals = CsvLog::open(
        out_dir.join(EVAL_LOG),
        "epoch,step,target,mean_return,std_return,normalized",
        append,
    )?;
    let last = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut final_loss = f64::NAN;
    while trainer.epoch < trainer.cfg.epochs as u64 {
        for _ in 0..trainer.cfg.steps_per_epoch {
            let r = trainer.train_step(ds)?;
            final_loss = r.loss;
            log.row(format!(
                "{},{},{},{},{},{:.3}",
                r.step, trainer.epoch, r.loss, r.lr, r.grad_norm, r.wall_ms
            ))?;
        }
        trainer.epoch += 1;
        if let Some(env) = &env {
            let report = trainer.evaluate(
                env,
                seed::derive(trainer.cfg.seed, Stream::Env) ^ trainer.epoch,
            )?;
            let score = report.normalized.unwrap_or(report.mean_return);
            evals.row(format!(
                "{},{},{},{},{},{}",
                trainer.epoch,
                trainer.step,
                report.target,
                report.mean_return,
                report.std_return,
                report.normalized.map_or(String::new(), |n| n.to_string())
            ))?;
            if trainer.best.is_none_or(|(b, _)| score > b) {
                trainer.best = Some((score, trainer.epoch));
                trainer.save(&best_path)?;
            }
        }
        trainer.save(&last)?;
    }
    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        last,
        best: env.map(|_| best_path),
        best_score: trainer.best.map(|b| b.0),
        final_loss,
        steps: trainer.step,
    })
}

/// Reads `train_log.csv` back as (step, loss) pairs.
pub fn read_losses(path: &Path) -> Result<Vec<(u64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let parse = |i: usize| row.get(i).unwrap_or("").to_string();
        let step = parse(0)
            .parse()
            .map_err(|_| GdtError::Config(format!("{}: bad step", path.display())))?;
        let loss = parse(2)
            .parse()
            .map_err(|_| GdtError::Config(format!("{}: bad loss", path.display())))?;
        out.push((step, loss));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::LrSchedule;
    use crate::trajstore::{generate_synthetic, SynthSpec};

    fn dataset(env: &str, eps: Vec<f64>, episodes: usize) -> Dataset {
        let spec = SynthSpec {
            env: env.parse().unwrap(),
            epsilons: eps,
            episodes,
            seed: 3,
        };
        let (h, e) = generate_synthetic(&spec).unwrap();
        Dataset::new(h, e).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::preset("toy").unwrap();
        cfg.model.width = 16;
        cfg.model.context = 3;
        cfg.batch = 8;
        cfg.epochs = 2;
        cfg.steps_per_epoch = 5;
        cfg.eval_episodes = 2;
        cfg
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ds = dataset("chain:5", vec![0.5], 10);
        let mut cfg = small_cfg();
        cfg.schedule = LrSchedule::Constant { base: 0.0 };
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let before = t.store.clone();
        t.train_step(&ds).unwrap();
        for (a, b) in before.entries().iter().zip(t.store.entries()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        assert_eq!(t.step, 1);
    }

    #[test]
    fn same_seed_same_losses() {
        let ds = dataset("chain:5", vec![0.0, 1.0], 10);
        let mut cfg = small_cfg();
        cfg.model.dropout = 0.1;
        let run = || {
            let mut t = Trainer::new(&cfg, &ds).unwrap();
            (0..20)
                .map(|_| t.train_step(&ds).unwrap().loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_names_last_checkpoint() {
        let ds = dataset("chain:5", vec![0.5], 10);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&small_cfg(), &ds).unwrap();
        let path = dir.path().join("good.ckpt");
        t.save(&path).unwrap();
        let mut batch = t.next_batch(&ds).unwrap();
        let row = batch.pad.iter().position(|p| !p).unwrap();
        batch.states[row * 5] = f32::NAN;
        let err = t.train_on(&batch).unwrap_err();
        match &err {
            GdtError::NanLoss { last_good, .. } => {
                assert_eq!(last_good.as_deref(), Some(path.as_path()))
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("good.ckpt"));
    }

    #[test]
    fn run_writes_logs_snapshot_and_checkpoints() {
        let ds = dataset("chain:5", vec![0.0, 0.5], 12);
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let summary = train(&cfg, &ds, dir.path()).unwrap();
        assert_eq!(summary.steps, 10);
        assert!(summary.last.exists());
        assert!(summary.best.as_ref().unwrap().exists());
        let losses = read_losses(&dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(
            losses.iter().map(|l| l.0).collect::<Vec<_>>(),
            (1..=10).collect::<Vec<_>>()
        );
        let evals = std::fs::read_to_string(dir.path().join(EVAL_LOG)).unwrap();
        assert_eq!(evals.lines().count(), 1 + 2);
        let snap = TrainConfig::load(&dir.path().join(CONFIG_SNAPSHOT)).unwrap();
        assert_eq!(snap, cfg);
        let restored = Trainer::resume(&summary.last).unwrap();
        assert_eq!((restored.step, restored.epoch), (10, 2));
        assert_eq!(restored.cfg, cfg);
    }

    #[test]
    fn environment_comes_from_metadata() {
        let ds = dataset("grid:3", vec![0.5], 4);
        let mut cfg = small_cfg();
        assert_eq!(
            eval_env(&cfg, &ds).unwrap(),
            Some("grid:3".parse().unwrap())
        );
        cfg.env = Some("chain:4".parse().unwrap());
        assert_eq!(
            eval_env(&cfg, &ds).unwrap(),
            Some("chain:4".parse().unwrap())
        );
    }
}
