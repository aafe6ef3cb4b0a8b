//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::Oracle;
use gdt_core::evalrollout::{env_table, rollout, EnvSpec, RolloutConfig};
use gdt_core::gradsuite::{gradient_suite, suite_frame, SuiteTarget};
use gdt_core::graphrep::{build_adjacency, ConnectionMode, RewardSetting};
use gdt_core::model::{Batch, BatchActions, Gdt, IoSpec, ModelConfig, SeqConfig};
use gdt_core::ndcore::layers::Activation;
use gdt_core::ndcore::{LrSchedule, ParamStore, Scalar, Tape};
use gdt_core::seqformer::StMethod;
use gdt_core::trainer::{ablate, train, AblationAxis, TrainConfig, Trainer};
use gdt_core::trajstore::{generate_synthetic, ActionKind, Dataset, StateKind, SynthSpec};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn vector_io(dim: usize, n: usize) -> IoSpec {
    IoSpec::raw(StateKind::Vector { dim }, ActionKind::Discrete { n })
}

fn random_config(rng: &mut ChaCha8Rng, connections: &[ConnectionMode]) -> ModelConfig {
    let heads = [1, 2][rng.random_range(0..2)];
    ModelConfig {
        context: rng.random_range(1..=4),
        width: 4 * heads * rng.random_range(1..=2),
        layers: rng.random_range(1..=2),
        heads,
        dropout: 0.0,
        max_timestep: 12,
        activation: [Activation::Gelu, Activation::Relu][rng.random_range(0..2)],
        connection: connections[rng.random_range(0..connections.len())],
        reward: RewardSetting::ALL[rng.random_range(0..3)],
        ..ModelConfig::default()
    }
}

fn logits<F: Scalar>(model: &Gdt, store: &ParamStore<F>, batch: &Batch) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let y = model.forward(&mut tape, store, batch).expect("forward");
    let t = tape.value(y);
    (0..batch.size * batch.k)
        .map(|r| t.row(r).iter().map(|v| v.to_f64().unwrap()).collect())
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut failed = Vec::new();
    let mut groups = 0;
    let mut worst: f64 = 0.0;
    for target in [SuiteTarget::GraphFormer, SuiteTarget::SeqFormer] {
        for case in gradient_suite(target, 0).map_err(|e| e.to_string())? {
            for (group, err) in case.report.by_group() {
                groups += 1;
                worst = worst.max(err);
                if err >= 1e-2 {
                    failed.push(format!("{target}/{}/{group} {err:.2e}", case.label));
                }
            }
        }
    }
    let took = started.elapsed();
    check(
        failed.is_empty() && took < Duration::from_secs(120),
        format!(
            "{groups} groups, worst rel err {worst:.2e}, {:.1}s{}",
            took.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            }
        ),
    )
}

fn reduction() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut rng, &[ConnectionMode::Causal]);
        let (model, mut store) =
            Gdt::build::<f64>(&cfg, &SeqConfig::default(), vector_io(3, 4), seed).unwrap();
        store.jitter(0.2, &mut rng);
        let (fwd, bwd) = model.graph().relation_params();
        store.value_mut(fwd).data_mut().fill(0.0);
        store.value_mut(bwd).data_mut().fill(0.0);
        let batch = Batch::random(&model.io, 2, cfg.context, cfg.context - 1, &mut rng);
        let oracle = Oracle {
            store: &store,
            cfg: &cfg,
            relations: false,
        };
        worst = worst.max(max_diff(
            &logits(&model, &store, &batch),
            &oracle.logits(&batch),
        ));
    }
    check(worst <= 1e-6, format!("100 seeds, max |diff| {worst:.2e}"))
}

fn brute_force() -> Outcome {
    let mut worst: f64 = 0.0;
    let modes = [
        ConnectionMode::Causal,
        ConnectionMode::Full,
        ConnectionMode::None,
    ];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cfg = random_config(&mut rng, &modes);
        let (model, mut store) =
            Gdt::build::<f32>(&cfg, &SeqConfig::default(), vector_io(3, 4), seed).unwrap();
        store.jitter(0.2, &mut rng);
        let batch = Batch::random(&model.io, 2, cfg.context, cfg.context - 1, &mut rng);
        let wide = store.cast::<f64>();
        let oracle = Oracle {
            store: &wide,
            cfg: &cfg,
            relations: true,
        };
        worst = worst.max(max_diff(
            &logits(&model, &store, &batch),
            &oracle.logits(&batch),
        ));
    }
    check(worst <= 1e-4, format!("20 configs, max |diff| {worst:.2e}"))
}

fn graphs() -> Outcome {
    let mut errors = Vec::new();
    for k in 1..=16 {
        let causal = build_adjacency(k, ConnectionMode::Causal, RewardSetting::Rtg).edge_count();
        if causal != 2 + 7 * (k - 1) {
            errors.push(format!("causal K={k}: {causal}"));
        }
        let full = build_adjacency(k, ConnectionMode::Full, RewardSetting::Rtg).edge_count();
        if full != 3 * k * (3 * k - 1) / 2 {
            errors.push(format!("full K={k}: {full}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut edges = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=16);
        let p = rng.random_bool(0.5).then(|| rng.random_range(0.0..=1.0));
        let setting = RewardSetting::ALL[rng.random_range(0..3)];
        let g = build_adjacency(
            k,
            ConnectionMode::Random {
                p,
                seed: rng.random(),
            },
            setting,
        );
        let tps = setting.tokens_per_step();
        for (u, v) in g.edges() {
            edges += 1;
            if u >= v || u / tps > v / tps {
                errors.push(format!("random K={k}: edge {u} -> {v}"));
            }
        }
    }
    check(
        errors.is_empty(),
        format!(
            "K=1..16 counts, 1000 random graphs ({edges} edges){}",
            if errors.is_empty() {
                String::new()
            } else {
                format!("; {}", errors.join(", "))
            }
        ),
    )
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = [0usize; 2];
    let (k, tps_rows) = (4, 200);
    for net in 0..2 {
        let mut cfg = ModelConfig {
            context: k,
            width: 8,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            conv_channels: [2, 2, 2],
            ..ModelConfig::default()
        };
        let (seq, io) = if net == 0 {
            (SeqConfig::default(), vector_io(3, 4))
        } else {
            let seq = SeqConfig {
                enabled: true,
                method: StMethod::Stack,
                patch: 14,
                width: 8,
                layers: 2,
                heads: 2,
            };
            (
                seq,
                IoSpec::raw(suite_frame(), ActionKind::Discrete { n: 4 }),
            )
        };
        for trial in 0..tps_rows {
            cfg.reward = RewardSetting::ALL[trial % 3];
            let (model, mut store) =
                Gdt::build::<f32>(&cfg, &seq, io.clone(), trial as u64).unwrap();
            store.jitter(0.2, &mut rng);
            let batch = Batch::random(&model.io, 2, k, 1, &mut rng);
            let before = logits(&model, &store, &batch);
            let t = rng.random_range(0..k);
            let mut moved = batch.clone();
            let slen = model.io.state.len();
            for b in 0..batch.size {
                for step in t..k {
                    let r = b * k + step;
                    if step > t {
                        for v in &mut moved.states[r * slen..(r + 1) * slen] {
                            *v = rng.random_range(0.0..1.0);
                        }
                        moved.returns[r] = rng.random_range(-3.0..3.0);
                        moved.timesteps[r] = rng.random_range(0..12);
                    }
                    if let BatchActions::Discrete(a) = &mut moved.actions {
                        a[r] = rng.random_range(0..4);
                    }
                }
            }
            let after = logits(&model, &store, &moved);
            for b in 0..batch.size {
                for step in 0..=t {
                    let r = b * k + step;
                    let same = before[r]
                        .iter()
                        .zip(&after[r])
                        .all(|(x, y)| x.to_bits() == y.to_bits());
                    if !same {
                        violations[net] += 1;
                    }
                }
            }
        }
    }
    check(
        violations == [0, 0],
        format!(
            "200 trials per network, changed past rows: graph {} patch {}",
            violations[0], violations[1]
        ),
    )
}

fn memorization() -> Outcome {
    let started = Instant::now();
    let mut cfg = TrainConfig::preset("toy").unwrap();
    cfg.schedule = LrSchedule::Warmup {
        base: 3e-3,
        warmup_steps: 20.0,
    };
    let mut trainer = Trainer::with_io(&cfg, vector_io(6, 4)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Batch::random(&trainer.model.io, 32, cfg.model.context, 0, &mut rng);
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 1..=500 {
        last = trainer.train_on(&batch).map_err(|e| e.to_string())?.loss;
        if last < 1e-2 {
            reached = Some(step);
            break;
        }
    }
    let took = started.elapsed();
    check(
        reached.is_some() && took < Duration::from_secs(300),
        match reached {
            Some(step) => format!(
                "32 windows, loss {last:.2e} at step {step}, {:.1}s",
                took.as_secs_f64()
            ),
            None => format!("32 windows, loss {last:.2e} after 500 steps"),
        },
    )
}

fn chain_config(manifest: &Path) -> TrainConfig {
    TrainConfig::load(&manifest.join("../../configs/chain.toml")).expect("chain config")
}

fn mixed_chain() -> Dataset {
    let spec = SynthSpec {
        env: "chain:8".parse().unwrap(),
        epsilons: vec![0.0, 0.5, 1.0],
        episodes: 300,
        seed: 0,
    };
    let (header, trajs) = generate_synthetic(&spec).unwrap();
    Dataset::new(header, trajs).unwrap()
}

fn chain_returns(manifest: &Path) -> Outcome {
    let started = Instant::now();
    let env: EnvSpec = "chain:8".parse().unwrap();
    let optimal = env.plan().optimal_return;
    let ds = mixed_chain();
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut at_optimal = Vec::new();
    for seed in 0..3 {
        let mut cfg = chain_config(manifest);
        cfg.seed = seed;
        let summary = train(&cfg, &ds, &dir.path().join(format!("seed-{seed}")))
            .map_err(|e| e.to_string())?;
        let loaded = Gdt::load(summary.best.as_ref().unwrap()).map_err(|e| e.to_string())?;
        let mut returns = Vec::new();
        for frac in [0.25, 0.5, 1.0] {
            let rc = RolloutConfig::new(frac * optimal, 10, 100 + seed);
            let r = rollout(&loaded.model, &loaded.store, &env, &rc, &env_table(&env))
                .map_err(|e| e.to_string())?;
            returns.push(r.mean_return);
        }
        ok &= returns.windows(2).all(|w| w[0] <= w[1]);
        at_optimal.push(returns[2]);
        lines.push(format!("seed {seed} {:?}", returns));
    }
    let mean = at_optimal.iter().sum::<f64>() / 3.0;
    ok &= at_optimal.iter().all(|&r| r >= 0.95 * optimal);
    let took = started.elapsed();
    ok &= took < Duration::from_secs(1800);
    check(
        ok,
        format!(
            "returns at 25/50/100% targets: {}; mean at optimal {mean:.2} of {optimal}, {:.0}s",
            lines.join(", "),
            took.as_secs_f64()
        ),
    )
}

fn ablations(manifest: &Path) -> Outcome {
    let ds = mixed_chain();
    let dir = tempfile::tempdir().unwrap();
    let cfg = chain_config(manifest);
    let conn = ablate(
        &cfg,
        &ds,
        AblationAxis::Connection,
        &dir.path().join("connection"),
    )
    .map_err(|e| e.to_string())?;
    let reward = ablate(&cfg, &ds, AblationAxis::Reward, &dir.path().join("reward"))
        .map_err(|e| e.to_string())?;
    let score =
        |r: &gdt_core::trainer::AblationReport, label: &str| r.score(label).unwrap_or(f64::NAN);
    let causal = score(&conn, "causal");
    let mut ok = ["full", "none", "random"]
        .iter()
        .all(|l| causal >= score(&conn, l));
    let none = score(&reward, "none");
    ok &= score(&reward, "rtg") >= none && score(&reward, "reward") >= none;
    let fmt = |r: &gdt_core::trainer::AblationReport| {
        r.rows
            .iter()
            .map(|row| format!("{} {:.1}", row.label, row.mean))
            .collect::<Vec<_>>()
            .join(" ")
    };
    check(
        ok,
        format!("connection [{}], reward [{}]", fmt(&conn), fmt(&reward)),
    )
}

fn determinism() -> Outcome {
    let ds = mixed_chain();
    let mut cfg = TrainConfig::preset("toy").unwrap();
    cfg.model.context = 4;
    cfg.model.dropout = 0.1;
    let run = |steps: u64| -> Trainer {
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        for _ in 0..steps {
            t.train_step(&ds).unwrap();
        }
        t
    };
    let bits = |s: &ParamStore<f32>| -> Vec<u32> {
        s.entries()
            .iter()
            .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let a = run(40);
    let b = run(40);
    let mut ok = bits(&a.store) == bits(&b.store);
    let mut notes = vec![format!(
        "repeat run {}",
        if ok { "identical" } else { "differs" }
    )];

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut mid = run(20);
    mid.save(&path).unwrap();
    let loaded = Gdt::load(&path).unwrap();
    let same_params = bits(&loaded.store) == bits(&mid.store);
    let batch = mid.next_batch(&ds).unwrap();
    let same_out = logits(&loaded.model, &loaded.store, &batch)
        .iter()
        .flatten()
        .zip(logits(&mid.model, &mid.store, &batch).iter().flatten())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    notes.push(format!(
        "checkpoint params {same_params} outputs {same_out}"
    ));
    let mut resumed = Trainer::resume(&path).unwrap();
    for _ in 0..20 {
        resumed.train_step(&ds).unwrap();
    }
    let same_resume = bits(&resumed.store) == bits(&a.store);
    notes.push(format!("resume {same_resume}"));
    ok &= same_params && same_out && same_resume;
    check(ok, notes.join(", "))
}

fn main() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradients)),
        ("reduction to vanilla attention", Box::new(reduction)),
        ("brute-force forward oracle", Box::new(brute_force)),
        ("graph construction", Box::new(graphs)),
        ("causality under perturbation", Box::new(causality)),
        ("memorization", Box::new(memorization)),
        (
            "chain return conditioning",
            Box::new(|| chain_returns(manifest)),
        ),
        ("ablation orderings", Box::new(|| ablations(manifest))),
        ("determinism and checkpoints", Box::new(determinism)),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    let mut out = std::io::stdout().lock();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = started.elapsed().as_secs_f64();
        let (mark, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "{mark} [{}] {name} ({secs:.1}s): {detail}", i + 1);
        let _ = out.flush();
    }
    if failures > 0 {
        let _ = writeln!(out, "{failures} criteria failed");
        std::process::exit(1);
    }
}
