use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{eval_env, train, TrainConfig};
use crate::error::{contract, GdtError, Result};
use crate::evalrollout::{env_table, eval_report, mean_std, SuiteEntry};
use crate::model::Gdt;
use crate::trajstore::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Connection,
    Reward,
    Length,
    StMethod,
}

impl AblationAxis {
    pub const NAMES: [&'static str; 4] = ["connection", "reward", "length", "stmethod"];
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = *self as usize;
        f.write_str(Self::NAMES[i])
    }
}

impl FromStr for AblationAxis {
    type Err = GdtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "connection" => Ok(Self::Connection),
            "reward" => Ok(Self::Reward),
            "length" => Ok(Self::Length),
            "stmethod" => Ok(Self::StMethod),
            other => Err(GdtError::Config(format!(
                "unknown ablation axis `{other}` (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// Labelled copies of `cfg`, one per value listed for `axis`.
pub fn variants(cfg: &TrainConfig, axis: AblationAxis) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Connection => cfg
            .ablate
            .connection
            .iter()
            .map(|&m| (m.to_string(), with(&|c| c.model.connection = m)))
            .collect(),
        AblationAxis::Reward => cfg
            .ablate
            .reward
            .iter()
            .map(|&r| (r.to_string(), with(&|c| c.model.reward = r)))
            .collect(),
        AblationAxis::Length => cfg
            .ablate
            .length
            .iter()
            .map(|&k| (format!("k{k}"), with(&|c| c.model.context = k)))
            .collect(),
        AblationAxis::StMethod => cfg
            .ablate
            .stmethod
            .iter()
            .map(|&m| {
                let c = with(&|c| {
                    c.seqformer.enabled = true;
                    c.seqformer.method = m;
                });
                (m.to_string(), c)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// Mean normalized score of each training seed over the evaluation seeds.
    pub seed_scores: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn score(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.mean)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("axis,variant,seed,normalized\n");
        for r in &self.rows {
            for (seed, s) in &r.seed_scores {
                let _ = writeln!(out, "{},{},{seed},{s}", self.axis, r.label);
            }
        }
        out
    }

    pub fn text_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>10} {:>8}\n",
            self.axis.to_string(),
            "mean",
            "stdev"
        );
        for r in &self.rows {
            let _ = writeln!(out, "{:<14} {:>10.2} {:>8.2}", r.label, r.mean, r.std);
        }
        out
    }
}

/// Trains every variant of `axis` under each configured seed and scores the
/// checkpoints on the evaluation environment at its optimal return.
/// Checkpoints land in `out_dir/<variant>/seed-<n>/`.
pub fn ablate(
    cfg: &TrainConfig,
    ds: &Dataset,
    axis: AblationAxis,
    out_dir: &Path,
) -> Result<AblationReport> {
    contract!(
        !cfg.ablate.seeds.is_empty(),
        "ablation needs at least one training seed"
    );
    contract!(
        !cfg.ablate.eval_seeds.is_empty(),
        "ablation needs at least one evaluation seed"
    );
    let env = eval_env(cfg, ds)?.ok_or_else(|| {
        GdtError::Config(
            "ablation needs an evaluation environment (config `env` or dataset metadata)".into(),
        )
    })?;
    let table = env_table(&env);
    let mut rows = Vec::new();
    for (label, variant) in variants(cfg, axis) {
        variant.validate()?;
        let mut seed_scores = Vec::new();
        let mut checkpoints = Vec::new();
        for &seed in &cfg.ablate.seeds {
            let run_cfg = TrainConfig {
                seed,
                ..variant.clone()
            };
            let dir = out_dir.join(&label).join(format!("seed-{seed}"));
            let summary = train(&run_cfg, ds, &dir)?;
            let ckpt = summary.best.unwrap_or(summary.last);
            let loaded = Gdt::load(&ckpt)?;
            let report = eval_report(
                &loaded.model,
                &loaded.store,
                &[SuiteEntry::optimal(env)],
                cfg.eval_episodes.max(1),
                &cfg.ablate.eval_seeds,
                &table,
            )?;
            let normalized = report.summary()[0]
                .normalized
                .map(|n| n.0)
                .ok_or_else(|| GdtError::Config(format!("{env} has no normalization row")))?;
            seed_scores.push((seed, normalized));
            checkpoints.push(ckpt);
        }
        let scores: Vec<f64> = seed_scores.iter().map(|s| s.1).collect();
        let (mean, std) = mean_std(&scores);
        rows.push(AblationRow {
            label,
            seed_scores,
            mean,
            std,
            checkpoints,
        });
    }
    let report = AblationReport { axis, rows };
    let csv_path = out_dir.join(format!("ablation-{axis}.csv"));
    std::fs::write(&csv_path, report.csv()).map_err(|e| GdtError::io(&csv_path, e))?;
    Ok(report)
}
