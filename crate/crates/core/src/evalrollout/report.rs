use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::env::EnvSpec;
use super::rollout::{mean_std, rollout, RolloutConfig};
use crate::error::{contract, GdtError, Result};
use crate::graphrep::RewardSetting;
use crate::model::Gdt;
use crate::ndcore::ParamStore;
use crate::trajstore::NormalizationTable;

/// One CSV row: the mean over `episodes` episodes run under one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub env: String,
    pub seed: u64,
    pub raw_return: f64,
    pub normalized: Option<f64>,
    pub episodes: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSummary {
    pub env: String,
    pub seeds: usize,
    pub mean_raw: f64,
    pub std_raw: f64,
    pub normalized: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Per-environment mean and standard deviation across seeds, in first
    /// appearance order.
    pub fn summary(&self) -> Vec<EnvSummary> {
        let mut envs: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !envs.contains(&r.env.as_str()) {
                envs.push(&r.env);
            }
        }
        envs.into_iter()
            .map(|env| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.env == env).collect();
                let raw: Vec<f64> = rows.iter().map(|r| r.raw_return).collect();
                let norm: Option<Vec<f64>> = rows.iter().map(|r| r.normalized).collect();
                let (mean_raw, std_raw) = mean_std(&raw);
                EnvSummary {
                    env: env.to_string(),
                    seeds: rows.len(),
                    mean_raw,
                    std_raw,
                    normalized: norm.map(|n| mean_std(&n)),
                }
            })
            .collect()
    }

    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| GdtError::Contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv()?).map_err(|e| GdtError::io(path, e))
    }

    /// Per-seed rows followed by the aggregate line of each environment.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12} {:>12} {:>8} {:>8}",
            "env", "seed", "raw", "normalized", "episodes", "steps"
        );
        for r in &self.rows {
            let norm = r.normalized.map_or("-".to_string(), |n| format!("{n:.1}"));
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>12.3} {:>12} {:>8} {:>8}",
                r.env, r.seed, r.raw_return, norm, r.episodes, r.steps
            );
        }
        for s in self.summary() {
            let norm = s
                .normalized
                .map_or("-".to_string(), |(m, sd)| format!("{m:.1} ± {sd:.1}"));
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>12} {:>12}",
                s.env,
                "all",
                format!("{:.3} ± {:.3}", s.mean_raw, s.std_raw),
                norm
            );
        }
        out
    }
}

/// Environment and conditioning target of one suite entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteEntry {
    pub env: EnvSpec,
    pub target: f64,
    /// Lower bound on the running return-to-go.
    pub floor: Option<f64>,
}

impl SuiteEntry {
    /// Conditions on the optimal return of `env`.
    pub fn optimal(env: EnvSpec) -> Self {
        Self {
            env,
            target: env.plan().optimal_return,
            floor: None,
        }
    }
}

pub fn eval_report(
    model: &Gdt,
    store: &ParamStore<f32>,
    suite: &[SuiteEntry],
    episodes: usize,
    seeds: &[u64],
    table: &NormalizationTable,
) -> Result<EvalReport> {
    contract!(!seeds.is_empty(), "evaluation needs at least one seed");
    contract!(episodes > 0, "evaluation needs at least one episode");
    let mut rows = Vec::new();
    for entry in suite {
        for &seed in seeds {
            let mut rc = RolloutConfig::new(entry.target, episodes, seed);
            rc.floor = entry.floor;
            let r = rollout(model, store, &entry.env, &rc, table)?;
            rows.push(EvalRow {
                env: entry.env.to_string(),
                seed,
                raw_return: r.mean_return,
                normalized: r.normalized,
                episodes,
                steps: r.total_steps(),
            });
        }
    }
    Ok(EvalReport { rows })
}

/// Scores of the three reward settings under identical seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardComparison {
    pub env: EnvSpec,
    pub rows: Vec<(RewardSetting, EnvSummary)>,
}

impl RewardComparison {
    pub fn score(&self, setting: RewardSetting) -> Option<f64> {
        self.rows
            .iter()
            .find(|(s, _)| *s == setting)
            .and_then(|(_, summary)| summary.normalized.map(|n| n.0))
    }

    pub fn text_table(&self) -> String {
        let mut out = format!("{:<8} {:>12} {:>16}\n", "reward", "raw", "normalized");
        for (s, sum) in &self.rows {
            let norm = sum
                .normalized
                .map_or("-".to_string(), |(m, sd)| format!("{m:.1} ± {sd:.1}"));
            let _ = writeln!(
                out,
                "{:<8} {:>12.3} {:>16}",
                s.to_string(),
                sum.mean_raw,
                norm
            );
        }
        out
    }
}

/// Loads one checkpoint per reward setting and evaluates each at the
/// optimal target of `env`.
pub fn compare_reward_settings(
    checkpoints: &[(RewardSetting, Option<&Path>)],
    env: EnvSpec,
    episodes: usize,
    seeds: &[u64],
    table: &NormalizationTable,
) -> Result<RewardComparison> {
    let mut rows = Vec::new();
    for &(setting, path) in checkpoints {
        let path = path.ok_or_else(|| {
            GdtError::Config(format!(
                "no checkpoint given for reward setting `{setting}`"
            ))
        })?;
        if !path.exists() {
            return Err(GdtError::Config(format!(
                "checkpoint for reward setting `{setting}` not found: {}",
                path.display()
            )));
        }
        let loaded = Gdt::load(path)?;
        if loaded.model.config.reward != setting {
            return Err(GdtError::Config(format!(
                "checkpoint {} was trained with reward setting `{}`, expected `{setting}`",
                path.display(),
                loaded.model.config.reward
            )));
        }
        let report = eval_report(
            &loaded.model,
            &loaded.store,
            &[SuiteEntry::optimal(env)],
            episodes,
            seeds,
            table,
        )?;
        let summary = report.summary().remove(0);
        rows.push((setting, summary));
    }
    Ok(RewardComparison { env, rows })
}
