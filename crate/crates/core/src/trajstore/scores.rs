//! Score normalization against random and expert baselines.

use crate::error::{GdtError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub task: String,
    pub random: f64,
    pub expert: f64,
}

/// Per-task (random, expert) baselines. Lookups are case-insensitive.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationTable {
    rows: Vec<ScoreRow>,
}

impl Default for NormalizationTable {
    /// The published Atari (gamer) and locomotion (expert) baselines.
    fn default() -> Self {
        let mut t = Self::empty();
        for (task, random, expert) in [
            ("breakout", 2.0, 30.0),
            ("qbert", 164.0, 13455.0),
            ("pong", -21.0, 15.0),
            ("seaquest", 68.0, 42055.0),
            ("halfcheetah", -280.2, 12135.0),
            ("hopper", -20.3, 3234.3),
            ("walker", 1.6, 4592.3),
        ] {
            t.insert(task, random, expert).expect("distinct baselines");
        }
        t
    }
}

impl NormalizationTable {
    pub fn empty() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    /// Adds or replaces a row. Equal baselines are rejected.
    pub fn insert(&mut self, task: &str, random: f64, expert: f64) -> Result<()> {
        if random == expert || !random.is_finite() || !expert.is_finite() {
            return Err(GdtError::Config(format!(
                "baselines for `{task}` must be finite and distinct (random {random}, expert {expert})"
            )));
        }
        let key = task.to_ascii_lowercase();
        self.rows.retain(|r| r.task != key);
        self.rows.push(ScoreRow {
            task: key,
            random,
            expert,
        });
        Ok(())
    }

    pub fn lookup(&self, task: &str) -> Result<&ScoreRow> {
        let key = task.to_ascii_lowercase();
        let key = match key.as_str() {
            "walker2d" => "walker",
            other => other,
        };
        self.rows
            .iter()
            .find(|r| r.task == key)
            .ok_or_else(|| GdtError::UnknownTask(task.to_string()))
    }

    pub fn normalize(&self, raw: f64, task: &str) -> Result<f64> {
        let row = self.lookup(task)?;
        Ok(100.0 * (raw - row.random) / (row.expert - row.random))
    }
}

/// Normalized score of `raw` against the published baselines.
pub fn normalize_score(raw: f64, task: &str) -> Result<f64> {
    NormalizationTable::default().normalize(raw, task)
}
