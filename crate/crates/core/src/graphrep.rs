//! Causal token graphs over a K-step window.
//!
//! Tokens are laid out step by step as `(R, s, a)` (return-to-go setting),
//! `(r, s, a)` (step-reward setting) or `(s, a)` (no reward). The adjacency
//! records which earlier tokens are direct parents of each token; attention
//! itself is causal over all earlier tokens and reads the adjacency only
//! through the relation category of each (query, key) pair.

use std::fmt::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, GdtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Return,
    Reward,
    State,
    Action,
}

/// Relation category of an ordered (query, key) token pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Relation {
    SelfLoop = 0,
    /// The key is a direct parent of the query.
    EdgeFwd = 1,
    NoEdge = 2,
}

pub const NUM_RELATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConnectionMode {
    Causal,
    Full,
    /// Each forward pair independently with probability `p`; `None` matches
    /// the causal edge density of the same window length.
    Random {
        p: Option<f64>,
        seed: u64,
    },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RewardSetting {
    Rtg,
    StepReward,
    NoReward,
}

impl RewardSetting {
    pub fn tokens_per_step(self) -> usize {
        match self {
            RewardSetting::NoReward => 2,
            _ => 3,
        }
    }

    pub const ALL: [RewardSetting; 3] = [
        RewardSetting::Rtg,
        RewardSetting::StepReward,
        RewardSetting::NoReward,
    ];
}

impl ConnectionMode {
    pub const NAMES: [&'static str; 4] = ["causal", "full", "none", "random"];

    /// Same mode with the random seed replaced.
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            ConnectionMode::Random { p, .. } => ConnectionMode::Random { p, seed },
            other => other,
        }
    }
}

impl fmt::Display for ConnectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConnectionMode::Causal => f.write_str("causal"),
            ConnectionMode::Full => f.write_str("full"),
            ConnectionMode::None => f.write_str("none"),
            ConnectionMode::Random { p: None, .. } => f.write_str("random"),
            ConnectionMode::Random { p: Some(p), .. } => write!(f, "random:{p}"),
        }
    }
}

impl FromStr for ConnectionMode {
    type Err = GdtError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            GdtError::Config(format!(
                "unknown connection mode `{s}` (causal, full, none, random[:p])"
            ))
        };
        Ok(match s.to_ascii_lowercase().as_str() {
            "causal" => ConnectionMode::Causal,
            "full" => ConnectionMode::Full,
            "none" => ConnectionMode::None,
            "random" => ConnectionMode::Random { p: None, seed: 0 },
            other => {
                let p: f64 = other
                    .strip_prefix("random:")
                    .ok_or_else(bad)?
                    .parse()
                    .map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad());
                }
                ConnectionMode::Random {
                    p: Some(p),
                    seed: 0,
                }
            }
        })
    }
}

impl TryFrom<String> for ConnectionMode {
    type Error = GdtError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ConnectionMode> for String {
    fn from(m: ConnectionMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for RewardSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardSetting::Rtg => "rtg",
            RewardSetting::StepReward => "reward",
            RewardSetting::NoReward => "none",
        })
    }
}

impl FromStr for RewardSetting {
    type Err = GdtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rtg" => Ok(RewardSetting::Rtg),
            "reward" | "step" | "step_reward" => Ok(RewardSetting::StepReward),
            "none" | "no_reward" => Ok(RewardSetting::NoReward),
            _ => Err(GdtError::Config(format!(
                "unknown reward setting `{s}` (rtg, reward, none)"
            ))),
        }
    }
}

impl TryFrom<String> for RewardSetting {
    type Error = GdtError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RewardSetting> for String {
    fn from(m: RewardSetting) -> String {
        m.to_string()
    }
}

/// Token graph of a K-step window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGraph {
    k: usize,
    setting: RewardSetting,
    kinds: Vec<NodeKind>,
    /// `parents[v * n + u]` is true for an edge `u -> v`.
    parents: Vec<bool>,
}

impl TokenGraph {
    fn empty(k: usize, setting: RewardSetting) -> Self {
        let tps = setting.tokens_per_step();
        let mut kinds = Vec::with_capacity(k * tps);
        for _ in 0..k {
            match setting {
                RewardSetting::Rtg => kinds.push(NodeKind::Return),
                RewardSetting::StepReward => kinds.push(NodeKind::Reward),
                RewardSetting::NoReward => {}
            }
            kinds.extend([NodeKind::State, NodeKind::Action]);
        }
        let n = kinds.len();
        Self {
            k,
            setting,
            kinds,
            parents: vec![false; n * n],
        }
    }

    fn link(&mut self, u: usize, v: usize) {
        debug_assert!(u < v);
        let n = self.len();
        self.parents[v * n + u] = true;
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn setting(&self) -> RewardSetting {
        self.setting
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    /// Window step of each token.
    pub fn step_of(&self, token: usize) -> usize {
        token / self.setting.tokens_per_step()
    }

    /// Token index of the reward-kind node of step `t`, if the setting has one.
    pub fn reward_index(&self, t: usize) -> Option<usize> {
        (self.setting != RewardSetting::NoReward).then_some(3 * t)
    }

    pub fn state_index(&self, t: usize) -> usize {
        let tps = self.setting.tokens_per_step();
        t * tps + tps - 2
    }

    pub fn action_index(&self, t: usize) -> usize {
        let tps = self.setting.tokens_per_step();
        t * tps + tps - 1
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to * self.len() + from]
    }

    /// All edges `(from, to)` in ascending `(to, from)` order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for v in 0..n {
            for u in 0..n {
                if self.parents[v * n + u] {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().filter(|&&e| e).count()
    }

    /// Relation of query `i` to key `j`.
    pub fn relation(&self, i: usize, j: usize) -> Result<Relation> {
        let n = self.len();
        contract!(
            i < n && j < n,
            "token pair ({i}, {j}) out of range for {n} tokens"
        );
        Ok(if i == j {
            Relation::SelfLoop
        } else if self.parents[i * n + j] {
            Relation::EdgeFwd
        } else {
            Relation::NoEdge
        })
    }

    /// Row-major `n x n` relation categories, `[query][key]`.
    pub fn relation_matrix(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = vec![Relation::NoEdge as u8; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = if i == j {
                    Relation::SelfLoop as u8
                } else if self.parents[i * n + j] {
                    Relation::EdgeFwd as u8
                } else {
                    Relation::NoEdge as u8
                };
            }
        }
        out
    }

    pub fn label(&self, token: usize) -> String {
        let t = self.step_of(token);
        let prefix = match self.kinds[token] {
            NodeKind::Return => "R",
            NodeKind::Reward => "r",
            NodeKind::State => "s",
            NodeKind::Action => "a",
        };
        format!("{prefix}{t}")
    }

    /// Edge list followed by an adjacency matrix: rows are queries, columns
    /// keys; `S` self, `1` key is a parent of the query, `.` otherwise.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let edges = self.edges();
        writeln!(out, "# {} tokens, {} edges", self.len(), edges.len()).unwrap();
        for (u, v) in &edges {
            writeln!(out, "{} -> {}", self.label(*u), self.label(*v)).unwrap();
        }
        writeln!(out).unwrap();
        let labels: Vec<String> = (0..self.len()).map(|i| self.label(i)).collect();
        let w = labels.iter().map(|l| l.len()).max().unwrap_or(1);
        write!(out, "{:w$}", "").unwrap();
        for l in &labels {
            write!(out, " {l:>w$}").unwrap();
        }
        writeln!(out).unwrap();
        let rel = self.relation_matrix();
        let n = self.len();
        for (i, l) in labels.iter().enumerate() {
            write!(out, "{l:>w$}").unwrap();
            for j in 0..n {
                let c = match rel[i * n + j] {
                    0 => 'S',
                    1 => '1',
                    _ => '.',
                };
                write!(out, " {c:>w$}").unwrap();
            }
            writeln!(out).unwrap();
        }
        out
    }
}

/// The Markovian dependency graph of a window.
pub fn build_causal_adjacency(k: usize, setting: RewardSetting) -> TokenGraph {
    assert!(k >= 1, "window length must be positive");
    let mut g = TokenGraph::empty(k, setting);
    for t in 0..k {
        let (s, a) = (g.state_index(t), g.action_index(t));
        g.link(s, a);
        if let Some(r) = g.reward_index(t) {
            if setting == RewardSetting::Rtg || t > 0 {
                g.link(r, a);
            }
        }
        if t > 0 {
            let (ps, pa) = (g.state_index(t - 1), g.action_index(t - 1));
            g.link(ps, s);
            g.link(pa, s);
            if let Some(r) = g.reward_index(t) {
                g.link(ps, r);
                g.link(pa, r);
                if setting == RewardSetting::Rtg {
                    g.link(g.reward_index(t - 1).unwrap(), r);
                }
            }
        }
    }
    g
}

/// Causal-mode edge density: edges over forward pairs.
pub fn causal_density(k: usize, setting: RewardSetting) -> f64 {
    let n = k * setting.tokens_per_step();
    let pairs = n * (n - 1) / 2;
    if pairs == 0 {
        return 0.0;
    }
    build_causal_adjacency(k, setting).edge_count() as f64 / pairs as f64
}

pub fn build_adjacency(k: usize, mode: ConnectionMode, setting: RewardSetting) -> TokenGraph {
    assert!(k >= 1, "window length must be positive");
    match mode {
        ConnectionMode::Causal => build_causal_adjacency(k, setting),
        ConnectionMode::None => TokenGraph::empty(k, setting),
        ConnectionMode::Full => {
            let mut g = TokenGraph::empty(k, setting);
            for v in 0..g.len() {
                for u in 0..v {
                    g.link(u, v);
                }
            }
            g
        }
        ConnectionMode::Random { p, seed } => {
            let p = p.unwrap_or_else(|| causal_density(k, setting));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = TokenGraph::empty(k, setting);
            for v in 0..g.len() {
                for u in 0..v {
                    if rng.random::<f64>() < p {
                        g.link(u, v);
                    }
                }
            }
            g
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use RewardSetting::*;

    fn labelled(g: &TokenGraph) -> Vec<String> {
        g.edges()
            .iter()
            .map(|&(u, v)| format!("{}>{}", g.label(u), g.label(v)))
            .collect()
    }

    #[test]
    fn single_step_rtg_graph() {
        let g = build_causal_adjacency(1, Rtg);
        assert_eq!(labelled(&g), vec!["R0>a0", "s0>a0"]);
        assert_eq!(g.relation(2, 1).unwrap(), Relation::EdgeFwd);
        assert_eq!(g.relation(1, 0).unwrap(), Relation::NoEdge);
        assert_eq!(g.relation(1, 1).unwrap(), Relation::SelfLoop);
        assert!(g.relation(3, 0).is_err());
    }

    #[test]
    fn two_step_rules() {
        let g = build_causal_adjacency(2, Rtg);
        let mut e = labelled(&g);
        e.sort();
        let mut want = vec![
            "R0>a0", "s0>a0", "R1>a1", "s1>a1", "s0>s1", "a0>s1", "R0>R1", "s0>R1", "a0>R1",
        ];
        want.sort();
        assert_eq!(e, want);

        let g = build_causal_adjacency(2, NoReward);
        let mut e = labelled(&g);
        e.sort();
        assert_eq!(e, vec!["a0>s1", "s0>a0", "s0>s1", "s1>a1"]);

        let g = build_causal_adjacency(2, StepReward);
        let mut e = labelled(&g);
        e.sort();
        assert_eq!(
            e,
            vec!["a0>r1", "a0>s1", "r1>a1", "s0>a0", "s0>r1", "s0>s1", "s1>a1"]
        );
    }

    #[test]
    fn full_and_degenerate_random_modes() {
        assert_eq!(
            build_adjacency(2, ConnectionMode::Full, Rtg).edge_count(),
            15
        );
        for k in [1, 3, 6] {
            let none = build_adjacency(k, ConnectionMode::None, Rtg);
            let full = build_adjacency(k, ConnectionMode::Full, Rtg);
            let r0 = build_adjacency(
                k,
                ConnectionMode::Random {
                    p: Some(0.0),
                    seed: 3,
                },
                Rtg,
            );
            let r1 = build_adjacency(
                k,
                ConnectionMode::Random {
                    p: Some(1.0),
                    seed: 3,
                },
                Rtg,
            );
            assert_eq!(r0, none);
            assert_eq!(r1, full);
        }
    }

    #[test]
    fn edge_count_formulas() {
        for k in 1..=16 {
            assert_eq!(build_causal_adjacency(k, Rtg).edge_count(), 2 + 7 * (k - 1));
            assert_eq!(
                build_causal_adjacency(k, StepReward).edge_count(),
                1 + 6 * (k - 1)
            );
            assert_eq!(
                build_causal_adjacency(k, NoReward).edge_count(),
                1 + 3 * (k - 1)
            );
            let n = 3 * k;
            assert_eq!(
                build_adjacency(k, ConnectionMode::Full, Rtg).edge_count(),
                n * (n - 1) / 2
            );
        }
    }

    #[test]
    fn no_reward_graph_has_no_reward_nodes() {
        let g = build_causal_adjacency(4, NoReward);
        assert_eq!(g.len(), 8);
        assert!(g
            .kinds()
            .iter()
            .all(|k| matches!(k, NodeKind::State | NodeKind::Action)));
    }

    #[test]
    fn parse_and_print() {
        for s in ["causal", "full", "none", "random", "random:0.25"] {
            assert_eq!(s.parse::<ConnectionMode>().unwrap().to_string(), s);
        }
        for s in ["rtg", "reward", "none"] {
            assert_eq!(s.parse::<RewardSetting>().unwrap().to_string(), s);
        }
        assert!("random:2".parse::<ConnectionMode>().is_err());
        assert!("dense".parse::<ConnectionMode>().is_err());
    }

    #[test]
    fn dump_lists_edges_and_matrix() {
        let d = build_causal_adjacency(1, Rtg).dump();
        assert_eq!(
            d,
            "# 3 tokens, 2 edges\nR0 -> a0\ns0 -> a0\n\n   R0 s0 a0\nR0  S  .  .\ns0  .  S  .\na0  1  1  S\n"
        );
    }

    fn arb_mode() -> impl Strategy<Value = ConnectionMode> {
        prop_oneof![
            Just(ConnectionMode::Causal),
            Just(ConnectionMode::Full),
            Just(ConnectionMode::None),
            (prop::option::of(0.0f64..=1.0), any::<u64>())
                .prop_map(|(p, seed)| ConnectionMode::Random { p, seed }),
        ]
    }

    fn arb_setting() -> impl Strategy<Value = RewardSetting> {
        prop_oneof![Just(Rtg), Just(StepReward), Just(NoReward)]
    }

    proptest! {
        #[test]
        fn edges_point_forward(k in 1usize..10, mode in arb_mode(), setting in arb_setting()) {
            let g = build_adjacency(k, mode, setting);
            for (u, v) in g.edges() {
                prop_assert!(u < v);
            }
            let rel = g.relation_matrix();
            let n = g.len();
            for i in 0..n {
                prop_assert_eq!(rel[i * n + i], Relation::SelfLoop as u8);
                for j in i + 1..n {
                    prop_assert_eq!(rel[i * n + j], Relation::NoEdge as u8);
                }
            }
        }

        #[test]
        fn construction_is_deterministic(k in 1usize..10, mode in arb_mode(), setting in arb_setting()) {
            prop_assert_eq!(build_adjacency(k, mode, setting), build_adjacency(k, mode, setting));
        }
    }
}
