//! Small discrete environments with exactly solvable optima.
//!
//! * `chain:<len>[:<noise>]` - walk right along a chain; +1 per step right,
//!   -1 per step left (a left move at the wall does nothing and pays 0).
//!   The episode ends on the last cell, so every return equals the furthest
//!   final position and the optimum is `len - 1`. With `noise > 0` the chosen
//!   action is flipped with that probability.
//! * `grid:<size>` / `grid-image:<size>` - reach the far corner; -1 per step,
//!   +10 on arrival. The image variant renders 14-pixel cells.
//! * `keydoor:<size>` - pick up the key in the top-right corner (+1), then
//!   reach the door in the bottom-left corner (+10).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdtError, Result};
use crate::trajstore::{ActionKind, StateKind};

/// Pixel size of one grid cell in image observations.
pub const CELL_PIXELS: usize = 14;

const STEP_COST: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvSpec {
    Chain { length: usize, noise: f64 },
    Grid { size: usize, image: bool },
    KeyDoor { size: usize },
}

impl TryFrom<String> for EnvSpec {
    type Error = GdtError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EnvSpec> for String {
    fn from(e: EnvSpec) -> String {
        e.to_string()
    }
}

impl FromStr for EnvSpec {
    type Err = GdtError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || GdtError::Config(format!("unknown environment `{s}`"));
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let int = |i: usize, default: usize| -> Result<usize> {
            args.get(i)
                .map_or(Ok(default), |a| a.parse().map_err(|_| bad()))
        };
        let spec = match name {
            "chain" if args.len() <= 2 => EnvSpec::Chain {
                length: int(0, 6)?,
                noise: args
                    .get(1)
                    .map_or(Ok(0.0), |a| a.parse().map_err(|_| bad()))?,
            },
            "grid" if args.len() <= 1 => EnvSpec::Grid {
                size: int(0, 4)?,
                image: false,
            },
            "grid-image" if args.len() <= 1 => EnvSpec::Grid {
                size: int(0, 2)?,
                image: true,
            },
            "keydoor" if args.len() <= 1 => EnvSpec::KeyDoor { size: int(0, 4)? },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EnvSpec::Chain { length, noise } if noise == 0.0 => write!(f, "chain:{length}"),
            EnvSpec::Chain { length, noise } => write!(f, "chain:{length}:{noise}"),
            EnvSpec::Grid { size, image: false } => write!(f, "grid:{size}"),
            EnvSpec::Grid { size, image: true } => write!(f, "grid-image:{size}"),
            EnvSpec::KeyDoor { size } => write!(f, "keydoor:{size}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
    pub key: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Vector(Vec<f32>),
    Image(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f32,
    pub done: bool,
}

struct Outcome {
    prob: f64,
    next: Cell,
    reward: f64,
    terminal: bool,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EnvSpec::Chain { length, noise } => {
                (2..=64).contains(&length) && (0.0..=1.0).contains(&noise)
            }
            EnvSpec::Grid { size, .. } => (2..=16).contains(&size),
            EnvSpec::KeyDoor { size } => (2..=16).contains(&size),
        };
        if ok {
            Ok(())
        } else {
            Err(GdtError::Config(format!(
                "environment parameters out of range: {self:?}"
            )))
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            EnvSpec::Chain { .. } => 2,
            EnvSpec::Grid { .. } | EnvSpec::KeyDoor { .. } => 4,
        }
    }

    pub fn action_kind(&self) -> ActionKind {
        ActionKind::Discrete {
            n: self.num_actions(),
        }
    }

    pub fn horizon(&self) -> usize {
        match *self {
            EnvSpec::Chain { length, .. } => 2 * length,
            EnvSpec::Grid { size, .. } | EnvSpec::KeyDoor { size } => 4 * size,
        }
    }

    pub fn state_kind(&self) -> StateKind {
        match *self {
            EnvSpec::Chain { length, .. } => StateKind::Vector { dim: length },
            EnvSpec::Grid { size, image: false } => StateKind::Vector { dim: 2 * size },
            EnvSpec::Grid { size, image: true } => StateKind::Image {
                height: size * CELL_PIXELS,
                width: size * CELL_PIXELS,
                channels: 1,
            },
            EnvSpec::KeyDoor { size } => StateKind::Vector { dim: 2 * size + 1 },
        }
    }

    fn size(&self) -> (usize, usize) {
        match *self {
            EnvSpec::Chain { length, .. } => (length, 1),
            EnvSpec::Grid { size, .. } | EnvSpec::KeyDoor { size } => (size, size),
        }
    }

    fn num_cells(&self) -> usize {
        let (w, h) = self.size();
        w * h
            * if matches!(self, EnvSpec::KeyDoor { .. }) {
                2
            } else {
                1
            }
    }

    fn cell_id(&self, c: Cell) -> usize {
        let (w, h) = self.size();
        (c.key as usize * h + c.y) * w + c.x
    }

    fn start(&self) -> Cell {
        Cell {
            x: 0,
            y: 0,
            key: false,
        }
    }

    fn is_terminal(&self, c: Cell) -> bool {
        match *self {
            EnvSpec::Chain { length, .. } => c.x == length - 1,
            EnvSpec::Grid { size, .. } => c.x == size - 1 && c.y == size - 1,
            EnvSpec::KeyDoor { size } => c.key && c.x == 0 && c.y == size - 1,
        }
    }

    fn all_cells(&self) -> Vec<Cell> {
        let (w, h) = self.size();
        let keys: &[bool] = if matches!(self, EnvSpec::KeyDoor { .. }) {
            &[false, true]
        } else {
            &[false]
        };
        let mut out = Vec::new();
        for &key in keys {
            for y in 0..h {
                for x in 0..w {
                    out.push(Cell { x, y, key });
                }
            }
        }
        out
    }

    /// Deterministic move for an executed action.
    fn apply(&self, c: Cell, action: usize) -> (Cell, f64) {
        match *self {
            EnvSpec::Chain { .. } => {
                if action == 1 {
                    (Cell { x: c.x + 1, ..c }, 1.0)
                } else if c.x > 0 {
                    (Cell { x: c.x - 1, ..c }, -1.0)
                } else {
                    (c, 0.0)
                }
            }
            EnvSpec::Grid { size, .. } | EnvSpec::KeyDoor { size } => {
                let mut n = c;
                match action {
                    0 => n.y = n.y.saturating_sub(1),
                    1 => n.y = (n.y + 1).min(size - 1),
                    2 => n.x = n.x.saturating_sub(1),
                    _ => n.x = (n.x + 1).min(size - 1),
                }
                let reward = match self {
                    EnvSpec::Grid { .. } if self.is_terminal(n) => 10.0,
                    EnvSpec::Grid { .. } => -1.0,
                    _ => {
                        if !n.key && n.x == size - 1 && n.y == 0 {
                            n.key = true;
                            1.0
                        } else if self.is_terminal(n) {
                            10.0
                        } else {
                            0.0
                        }
                    }
                };
                (n, reward)
            }
        }
    }

    fn outcomes(&self, c: Cell, action: usize) -> Vec<Outcome> {
        let mut out = Vec::with_capacity(2);
        let noise = match *self {
            EnvSpec::Chain { noise, .. } => noise,
            _ => 0.0,
        };
        for (prob, executed) in [(1.0 - noise, action), (noise, 1 - action.min(1))] {
            if prob > 0.0 {
                let (next, reward) = self.apply(c, executed);
                out.push(Outcome {
                    prob,
                    next,
                    reward,
                    terminal: self.is_terminal(next),
                });
            }
        }
        out
    }

    /// Solves the finite-horizon MDP by exhaustive backward induction.
    pub fn plan(&self) -> Plan {
        let (h, s, a) = (self.horizon(), self.num_cells(), self.num_actions());
        // `shaped` charges a tiny cost per step so ties between equally
        // rewarding paths resolve to the shortest one
        let mut shaped = vec![0.0f64; h * s * a];
        let mut best = vec![0.0f64; (h + 1) * s];
        let mut best_shaped = vec![0.0f64; (h + 1) * s];
        let mut rand_mean = vec![0.0f64; (h + 1) * s];
        let mut rand_sq = vec![0.0f64; (h + 1) * s];
        let cells = self.all_cells();
        for t in (0..h).rev() {
            for &c in &cells {
                let id = self.cell_id(c);
                if self.is_terminal(c) {
                    continue;
                }
                let (mut m1, mut m2) = (0.0, 0.0);
                let (mut vmax, mut smax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for act in 0..a {
                    let (mut qa, mut qs) = (0.0, 0.0);
                    for o in self.outcomes(c, act) {
                        let nid = self.cell_id(o.next);
                        let (v, vs, rm, rs) = if o.terminal {
                            (0.0, 0.0, 0.0, 0.0)
                        } else {
                            let k = (t + 1) * s + nid;
                            (best[k], best_shaped[k], rand_mean[k], rand_sq[k])
                        };
                        qa += o.prob * (o.reward + v);
                        qs += o.prob * (o.reward - STEP_COST + vs);
                        m1 += o.prob * (o.reward + rm) / a as f64;
                        m2 += o.prob * (o.reward * o.reward + 2.0 * o.reward * rm + rs) / a as f64;
                    }
                    shaped[(t * s + id) * a + act] = qs;
                    vmax = vmax.max(qa);
                    smax = smax.max(qs);
                }
                best[t * s + id] = vmax;
                best_shaped[t * s + id] = smax;
                rand_mean[t * s + id] = m1;
                rand_sq[t * s + id] = m2;
            }
        }
        let start = self.cell_id(self.start());
        Plan {
            spec: *self,
            q: shaped,
            optimal_return: best[start],
            random_mean: rand_mean[start],
            random_var: rand_sq[start] - rand_mean[start] * rand_mean[start],
        }
    }

    pub fn make(&self, seed: u64) -> ToyEnv {
        ToyEnv {
            spec: *self,
            cell: self.start(),
            t: 0,
            rng: crate::seed::rng(seed, crate::seed::Stream::Env, 0),
        }
    }
}

/// Exact solution of a toy MDP.
#[derive(Debug, Clone)]
pub struct Plan {
    spec: EnvSpec,
    /// Step-cost shaped action values, used only to pick actions.
    q: Vec<f64>,
    /// Expected return of the optimal policy from the start state.
    pub optimal_return: f64,
    /// Expected return of the uniform random policy.
    pub random_mean: f64,
    pub random_var: f64,
}

impl Plan {
    /// Optimal action at step `t` in `cell`, preferring the fastest route.
    pub fn best_action(&self, t: usize, cell: Cell) -> usize {
        let (s, a) = (self.spec.num_cells(), self.spec.num_actions());
        let row = &self.q[(t * s + self.spec.cell_id(cell)) * a..][..a];
        let mut best = 0;
        for i in 1..a {
            if row[i] > row[best] + 1e-12 {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct ToyEnv {
    spec: EnvSpec,
    cell: Cell,
    t: usize,
    rng: ChaCha8Rng,
}

impl ToyEnv {
    pub fn spec(&self) -> EnvSpec {
        self.spec
    }

    pub fn cell(&self) -> Cell {
        self.cell
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.spec.is_terminal(self.cell) || self.t >= self.spec.horizon()
    }

    pub fn reset(&mut self) -> Observation {
        self.cell = self.spec.start();
        self.t = 0;
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        let c = self.cell;
        match self.spec {
            EnvSpec::Chain { length, .. } => Observation::Vector(one_hot(c.x, length)),
            EnvSpec::Grid { size, image: false } => {
                let mut v = one_hot(c.x, size);
                v.extend(one_hot(c.y, size));
                Observation::Vector(v)
            }
            EnvSpec::Grid { size, image: true } => {
                let side = size * CELL_PIXELS;
                let mut img = vec![0u8; side * side];
                let mut paint = |cx: usize, cy: usize, value: u8| {
                    for py in cy * CELL_PIXELS..(cy + 1) * CELL_PIXELS {
                        for px in cx * CELL_PIXELS..(cx + 1) * CELL_PIXELS {
                            img[py * side + px] = value;
                        }
                    }
                };
                paint(size - 1, size - 1, 128);
                paint(c.x, c.y, 255);
                Observation::Image(img)
            }
            EnvSpec::KeyDoor { size } => {
                let mut v = one_hot(c.x, size);
                v.extend(one_hot(c.y, size));
                v.push(c.key as u8 as f32);
                Observation::Vector(v)
            }
        }
    }

    /// Applies `action`. The episode ends on a terminal cell or at the horizon.
    pub fn step(&mut self, action: usize) -> Result<Step> {
        if self.done() {
            return Err(GdtError::Contract("step after the episode ended".into()));
        }
        if action >= self.spec.num_actions() {
            return Err(GdtError::Contract(format!(
                "action {action} out of range for {} actions",
                self.spec.num_actions()
            )));
        }
        let executed = match self.spec {
            EnvSpec::Chain { noise, .. } if noise > 0.0 && self.rng.random::<f64>() < noise => {
                1 - action
            }
            _ => action,
        };
        let (next, reward) = self.spec.apply(self.cell, executed);
        self.cell = next;
        self.t += 1;
        let done = self.done();
        Ok(Step {
            observation: self.observe(),
            reward: reward as f32,
            done,
        })
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force optimum over every deterministic action sequence.
    fn brute_force(spec: EnvSpec) -> f64 {
        fn go(spec: &EnvSpec, c: Cell, t: usize) -> f64 {
            if t == spec.horizon() || spec.is_terminal(c) {
                return 0.0;
            }
            (0..spec.num_actions())
                .map(|a| {
                    let (n, r) = spec.apply(c, a);
                    r + go(spec, n, t + 1)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
        go(&spec, spec.start(), 0)
    }

    #[test]
    fn specs_parse_and_print() {
        for s in [
            "chain:6",
            "chain:4:0.25",
            "grid:3",
            "grid-image:2",
            "keydoor:3",
        ] {
            assert_eq!(s.parse::<EnvSpec>().unwrap().to_string(), s);
        }
        assert_eq!("chain".parse::<EnvSpec>().unwrap().to_string(), "chain:6");
        assert!("maze".parse::<EnvSpec>().is_err());
        assert!("chain:1".parse::<EnvSpec>().is_err());
    }

    #[test]
    fn plans_match_exhaustive_search() {
        assert_eq!(brute_force("chain:4".parse().unwrap()), 3.0);
        for s in ["chain:4", "chain:6", "grid:2", "grid:3", "keydoor:2"] {
            let spec: EnvSpec = s.parse().unwrap();
            assert_eq!(spec.plan().optimal_return, brute_force(spec), "{s}");
        }
        // 4 moves on a 3x3 grid: three at -1 then +10
        assert_eq!(
            "grid:3".parse::<EnvSpec>().unwrap().plan().optimal_return,
            7.0
        );
        // key after 2 moves, door after 4 more
        assert_eq!(
            "keydoor:3"
                .parse::<EnvSpec>()
                .unwrap()
                .plan()
                .optimal_return,
            11.0
        );
    }

    #[test]
    fn random_moments_match_enumeration() {
        // every action sequence on chain:3 (horizon 6) is equally likely
        let spec: EnvSpec = "chain:3".parse().unwrap();
        let plan = spec.plan();
        let (mut m1, mut m2) = (0.0, 0.0);
        for code in 0..(1u32 << 6) {
            let (mut c, mut g) = (spec.start(), 0.0);
            for t in 0..6 {
                if spec.is_terminal(c) {
                    break;
                }
                let (nc, r) = spec.apply(c, ((code >> t) & 1) as usize);
                c = nc;
                g += r;
            }
            m1 += g / 64.0;
            m2 += g * g / 64.0;
        }
        let n = 1.0;
        let (mean, var) = (m1 / n, m2 / n - (m1 / n).powi(2));
        assert!(
            (plan.random_mean - mean).abs() < 1e-12,
            "{} {mean}",
            plan.random_mean
        );
        assert!((plan.random_var - var).abs() < 1e-12);
    }

    #[test]
    fn best_action_walks_to_goal() {
        for s in ["chain:6", "grid:4", "keydoor:4", "grid-image:2"] {
            let spec: EnvSpec = s.parse().unwrap();
            let plan = spec.plan();
            let mut env = spec.make(0);
            env.reset();
            let mut ret = 0.0;
            loop {
                let a = plan.best_action(env.t(), env.cell());
                let step = env.step(a).unwrap();
                ret += step.reward as f64;
                if step.done {
                    break;
                }
            }
            assert_eq!(ret, plan.optimal_return, "{s}");
        }
    }

    #[test]
    fn observations_match_state_kind() {
        for s in ["chain:5", "grid:3", "grid-image:2", "keydoor:3"] {
            let spec: EnvSpec = s.parse().unwrap();
            let obs = spec.make(1).reset();
            let len = match obs {
                Observation::Vector(v) => v.len(),
                Observation::Image(v) => v.len(),
            };
            assert_eq!(len, spec.state_kind().len(), "{s}");
        }
    }

    #[test]
    fn noisy_chain_is_seeded() {
        let spec: EnvSpec = "chain:6:0.3".parse().unwrap();
        let run = |seed| {
            let mut env = spec.make(seed);
            env.reset();
            let mut trace = Vec::new();
            while !env.done() {
                trace.push(env.step(1).unwrap().reward);
            }
            trace
        };
        assert_eq!(run(5), run(5));
    }
}
