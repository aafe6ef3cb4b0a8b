//! Straight-line f64 forward pass of the graph network with its action head,
//! written from scratch with plain loops. Only vector states and discrete
//! actions are covered.

#![allow(dead_code)]

use gdt_core::graphrep::{ConnectionMode, RewardSetting};
use gdt_core::model::{Batch, BatchActions, ModelConfig};
use gdt_core::ndcore::layers::Activation;
use gdt_core::ndcore::ParamStore;

pub struct Oracle<'a> {
    pub store: &'a ParamStore<f64>,
    pub cfg: &'a ModelConfig,
    /// When false the relation tables are ignored entirely, giving a plain
    /// causal transformer.
    pub relations: bool,
}

type Mat = Vec<Vec<f64>>;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> (Vec<usize>, Vec<f64>) {
        let id = self
            .store
            .find(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        let t = self.store.value(id);
        (t.shape().to_vec(), t.data().to_vec())
    }

    fn linear(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (shape, w) = self.p(&format!("{name}.w"));
        let (_, b) = self.p(&format!("{name}.b"));
        let (inp, out) = (shape[0], shape[1]);
        assert_eq!(x.len(), inp);
        (0..out)
            .map(|o| b[o] + (0..inp).map(|i| x[i] * w[i * out + o]).sum::<f64>())
            .collect()
    }

    fn no_bias(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (shape, w) = self.p(&format!("{name}.w"));
        let out = shape[1];
        (0..out)
            .map(|o| (0..shape[0]).map(|i| x[i] * w[i * out + o]).sum())
            .collect()
    }

    fn layernorm(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (_, g) = self.p(&format!("{name}.gamma"));
        let (_, b) = self.p(&format!("{name}.beta"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    fn row(&self, name: &str, r: usize) -> Vec<f64> {
        let (shape, t) = self.p(name);
        t[r * shape[1]..(r + 1) * shape[1]].to_vec()
    }

    fn tokens_per_step(&self) -> usize {
        if self.cfg.reward == RewardSetting::NoReward {
            2
        } else {
            3
        }
    }

    /// Parent test rebuilt from the dependency rules: a state depends on the
    /// previous state and action, an action on its state and reward-kind
    /// token, a return-to-go on the previous return-to-go, state and action,
    /// a step reward on the previous state and action.
    fn is_parent(&self, query: usize, key: usize) -> bool {
        if key >= query {
            return false;
        }
        match self.cfg.connection {
            ConnectionMode::Full => return true,
            ConnectionMode::None => return false,
            ConnectionMode::Causal => {}
            ConnectionMode::Random { .. } => panic!("oracle has no random graphs"),
        }
        let tps = self.tokens_per_step();
        let (tq, kq) = (query / tps, query % tps);
        let (tk, kk) = (key / tps, key % tps);
        let rtg = self.cfg.reward == RewardSetting::Rtg;
        // kinds: 0 reward-kind, 1 state, 2 action (shifted for two-token steps)
        let kind = |k: usize| if tps == 2 { k + 1 } else { k };
        match (kind(kq), kind(kk)) {
            (1, 1) | (1, 2) => tq == tk + 1,
            (2, 1) => tq == tk,
            (2, 0) => tq == tk && (rtg || tq > 0),
            (0, 1) | (0, 2) => tq == tk + 1,
            (0, 0) => rtg && tq == tk + 1,
            _ => false,
        }
    }

    /// Logits for every step, `batch * K` rows.
    pub fn logits(&self, batch: &Batch) -> Mat {
        let cfg = self.cfg;
        let (d, k) = (cfg.width, batch.k);
        let tps = self.tokens_per_step();
        let n = k * tps;
        let BatchActions::Discrete(actions) = &batch.actions else {
            panic!("oracle covers discrete actions only")
        };
        let sdim = batch.states.len() / (batch.size * k);
        let mut result = Vec::new();
        for b in 0..batch.size {
            let pad = |tok: usize| batch.pad[b * k + tok / tps];
            let mut x: Mat = vec![vec![0.0; d]; n];
            for t in 0..k {
                let r = b * k + t;
                let time = self.row(
                    "graph.embed.time.table",
                    batch.timesteps[r].min(cfg.max_timestep),
                );
                let s: Vec<f64> = batch.states[r * sdim..(r + 1) * sdim]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let se = self.linear("graph.embed.state", &s);
                let ae = self.row("graph.embed.action.table", actions[r]);
                let base = t * tps;
                let off = tps - 2;
                for e in 0..d {
                    x[base + off][e] = se[e] + time[e];
                    x[base + off + 1][e] = ae[e] + time[e];
                }
                if tps == 3 {
                    let re = self.linear("graph.embed.return", &[batch.returns[r] as f64]);
                    for e in 0..d {
                        x[base][e] = re[e] + time[e];
                    }
                }
            }
            let relation = |i: usize, j: usize| -> usize {
                if i == j {
                    0
                } else if pad(i) || pad(j) {
                    2
                } else if self.is_parent(i, j) {
                    1
                } else {
                    2
                }
            };
            for l in 0..cfg.layers {
                let pre = format!("graph.blocks.{l}");
                let h: Mat = x
                    .iter()
                    .map(|r| self.layernorm(&format!("{pre}.ln1"), r))
                    .collect();
                let q: Mat = h
                    .iter()
                    .map(|r| self.linear(&format!("{pre}.attn.wq"), r))
                    .collect();
                let kk: Mat = h
                    .iter()
                    .map(|r| self.linear(&format!("{pre}.attn.wk"), r))
                    .collect();
                let v: Mat = h
                    .iter()
                    .map(|r| self.linear(&format!("{pre}.attn.wv"), r))
                    .collect();
                let qr: Mat = (0..3)
                    .map(|c| {
                        self.no_bias(
                            &format!("{pre}.attn.wq"),
                            &self.row("graph.relation.fwd", c),
                        )
                    })
                    .collect();
                let kr: Mat = (0..3)
                    .map(|c| {
                        self.no_bias(
                            &format!("{pre}.attn.wk"),
                            &self.row("graph.relation.bwd", c),
                        )
                    })
                    .collect();
                let dh = d / cfg.heads;
                let mut att = vec![vec![0.0; d]; n];
                for head in 0..cfg.heads {
                    let cols = head * dh..(head + 1) * dh;
                    for i in 0..n {
                        let keys: Vec<usize> = (0..n)
                            .filter(|&j| if pad(i) { j == i } else { j <= i && !pad(j) })
                            .collect();
                        let scores: Vec<f64> = keys
                            .iter()
                            .map(|&j| {
                                let c = relation(i, j);
                                cols.clone()
                                    .map(|e| {
                                        if self.relations {
                                            (q[i][e] + qr[c][e]) * (kk[j][e] + kr[c][e])
                                        } else {
                                            q[i][e] * kk[j][e]
                                        }
                                    })
                                    .sum::<f64>()
                                    / (dh as f64).sqrt()
                            })
                            .collect();
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let total: f64 = w.iter().sum();
                        for (wi, &j) in w.iter().zip(&keys) {
                            for e in cols.clone() {
                                att[i][e] += wi / total * v[j][e];
                            }
                        }
                    }
                }
                for i in 0..n {
                    let a = self.linear(&format!("{pre}.attn.proj"), &att[i]);
                    let mid: Vec<f64> = x[i].iter().zip(&a).map(|(p, q)| p + q).collect();
                    let h = self.layernorm(&format!("{pre}.ln2"), &mid);
                    let h: Vec<f64> = self
                        .linear(&format!("{pre}.mlp.fc1"), &h)
                        .into_iter()
                        .map(|z| match cfg.activation {
                            Activation::Gelu => gelu(z),
                            Activation::Relu => z.max(0.0),
                        })
                        .collect();
                    let h = self.linear(&format!("{pre}.mlp.fc2"), &h);
                    x[i] = mid.iter().zip(&h).map(|(p, q)| p + q).collect();
                }
            }
            for t in 0..k {
                let mut cat = x[t * tps + tps - 2].clone();
                if tps == 3 {
                    cat.extend_from_slice(&x[t * tps]);
                } else {
                    cat.extend(std::iter::repeat_n(0.0, d));
                }
                let g = self.linear("graph.feature", &cat);
                let h = self.layernorm("graph.head.ln", &g);
                result.push(self.linear("graph.head.out", &h));
            }
        }
        result
    }
}
