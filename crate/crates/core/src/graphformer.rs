//! Relation-enhanced graph attention over the token graph of a window.

use std::sync::Arc;

use rand::Rng;

use crate::error::{contract, GdtError, Result};
use crate::graphrep::{RewardSetting, TokenGraph, NUM_RELATIONS};
use crate::model::{Batch, BatchActions, IoSpec, ModelConfig};
use crate::ndcore::layers::{Activation, Block, LayerNorm, Linear, INIT_STD};
use crate::ndcore::{AttnLayout, ConvGeom, Init, ParamId, ParamStore, Scalar, Tape, Var};
use crate::trajstore::{ActionKind, StateKind};

/// `(Wq x_i) . (Wk x_j) / sqrt(d_head)` for one head. Weights are `d x d_head`
/// row-major.
pub fn vanilla_score(xi: &[f64], xj: &[f64], wq: &[f64], wk: &[f64], d_head: usize) -> f64 {
    let project = |x: &[f64], w: &[f64]| -> Vec<f64> {
        (0..d_head)
            .map(|c| {
                x.iter()
                    .enumerate()
                    .map(|(r, &v)| v * w[r * d_head + c])
                    .sum()
            })
            .collect()
    };
    let (q, k) = (project(xi, wq), project(xj, wk));
    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d_head as f64).sqrt()
}

/// Score with the query-side relation added to `x_i` and the key-side
/// relation added to `x_j` before projection.
pub fn relation_score(
    xi: &[f64],
    xj: &[f64],
    rel_fwd: &[f64],
    rel_bwd: &[f64],
    wq: &[f64],
    wk: &[f64],
    d_head: usize,
) -> f64 {
    let qi: Vec<f64> = xi.iter().zip(rel_fwd).map(|(a, b)| a + b).collect();
    let kj: Vec<f64> = xj.iter().zip(rel_bwd).map(|(a, b)| a + b).collect();
    vanilla_score(&qi, &kj, wq, wk, d_head)
}

/// Convolution geometry of the three-block frame encoder.
pub fn conv_plan(
    height: usize,
    width: usize,
    channels: usize,
    filters: [usize; 3],
) -> Result<Vec<ConvGeom>> {
    let kernels: [(usize, usize); 3] = if height.min(width) >= 36 {
        [(8, 4), (4, 2), (3, 1)]
    } else {
        [(3, 2), (3, 1), (3, 1)]
    };
    let (mut h, mut w, mut c) = (height, width, channels);
    let mut out = Vec::new();
    for (i, &(kernel, stride)) in kernels.iter().enumerate() {
        let g = ConvGeom {
            height: h,
            width: w,
            channels: c,
            kernel,
            stride,
        };
        g.validate().map_err(|_| {
            GdtError::Config(format!(
                "frame {height}x{width} too small for the convolutional encoder"
            ))
        })?;
        h = g.out_height();
        w = g.out_width();
        c = filters[i];
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum StateEncoder {
    Vector(Linear),
    Image {
        convs: Vec<(ConvGeom, Linear)>,
        out: Linear,
    },
}

#[derive(Debug, Clone)]
enum ActionEncoder {
    Table(ParamId),
    Linear(Linear),
}

/// Per-layer outputs of the graph network.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// Token outputs after each layer, `batch * tokens x d`.
    pub tokens: Vec<Var>,
    /// Step features after each layer, `batch * K x d`; `None` for layers that
    /// were not requested.
    pub features: Vec<Option<Var>>,
}

#[derive(Debug, Clone)]
pub struct GraphFormer {
    width: usize,
    dropout: f64,
    max_timestep: usize,
    encoder_activation: Activation,
    graph: TokenGraph,
    relation: Vec<u8>,
    state: StateEncoder,
    action: ActionEncoder,
    ret: Option<Linear>,
    time: ParamId,
    rel_fwd: ParamId,
    rel_bwd: ParamId,
    blocks: Vec<Block>,
    feature: Linear,
    head: Option<(LayerNorm, Linear)>,
}

impl GraphFormer {
    /// Registers parameters under `graph.`. The action head is created only
    /// when `with_head` is set.
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        io: &IoSpec,
        graph: TokenGraph,
        with_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.width;
        let state = match io.state {
            StateKind::Vector { dim } => {
                StateEncoder::Vector(Linear::new(store, "graph.embed.state", dim, d, true, rng))
            }
            StateKind::Image {
                height,
                width,
                channels,
            } => {
                let plan = conv_plan(height, width, channels, cfg.conv_channels)?;
                let mut convs = Vec::new();
                for (i, g) in plan.iter().enumerate() {
                    let lin = Linear::new(
                        store,
                        &format!("graph.embed.conv{i}"),
                        g.patch_len(),
                        cfg.conv_channels[i],
                        true,
                        rng,
                    );
                    convs.push((*g, lin));
                }
                let last = plan[2];
                let flat = last.out_height() * last.out_width() * cfg.conv_channels[2];
                let out = Linear::new(store, "graph.embed.state", flat, d, true, rng);
                StateEncoder::Image { convs, out }
            }
        };
        let action = match io.action {
            ActionKind::Discrete { n } => ActionEncoder::Table(store.init(
                "graph.embed.action.table",
                &[n, d],
                Init::Normal(INIT_STD),
                false,
                rng,
            )),
            ActionKind::Continuous { dim } => {
                ActionEncoder::Linear(Linear::new(store, "graph.embed.action", dim, d, true, rng))
            }
        };
        let ret = (graph.setting() != RewardSetting::NoReward)
            .then(|| Linear::new(store, "graph.embed.return", 1, d, true, rng));
        let time = store.init(
            "graph.embed.time.table",
            &[cfg.max_timestep + 1, d],
            Init::Normal(INIT_STD),
            false,
            rng,
        );
        let rel_fwd = store.init(
            "graph.relation.fwd",
            &[NUM_RELATIONS, d],
            Init::Normal(INIT_STD),
            false,
            rng,
        );
        let rel_bwd = store.init(
            "graph.relation.bwd",
            &[NUM_RELATIONS, d],
            Init::Normal(INIT_STD),
            false,
            rng,
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("graph.blocks.{l}"),
                    d,
                    cfg.heads,
                    cfg.activation,
                    rng,
                )
            })
            .collect();
        let feature = Linear::new(store, "graph.feature", 2 * d, d, true, rng);
        let head = with_head.then(|| {
            (
                LayerNorm::new(store, "graph.head.ln", d, rng),
                Linear::new(
                    store,
                    "graph.head.out",
                    d,
                    io.action.output_width(),
                    true,
                    rng,
                ),
            )
        });
        let relation = graph.relation_matrix();
        Ok(Self {
            width: d,
            dropout: cfg.dropout,
            max_timestep: cfg.max_timestep,
            encoder_activation: cfg.encoder_activation,
            graph,
            relation,
            state,
            action,
            ret,
            time,
            rel_fwd,
            rel_bwd,
            blocks,
            feature,
            head,
        })
    }

    pub fn graph(&self) -> &TokenGraph {
        &self.graph
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn relation_params(&self) -> (ParamId, ParamId) {
        (self.rel_fwd, self.rel_bwd)
    }

    /// Attention layout: causal over valid tokens, relation categories from
    /// the token graph, padded tokens attend only to themselves and receive
    /// `NoEdge` to and from everything else.
    pub fn layout(&self, batch: &Batch) -> Arc<AttnLayout> {
        let n = self.graph.len();
        let tps = self.graph.setting().tokens_per_step();
        let mut allowed = vec![false; batch.size * n * n];
        let mut relation = vec![0u8; batch.size * n * n];
        for b in 0..batch.size {
            let padded = |tok: usize| batch.pad[b * batch.k + tok / tps];
            for i in 0..n {
                for j in 0..n {
                    let at = (b * n + i) * n + j;
                    let ok = if padded(i) {
                        i == j
                    } else {
                        j <= i && !padded(j)
                    };
                    allowed[at] = ok;
                    relation[at] = if i == j || !(padded(i) || padded(j)) {
                        self.relation[i * n + j]
                    } else {
                        crate::graphrep::Relation::NoEdge as u8
                    };
                }
            }
        }
        Arc::new(AttnLayout {
            batch: batch.size,
            tokens: n,
            allowed,
            relation: Some(relation),
        })
    }

    fn embed_states<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        slen: usize,
    ) -> Result<Var> {
        let rows = batch.size * batch.k;
        let x = tape.constant_f32(&[rows, slen], &batch.states)?;
        match &self.state {
            StateEncoder::Vector(lin) => lin.forward(tape, store, x),
            StateEncoder::Image { convs, out } => {
                let mut h = x;
                for (g, lin) in convs {
                    let cols = tape.im2col(h, *g)?;
                    let y = lin.forward(tape, store, cols)?;
                    let y = self.encoder_activation.apply(tape, y);
                    let (_, ch) = tape.value(y).dims2();
                    h = tape.reshape(y, &[rows, g.out_height() * g.out_width() * ch])?;
                }
                out.forward(tape, store, h)
            }
        }
    }

    /// Interleaved token embeddings, `batch * tokens x d`.
    pub fn embed<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        io: &IoSpec,
    ) -> Result<Var> {
        let (bsz, k) = (batch.size, batch.k);
        let rows = bsz * k;
        contract!(
            k == self.graph.k(),
            "batch context {k} differs from model context {}",
            self.graph.k()
        );
        batch.check(io)?;
        let n = self.graph.len();
        let d = self.width;

        let table = tape.param(store, self.time);
        let steps: Vec<usize> = batch
            .timesteps
            .iter()
            .map(|&t| t.min(self.max_timestep))
            .collect();
        let temb = tape.embedding(table, &steps)?;

        let s = self.embed_states(tape, store, batch, io.state.len())?;
        let s = tape.add(s, temb)?;
        let a = match (&self.action, &batch.actions) {
            (ActionEncoder::Table(t), BatchActions::Discrete(ids)) => {
                let t = tape.param(store, *t);
                tape.embedding(t, ids)?
            }
            (ActionEncoder::Linear(lin), BatchActions::Continuous(v)) => {
                let x = tape.constant_f32(&[rows, io.action.output_width()], v)?;
                lin.forward(tape, store, x)?
            }
            _ => {
                return Err(GdtError::Contract(
                    "batch action kind differs from model".into(),
                ))
            }
        };
        let a = tape.add(a, temb)?;

        let at = |f: &dyn Fn(usize) -> usize| -> Vec<usize> {
            (0..rows).map(|r| (r / k) * n + f(r % k)).collect()
        };
        let base = tape.zeros(&[bsz * n, d]);
        let x = tape.scatter_rows(base, s, &at(&|t| self.graph.state_index(t)), true)?;
        let mut x = tape.scatter_rows(x, a, &at(&|t| self.graph.action_index(t)), true)?;
        if let Some(lin) = &self.ret {
            let r = tape.constant_f32(&[rows, 1], &batch.returns)?;
            let r = lin.forward(tape, store, r)?;
            let r = tape.add(r, temb)?;
            x = tape.scatter_rows(x, r, &at(&|t| 3 * t), true)?;
        }
        Ok(tape.dropout(x, self.dropout))
    }

    /// Step feature from the state and reward-kind outputs of step `t`:
    /// `FC([out[state_t], out[reward_t]])`, `batch x d`. Without reward
    /// tokens the second half is zero.
    pub fn extract_g<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        out: Var,
        batch_size: usize,
        t: usize,
    ) -> Result<Var> {
        contract!(
            t < self.graph.k(),
            "step {t} out of range for context {}",
            self.graph.k()
        );
        self.features_at(tape, store, out, batch_size, &[t])
    }

    fn features_at<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        out: Var,
        batch_size: usize,
        steps: &[usize],
    ) -> Result<Var> {
        let n = self.graph.len();
        let rows: Vec<(usize, usize)> = (0..batch_size)
            .flat_map(|b| steps.iter().map(move |&t| (b, t)))
            .collect();
        let sidx: Vec<usize> = rows
            .iter()
            .map(|&(b, t)| b * n + self.graph.state_index(t))
            .collect();
        let s = tape.gather_rows(out, &sidx)?;
        let r = match self.graph.reward_index(0) {
            Some(_) => {
                let ridx: Vec<usize> = rows
                    .iter()
                    .map(|&(b, t)| b * n + self.graph.reward_index(t).unwrap())
                    .collect();
                tape.gather_rows(out, &ridx)?
            }
            None => tape.zeros(&[rows.len(), self.width]),
        };
        let cat = tape.concat_cols(s, r)?;
        self.feature.forward(tape, store, cat)
    }

    /// Runs every layer. Features are computed for the layers flagged in
    /// `want` (indexed by layer); the final layer is always included.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        io: &IoSpec,
        want: &[bool],
    ) -> Result<GraphOutput> {
        let x0 = self.embed(tape, store, batch, io)?;
        self.forward_embedded(tape, store, x0, batch, want)
    }

    pub fn forward_embedded<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x0: Var,
        batch: &Batch,
        want: &[bool],
    ) -> Result<GraphOutput> {
        let layout = self.layout(batch);
        let fwd = tape.param(store, self.rel_fwd);
        let bwd = tape.param(store, self.rel_bwd);
        let steps: Vec<usize> = (0..batch.k).collect();
        let mut x = x0;
        let mut tokens = Vec::with_capacity(self.blocks.len());
        let mut features = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x, Some((fwd, bwd)), &layout, self.dropout)?;
            tokens.push(x);
            let need = l + 1 == self.blocks.len() || want.get(l).copied().unwrap_or(false);
            features.push(if need {
                Some(self.features_at(tape, store, x, batch.size, &steps)?)
            } else {
                None
            });
        }
        Ok(GraphOutput { tokens, features })
    }

    /// Action prediction from final-layer features.
    pub fn head<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        g: Var,
        io: &IoSpec,
    ) -> Result<Var> {
        let (ln, out) = self.head.as_ref().ok_or_else(|| {
            GdtError::Contract("graph network built without an action head".into())
        })?;
        let h = ln.forward(tape, store, g)?;
        let y = out.forward(tape, store, h)?;
        squash(tape, y, io)
    }
}

/// Continuous outputs are bounded to the normalized action range through a
/// tanh; discrete outputs are returned as logits.
pub(crate) fn squash<F: Scalar>(tape: &mut Tape<F>, y: Var, io: &IoSpec) -> Result<Var> {
    match io.action {
        ActionKind::Discrete { .. } => Ok(y),
        ActionKind::Continuous { .. } => {
            let t = tape.tanh(y);
            let half: Vec<F> = io.action_half.iter().map(|&v| F::from_f32(v)).collect();
            let center: Vec<F> = io.action_center.iter().map(|&v| F::from_f32(v)).collect();
            tape.affine(t, &half, &center)
        }
    }
}
