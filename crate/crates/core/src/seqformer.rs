//! Patch-level sequence network. Each step contributes a group of `n` patch
//! tokens followed by one slot that carries the step feature from the graph
//! network; the slot output feeds the action head.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, GdtError, Result};
use crate::graphformer::{squash, GraphOutput};
use crate::model::{Batch, IoSpec, ModelConfig, SeqConfig};
use crate::ndcore::layers::{Block, LayerNorm, Linear, INIT_STD};
use crate::ndcore::{AttnLayout, ConvGeom, Init, ParamId, ParamStore, Scalar, Tape, Var};
use crate::trajstore::StateKind;

/// How graph features enter the sequence network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StMethod {
    /// Overwrite the slot with the layer's feature.
    Replace,
    /// Add the layer's feature to the slot.
    Fusion,
    /// Final-layer feature as the initial slot content only.
    Stack,
}

impl StMethod {
    pub const ALL: [StMethod; 3] = [StMethod::Replace, StMethod::Fusion, StMethod::Stack];
}

impl fmt::Display for StMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StMethod::Replace => "replace",
            StMethod::Fusion => "fusion",
            StMethod::Stack => "stack",
        })
    }
}

impl FromStr for StMethod {
    type Err = GdtError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "replace" => Ok(StMethod::Replace),
            "fusion" => Ok(StMethod::Fusion),
            "stack" => Ok(StMethod::Stack),
            _ => Err(GdtError::Config(format!(
                "unknown connection method `{s}` (replace, fusion, stack)"
            ))),
        }
    }
}

impl TryFrom<String> for StMethod {
    type Error = GdtError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StMethod> for String {
    fn from(m: StMethod) -> String {
        m.to_string()
    }
}

/// Position of step `t`'s feature slot in the grouped sequence.
pub fn slot_index(n: usize, t: usize) -> usize {
    n + t * (n + 1)
}

/// Patches per frame; the grid must tile the frame exactly.
pub fn patch_count(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(GdtError::Config(format!(
            "patch size {patch} does not tile a {height}x{width} frame"
        )));
    }
    Ok((height / patch) * (width / patch))
}

/// Layer-0 input: per step, the `n` patch tokens followed by the feature.
/// `patches` rows are ordered (batch, step, patch); `g` rows (batch, step).
pub fn assemble_groups<F: Scalar>(
    tape: &mut Tape<F>,
    patches: Option<Var>,
    g: Var,
    batch_size: usize,
    k: usize,
    n: usize,
) -> Result<Var> {
    let (rows, width) = tape.value(g).dims2();
    contract!(
        rows == batch_size * k,
        "{rows} features for {batch_size} x {k} steps"
    );
    let group = n + 1;
    let base = tape.zeros(&[batch_size * k * group, width]);
    let slots: Vec<usize> = (0..rows)
        .map(|r| (r / k) * k * group + slot_index(n, r % k))
        .collect();
    let x = match patches {
        Some(p) => {
            let idx: Vec<usize> = (0..rows * n)
                .map(|r| {
                    let (step, i) = (r / n, r % n);
                    (step / k) * k * group + (step % k) * group + i
                })
                .collect();
            tape.scatter_rows(base, p, &idx, true)?
        }
        None => {
            contract!(n == 0, "missing patch tokens for n = {n}");
            base
        }
    };
    tape.scatter_rows(x, g, &slots, true)
}

/// Input of a deeper layer from the previous output and this layer's
/// feature: added at the slots (Fusion), written over them (Replace), or
/// ignored (Stack).
pub fn assemble_layer_input<F: Scalar>(
    tape: &mut Tape<F>,
    prev: Var,
    g: Var,
    slots: &[usize],
    method: StMethod,
) -> Result<Var> {
    match method {
        StMethod::Fusion => tape.scatter_rows(prev, g, slots, false),
        StMethod::Replace => tape.scatter_rows(prev, g, slots, true),
        StMethod::Stack => Ok(prev),
    }
}

#[derive(Debug, Clone)]
enum PatchEmbedder {
    Image { geom: ConvGeom, proj: Linear },
    Scalars { w: ParamId },
}

#[derive(Debug, Clone)]
pub struct SeqFormer {
    width: usize,
    dropout: f64,
    n: usize,
    method: StMethod,
    graph_layers: usize,
    patches: PatchEmbedder,
    pos: ParamId,
    adapter: Option<Linear>,
    blocks: Vec<Block>,
    head: (LayerNorm, Linear),
}

impl SeqFormer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        model: &ModelConfig,
        cfg: &SeqConfig,
        io: &IoSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let ds = cfg.width;
        let (patches, n) = match io.state {
            StateKind::Image {
                height,
                width,
                channels,
            } => {
                let n = patch_count(height, width, cfg.patch)?;
                let geom = ConvGeom {
                    height,
                    width,
                    channels,
                    kernel: cfg.patch,
                    stride: cfg.patch,
                };
                let proj = Linear::new(store, "seq.patch", geom.patch_len(), ds, true, rng);
                (PatchEmbedder::Image { geom, proj }, n)
            }
            StateKind::Vector { dim } => {
                let w = store.init(
                    "seq.scalar.w",
                    &[dim, ds],
                    Init::Normal(INIT_STD),
                    true,
                    rng,
                );
                (PatchEmbedder::Scalars { w }, dim)
            }
        };
        let pos = store.init(
            "seq.pos.table",
            &[n, ds],
            Init::Normal(INIT_STD),
            false,
            rng,
        );
        let adapter = (model.width != ds)
            .then(|| Linear::new(store, "seq.adapter", model.width, ds, false, rng));
        let blocks = (0..cfg.layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("seq.blocks.{l}"),
                    ds,
                    cfg.heads,
                    model.activation,
                    rng,
                )
            })
            .collect();
        let head = (
            LayerNorm::new(store, "seq.head.ln", ds, rng),
            Linear::new(
                store,
                "seq.head.out",
                ds,
                io.action.output_width(),
                true,
                rng,
            ),
        );
        Ok(Self {
            width: ds,
            dropout: model.dropout,
            n,
            method: cfg.method,
            graph_layers: model.layers,
            patches,
            pos,
            adapter,
            blocks,
            head,
        })
    }

    pub fn patches_per_step(&self) -> usize {
        self.n
    }

    pub fn method(&self) -> StMethod {
        self.method
    }

    /// Graph layer whose feature enters sequence layer `l`. The two stacks
    /// are aligned at their ends, so the last sequence layer sees the last
    /// graph layer.
    pub fn graph_layer_for(&self, l: usize) -> usize {
        (self.graph_layers + l)
            .saturating_sub(self.blocks.len())
            .min(self.graph_layers - 1)
    }

    /// Graph layers whose features this network consumes.
    pub fn wanted_graph_layers(&self) -> Vec<bool> {
        let mut want = vec![false; self.graph_layers];
        match self.method {
            StMethod::Stack => want[self.graph_layers - 1] = true,
            _ => (0..self.blocks.len()).for_each(|l| want[self.graph_layer_for(l)] = true),
        }
        want
    }

    /// Patch tokens of every frame, rows ordered (batch, step, patch).
    pub fn patch_tokens<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        io: &IoSpec,
    ) -> Result<Var> {
        let rows = batch.size * batch.k;
        let x = tape.constant_f32(&[rows, io.state.len()], &batch.states)?;
        let tokens = match &self.patches {
            PatchEmbedder::Image { geom, proj } => {
                let cols = tape.im2col(x, *geom)?;
                proj.forward(tape, store, cols)?
            }
            PatchEmbedder::Scalars { w } => {
                let w = tape.param(store, *w);
                tape.scalar_tokens(x, w)?
            }
        };
        let pos = tape.param(store, self.pos);
        tape.add_tiled(tokens, pos)
    }

    /// Group-causal mask: a token sees every token of its own and earlier
    /// groups. Padded steps see only themselves.
    pub fn layout(&self, batch: &Batch, n: usize) -> Arc<AttnLayout> {
        let group = n + 1;
        let len = batch.k * group;
        let mut allowed = vec![false; batch.size * len * len];
        for b in 0..batch.size {
            let padded = |tok: usize| batch.pad[b * batch.k + tok / group];
            for i in 0..len {
                for j in 0..len {
                    allowed[(b * len + i) * len + j] = if padded(i) {
                        i == j
                    } else {
                        j / group <= i / group && !padded(j)
                    };
                }
            }
        }
        Arc::new(AttnLayout {
            batch: batch.size,
            tokens: len,
            allowed,
            relation: None,
        })
    }

    fn adapt<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, g: Var) -> Result<Var> {
        match &self.adapter {
            Some(lin) => lin.forward(tape, store, g),
            None => {
                let (_, w) = tape.value(g).dims2();
                contract!(
                    w == self.width,
                    "feature width {w} needs an adapter to width {}",
                    self.width
                );
                Ok(g)
            }
        }
    }

    /// Slot outputs `h_t`, `batch * K x d_s`, before the head. `patches` may
    /// be `None` only with `n == 0`.
    pub fn forward_tokens<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        patches: Option<Var>,
        n: usize,
        graph: &GraphOutput,
    ) -> Result<Var> {
        let (bsz, k) = (batch.size, batch.k);
        let feature = |l: usize| -> Result<Var> {
            graph.features[l].ok_or_else(|| {
                GdtError::Contract(format!("graph features of layer {l} were not computed"))
            })
        };
        let last = self.graph_layers - 1;
        let g0 = match self.method {
            StMethod::Stack => feature(last)?,
            _ => feature(self.graph_layer_for(0))?,
        };
        let g0 = self.adapt(tape, store, g0)?;
        let mut y = assemble_groups(tape, patches, g0, bsz, k, n)?;
        y = tape.dropout(y, self.dropout);
        let slots: Vec<usize> = (0..bsz * k)
            .map(|r| (r / k) * k * (n + 1) + slot_index(n, r % k))
            .collect();
        let layout = self.layout(batch, n);
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 && self.method != StMethod::Stack {
                let g = feature(self.graph_layer_for(l))?;
                let g = self.adapt(tape, store, g)?;
                y = assemble_layer_input(tape, y, g, &slots, self.method)?;
            }
            y = block.forward(tape, store, y, None, &layout, self.dropout)?;
        }
        tape.gather_rows(y, &slots)
    }

    /// Action predictions, `batch * K x out`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        io: &IoSpec,
        graph: &GraphOutput,
    ) -> Result<Var> {
        let patches = self.patch_tokens(tape, store, batch, io)?;
        let h = self.forward_tokens(tape, store, batch, Some(patches), self.n, graph)?;
        self.head(tape, store, h, io)
    }

    pub fn head<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        h: Var,
        io: &IoSpec,
    ) -> Result<Var> {
        let x = self.head.0.forward(tape, store, h)?;
        let y = self.head.1.forward(tape, store, x)?;
        squash(tape, y, io)
    }
}
