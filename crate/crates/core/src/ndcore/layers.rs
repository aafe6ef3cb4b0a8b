//! Parameter bundles for the common layers.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AttnLayout, Init, ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::Result;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.init(
            format!("{name}.w"),
            &[input, output],
            Init::Normal(INIT_STD),
            true,
            rng,
        );
        let b =
            bias.then(|| store.init(format!("{name}.b"), &[1, output], Init::Zeros, false, rng));
        Self { w, b }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_tiled(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let gamma = store.init(format!("{name}.gamma"), &[width], Init::Ones, false, rng);
        let beta = store.init(format!("{name}.beta"), &[width], Init::Zeros, false, rng);
        Self { gamma, beta }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<F: Scalar>(self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Pre-norm transformer block: `x + Attn(LN x)`, then `x + MLP(LN x)` with an
/// MLP of width `4d`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub activation: Activation,
}

impl Block {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, rng),
            wq: Linear::new(store, &format!("{name}.attn.wq"), width, width, true, rng),
            wk: Linear::new(store, &format!("{name}.attn.wk"), width, width, true, rng),
            wv: Linear::new(store, &format!("{name}.attn.wv"), width, width, true, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), width, width, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, rng),
            fc1: Linear::new(
                store,
                &format!("{name}.mlp.fc1"),
                width,
                4 * width,
                true,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.mlp.fc2"),
                4 * width,
                width,
                true,
                rng,
            ),
            heads,
            activation,
        }
    }

    /// `relations` holds the raw query-side and key-side category tables
    /// (`categories x d`); they pass through the query and key weights
    /// without bias before entering the scores.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        relations: Option<(Var, Var)>,
        layout: &Arc<AttnLayout>,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let q = self.wq.forward(tape, store, h)?;
        let k = self.wk.forward(tape, store, h)?;
        let v = self.wv.forward(tape, store, h)?;
        let rel = match relations {
            Some((fwd, bwd)) => {
                let wq = tape.param(store, self.wq.w);
                let wk = tape.param(store, self.wk.w);
                Some((tape.matmul(fwd, wq)?, tape.matmul(bwd, wk)?))
            }
            None => None,
        };
        let a = tape.attention(q, k, v, rel, layout.clone(), self.heads)?;
        let a = self.proj.forward(tape, store, a)?;
        let a = tape.dropout(a, dropout);
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = self.activation.apply(tape, h);
        let h = self.fc2.forward(tape, store, h)?;
        let h = tape.dropout(h, dropout);
        tape.add(x, h)
    }
}
