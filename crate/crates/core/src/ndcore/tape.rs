//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive records its inputs on the tape during the forward pass.
//! `backward` walks the tape once in reverse, accumulating gradients into the
//! parameter store and into any leaf created with `requires_grad`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{contract, GdtError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a strided patch extraction over HWC images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(GdtError::Config(
                "kernel and stride must be positive".into(),
            ));
        }
        if self.kernel > self.height || self.kernel > self.width {
            return Err(GdtError::Config(format!(
                "kernel {} larger than {}x{} input",
                self.kernel, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Masking and relation structure for a batch of attention sequences.
///
/// All arrays are indexed `[b][i][j]` with `i` the query and `j` the key.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub batch: usize,
    pub tokens: usize,
    pub allowed: Vec<bool>,
    pub relation: Option<Vec<u8>>,
}

impl AttnLayout {
    #[inline]
    fn at(&self, b: usize, i: usize, j: usize) -> usize {
        (b * self.tokens + i) * self.tokens + j
    }
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, F),
    Affine {
        x: Var,
        scale: Vec<F>,
    },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
        replace: bool,
    },
    ConcatCols(Var, Var),
    Reshape(Var),
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    ScalarTokens {
        x: Var,
        w: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        rel: Option<(Var, Var)>,
        layout: Arc<AttnLayout>,
        heads: usize,
        probs: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Mse {
        pred: Var,
        target: Vec<F>,
        weight: Vec<F>,
        denom: F,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<usize>,
        weight: Vec<F>,
        probs: Vec<F>,
        denom: F,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of leaves created with `requires_grad`, returned by `backward`.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    map: HashMap<Var, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.map.get(&var).map(|g| g.as_slice())
    }
}

pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

fn matmul_into<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

impl<F: Scalar> Tape<F> {
    /// Inference tape: dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training tape: dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => value.requires_grad,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn constant_f32(&mut self, shape: &[usize], data: &[f32]) -> Result<Var> {
        Ok(self.leaf(Tensor::from_f32(shape, data)?))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.leaf(Tensor::zeros(shape))
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push(value, Op::Param(id), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GdtError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(GdtError::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[r] + tile[r % n]` where `tile` has `n` rows; a bias is the `n = 1` case.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (n, tc) = self.dims(tile);
        if tc != c || n == 0 || r % n != 0 {
            return Err(GdtError::shape(
                "add_tiled",
                self.shape(x),
                self.shape(tile),
            ));
        }
        let xv = self.value(x).data();
        let tv = self.value(tile).data();
        let data = (0..r * c)
            .map(|idx| xv[idx] + tv[((idx / c) % n) * c + idx % c])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddTiled(x, tile), &[x, tile]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Per-column constant affine map `x * scale + shift`.
    pub fn affine(&mut self, x: Var, scale: &[F], shift: &[F]) -> Result<Var> {
        let (_, c) = self.dims(x);
        if scale.len() != c || shift.len() != c {
            return Err(GdtError::shape("affine", self.shape(x), &[scale.len()]));
        }
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i % c] + shift[i % c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::Affine {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        Tensor::new(tx.shape().to_vec(), data).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > F::zero() { v } else { F::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        contract!(c >= 1, "softmax over empty last dimension");
        let tx = self.value(x);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            softmax_row(
                &tx.data()[i * c..(i + 1) * c],
                &mut data[i * c..(i + 1) * c],
            );
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(GdtError::shape(
                "layernorm",
                self.shape(x),
                self.shape(gamma),
            ));
        }
        let eps = F::lit(eps);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let cf = F::lit(c as f64);
        let mut out = vec![F::zero(); r * c];
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GdtError::Contract(format!(
                "embedding index {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GdtError::Contract(format!(
                "row {bad} out of range ({rows} rows)"
            )));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Writes `src` row `k` into row `idx[k]` of a copy of `base`, either
    /// overwriting (`replace`) or adding. Target rows must be distinct.
    pub fn scatter_rows(
        &mut self,
        base: Var,
        src: Var,
        idx: &[usize],
        replace: bool,
    ) -> Result<Var> {
        let (rows, c) = self.dims(base);
        let (srows, sc) = self.dims(src);
        if sc != c || srows != idx.len() {
            return Err(GdtError::shape(
                "scatter_rows",
                self.shape(base),
                self.shape(src),
            ));
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            contract!(i < rows, "scatter row {i} out of range ({rows} rows)");
            contract!(!seen[i], "scatter row {i} targeted twice");
            seen[i] = true;
        }
        let mut data = self.value(base).data().to_vec();
        let sv = self.value(src).data();
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut data[i * c..(i + 1) * c];
            let s = &sv[k * c..(k + 1) * c];
            if replace {
                dst.copy_from_slice(s);
            } else {
                dst.iter_mut().zip(s).for_each(|(d, &v)| *d += v);
            }
        }
        let t = Tensor::new(self.shape(base).to_vec(), data)?;
        Ok(self.push(
            t,
            Op::ScatterRows {
                base,
                src,
                idx: idx.to_vec(),
                replace,
            },
            &[base, src],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(GdtError::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Extracts `kernel x kernel` patches at `stride` from HWC images stored one
    /// per row. Output rows are ordered (image, patch row, patch column) and each
    /// row is laid out (ky, kx, channel).
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        geom.validate()?;
        let (b, len) = self.dims(x);
        if len != geom.image_len() {
            return Err(GdtError::shape(
                "im2col",
                self.shape(x),
                &[geom.image_len()],
            ));
        }
        let (oh, ow, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * oh * ow * pl);
        for img in 0..b {
            let base = &xv[img * len..(img + 1) * len];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..geom.kernel {
                        let y = oy * geom.stride + ky;
                        let start = (y * geom.width + ox * geom.stride) * geom.channels;
                        data.extend_from_slice(&base[start..start + geom.kernel * geom.channels]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![b * oh * ow, pl], data)?;
        Ok(self.push(t, Op::Im2Col { x, geom }, &[x]))
    }

    /// One token per input scalar: row `r*D + i` is `x[r, i] * w[i]`.
    pub fn scalar_tokens(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, d) = self.dims(x);
        let (wd, e) = self.dims(w);
        if wd != d {
            return Err(GdtError::shape(
                "scalar_tokens",
                self.shape(x),
                self.shape(w),
            ));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = Vec::with_capacity(r * d * e);
        for row in 0..r {
            for i in 0..d {
                let s = xv[row * d + i];
                data.extend(wv[i * e..(i + 1) * e].iter().map(|&wv| s * wv));
            }
        }
        let t = Tensor::new(vec![r * d, e], data)?;
        Ok(self.push(t, Op::ScalarTokens { x, w }, &[x, w]))
    }

    /// Masked multi-head attention.
    ///
    /// `q`, `k`, `v` hold `batch * tokens` rows of width `d`. When `rel` is given
    /// it supplies per-category query-side and key-side embeddings (already
    /// projected, `categories x d`) added to queries and keys before the dot
    /// product; values never see them.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rel: Option<(Var, Var)>,
        layout: Arc<AttnLayout>,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims(q);
        let (bsz, n) = (layout.batch, layout.tokens);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(GdtError::shape("attention", self.shape(q), self.shape(k)));
        }
        contract!(
            rows == bsz * n,
            "attention rows {rows} != batch {bsz} x tokens {n}"
        );
        contract!(
            heads >= 1 && d % heads == 0,
            "width {d} not divisible by {heads} heads"
        );
        contract!(
            layout.allowed.len() == bsz * n * n,
            "attention mask has wrong size"
        );
        if let Some((qr, kr)) = rel {
            let (cq, dq) = self.dims(qr);
            if self.dims(kr) != (cq, dq) || dq != d {
                return Err(GdtError::shape(
                    "attention relations",
                    self.shape(qr),
                    self.shape(kr),
                ));
            }
            let relation = layout.relation.as_ref().ok_or_else(|| {
                GdtError::Contract("relation embeddings without relation layout".into())
            })?;
            contract!(
                relation.iter().all(|&c| (c as usize) < cq),
                "relation category out of range"
            );
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let relv = rel.map(|(qr, kr)| (self.value(qr).data(), self.value(kr).data()));
        let mut probs = vec![F::zero(); bsz * heads * n * n];
        let mut out = vec![F::zero(); rows * d];
        let mut scores = vec![F::zero(); n];
        for b in 0..bsz {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    let qi = &qv[(b * n + i) * d..(b * n + i + 1) * d];
                    let mut max = F::neg_infinity();
                    let mut visible = false;
                    for j in 0..n {
                        if !layout.allowed[layout.at(b, i, j)] {
                            continue;
                        }
                        visible = true;
                        let kj = &kv[(b * n + j) * d..(b * n + j + 1) * d];
                        let mut s = F::zero();
                        match relv {
                            Some((qr, kr)) => {
                                let c =
                                    layout.relation.as_ref().unwrap()[layout.at(b, i, j)] as usize;
                                for e in cols.clone() {
                                    s += (qi[e] + qr[c * d + e]) * (kj[e] + kr[c * d + e]);
                                }
                            }
                            None => {
                                for e in cols.clone() {
                                    s += qi[e] * kj[e];
                                }
                            }
                        }
                        s *= scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    contract!(visible, "attention row {i} has no visible keys");
                    let p = &mut probs
                        [((b * heads + h) * n + i) * n..((b * heads + h) * n + i + 1) * n];
                    let mut total = F::zero();
                    for j in 0..n {
                        if layout.allowed[layout.at(b, i, j)] {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            total += e;
                        }
                    }
                    let orow = &mut out[(b * n + i) * d..(b * n + i + 1) * d];
                    for j in 0..n {
                        if !layout.allowed[layout.at(b, i, j)] {
                            continue;
                        }
                        p[j] /= total;
                        let vj = &vv[(b * n + j) * d..(b * n + j + 1) * d];
                        for e in cols.clone() {
                            orow[e] += p[j] * vj[e];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let mut parents = vec![q, k, v];
        if let Some((qr, kr)) = rel {
            parents.extend([qr, kr]);
        }
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                rel,
                layout,
                heads,
                probs,
            },
            &parents,
        ))
    }

    /// Inverted dropout. Identity on inference tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { x, mask }, &[x])
    }

    /// Mean squared error over the rows with nonzero `row_weight`.
    pub fn mse_loss(&mut self, pred: Var, target: &[F], row_weight: &[F]) -> Result<Var> {
        let (r, c) = self.dims(pred);
        if target.len() != r * c || row_weight.len() != r {
            return Err(GdtError::shape(
                "mse_loss",
                self.shape(pred),
                &[target.len(), row_weight.len()],
            ));
        }
        let wsum: F = row_weight.iter().copied().sum();
        contract!(wsum > F::zero(), "loss over an all-masked batch");
        let denom = wsum * F::lit(c as f64);
        let pv = self.value(pred).data();
        let mut total = F::zero();
        for i in 0..r {
            if row_weight[i] == F::zero() {
                continue;
            }
            let mut s = F::zero();
            for j in 0..c {
                let d = pv[i * c + j] - target[i * c + j];
                s += d * d;
            }
            total += row_weight[i] * s;
        }
        let t = Tensor::scalar(total / denom);
        Ok(self.push(
            t,
            Op::Mse {
                pred,
                target: target.to_vec(),
                weight: row_weight.to_vec(),
                denom,
            },
            &[pred],
        ))
    }

    /// Mean cross-entropy of `logits` rows against class ids.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        target: &[usize],
        row_weight: &[F],
    ) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if target.len() != r || row_weight.len() != r {
            return Err(GdtError::shape(
                "cross_entropy",
                self.shape(logits),
                &[target.len()],
            ));
        }
        let wsum: F = row_weight.iter().copied().sum();
        contract!(wsum > F::zero(), "loss over an all-masked batch");
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); r * c];
        let mut total = F::zero();
        for i in 0..r {
            softmax_row(&lv[i * c..(i + 1) * c], &mut probs[i * c..(i + 1) * c]);
            if row_weight[i] == F::zero() {
                continue;
            }
            contract!(
                target[i] < c,
                "class {} out of range for {c} classes",
                target[i]
            );
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            total += row_weight[i] * (lse - row[target[i]]);
        }
        let t = Tensor::scalar(total / wsum);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                weight: row_weight.to_vec(),
                probs,
                denom: wsum,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients accumulate into
    /// `store`; gradients of `requires_grad` leaves are returned. The tape is
    /// cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        contract!(loss.0 < self.nodes.len(), "loss is not on this tape");
        contract!(
            self.nodes[loss.0].value.numel() == 1,
            "backward on non-scalar of shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads = Gradients {
            map: HashMap::new(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            backprop_node(&nodes, idx, &g, &mut grads, store, &mut leaf_grads);
        }
        Ok(leaf_grads)
    }
}

fn softmax_row<F: Scalar>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn accum<'a, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn backprop_node<F: Scalar>(
    nodes: &[Node<F>],
    idx: usize,
    g: &[F],
    grads: &mut [Option<Vec<F>>],
    store: &mut ParamStore<F>,
    leaf_grads: &mut Gradients<F>,
) {
    let node = &nodes[idx];
    let val = |v: Var| nodes[v.0].value.data();
    let dims = |v: Var| nodes[v.0].value.dims2();
    match &node.op {
        Op::Leaf => {
            let entry = leaf_grads
                .map
                .entry(Var(idx))
                .or_insert_with(|| vec![F::zero(); g.len()]);
            entry.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        Op::Param(id) => {
            let pg = &mut store.entry_mut(*id).grad;
            pg.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        Op::MatMul(a, b) => {
            let (m, k) = dims(*a);
            let (_, n) = dims(*b);
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = accum(nodes, grads, *a) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut s = F::zero();
                        for (&x, &y) in grow.iter().zip(brow) {
                            s += x * y;
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if let Some(gb) = accum(nodes, grads, *b) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == F::zero() {
                            continue;
                        }
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, &x) in dst.iter_mut().zip(grow) {
                            *d += aip * x;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = accum(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = accum(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = accum(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::AddTiled(x, tile) => {
            if let Some(gx) = accum(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            let (n, c) = dims(*tile);
            if let Some(gt) = accum(nodes, grads, *tile) {
                for (i, &v) in g.iter().enumerate() {
                    gt[((i / c) % n) * c + i % c] += v;
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = accum(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
        }
        Op::Affine { x, scale } => {
            let c = scale.len();
            if let Some(gx) = accum(nodes, grads, *x) {
                for (i, &v) in g.iter().enumerate() {
                    gx[i] += v * scale[i % c];
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(gx) = accum(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] > F::zero() {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(gx) = accum(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_grad(xv[i]);
                }
            }
        }
        Op::Tanh(x) => {
            let yv = node.value.data();
            if let Some(gx) = accum(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * (F::one() - yv[i] * yv[i]);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = accum(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Softmax(x) => {
            let (r, c) = node.value.dims2();
            let yv = node.value.data();
            if let Some(gx) = accum(nodes, grads, *x) {
                for i in 0..r {
                    let y = &yv[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let dot: F = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (r, c) = dims(*x);
            let gv = val(*gamma);
            if let Some(gg) = accum(nodes, grads, *gamma) {
                for i in 0..r * c {
                    gg[i % c] += g[i] * xhat[i];
                }
            }
            if let Some(gb) = accum(nodes, grads, *beta) {
                for i in 0..r * c {
                    gb[i % c] += g[i];
                }
            }
            if let Some(gx) = accum(nodes, grads, *x) {
                let cf = F::lit(c as f64);
                for i in 0..r {
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..c {
                        let dh = g[i * c + j] * gv[j];
                        mean_d += dh;
                        mean_dx += dh * xhat[i * c + j];
                    }
                    mean_d /= cf;
                    mean_dx /= cf;
                    for j in 0..c {
                        let dh = g[i * c + j] * gv[j];
                        gx[i * c + j] += rstd[i] * (dh - mean_d - xhat[i * c + j] * mean_dx);
                    }
                }
            }
        }
        Op::Embedding { table, idx } => {
            let (_, c) = dims(*table);
            if let Some(gt) = accum(nodes, grads, *table) {
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gt[i * c + j] += g[k * c + j];
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let (_, c) = dims(*x);
            if let Some(gx) = accum(nodes, grads, *x) {
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
            }
        }
        Op::ScatterRows {
            base,
            src,
            idx,
            replace,
        } => {
            let (_, c) = dims(*base);
            if let Some(gb) = accum(nodes, grads, *base) {
                gb.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                if *replace {
                    for &i in idx {
                        gb[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(d, &v)| *d -= v);
                    }
                }
            }
            if let Some(gs) = accum(nodes, grads, *src) {
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gs[k * c + j] += g[i * c + j];
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (r, ca) = dims(*a);
            let (_, cb) = dims(*b);
            let w = ca + cb;
            if let Some(ga) = accum(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..ca {
                        ga[i * ca + j] += g[i * w + j];
                    }
                }
            }
            if let Some(gb) = accum(nodes, grads, *b) {
                for i in 0..r {
                    for j in 0..cb {
                        gb[i * cb + j] += g[i * w + ca + j];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = accum(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Im2Col { x, geom } => {
            let (b, len) = dims(*x);
            let (oh, ow, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
            if let Some(gx) = accum(nodes, grads, *x) {
                let row_len = geom.kernel * geom.channels;
                for img in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let prow = ((img * oh + oy) * ow + ox) * pl;
                            for ky in 0..geom.kernel {
                                let y = oy * geom.stride + ky;
                                let start =
                                    img * len + (y * geom.width + ox * geom.stride) * geom.channels;
                                for t in 0..row_len {
                                    gx[start + t] += g[prow + ky * row_len + t];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::ScalarTokens { x, w } => {
            let (r, d) = dims(*x);
            let (_, e) = dims(*w);
            let (xv, wv) = (val(*x), val(*w));
            if let Some(gx) = accum(nodes, grads, *x) {
                for row in 0..r {
                    for i in 0..d {
                        let go = &g[(row * d + i) * e..(row * d + i + 1) * e];
                        gx[row * d + i] += go
                            .iter()
                            .zip(&wv[i * e..(i + 1) * e])
                            .map(|(&a, &b)| a * b)
                            .sum();
                    }
                }
            }
            if let Some(gw) = accum(nodes, grads, *w) {
                for row in 0..r {
                    for i in 0..d {
                        let s = xv[row * d + i];
                        let go = &g[(row * d + i) * e..(row * d + i + 1) * e];
                        for j in 0..e {
                            gw[i * e + j] += s * go[j];
                        }
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            rel,
            layout,
            heads,
            probs,
        } => backprop_attention(nodes, g, grads, *q, *k, *v, *rel, layout, *heads, probs),
        Op::Dropout { x, mask } => {
            if let Some(gx) = accum(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
        Op::Mse {
            pred,
            target,
            weight,
            denom,
        } => {
            let (r, c) = dims(*pred);
            let pv = val(*pred);
            if let Some(gp) = accum(nodes, grads, *pred) {
                let two = F::lit(2.0);
                for i in 0..r {
                    if weight[i] == F::zero() {
                        continue;
                    }
                    for j in 0..c {
                        gp[i * c + j] +=
                            g[0] * two * weight[i] * (pv[i * c + j] - target[i * c + j]) / *denom;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            target,
            weight,
            probs,
            denom,
        } => {
            let (r, c) = dims(*logits);
            if let Some(gl) = accum(nodes, grads, *logits) {
                for i in 0..r {
                    if weight[i] == F::zero() {
                        continue;
                    }
                    let s = g[0] * weight[i] / *denom;
                    for j in 0..c {
                        let onehot = if j == target[i] { F::one() } else { F::zero() };
                        gl[i * c + j] += s * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_attention<F: Scalar>(
    nodes: &[Node<F>],
    g: &[F],
    grads: &mut [Option<Vec<F>>],
    q: Var,
    k: Var,
    v: Var,
    rel: Option<(Var, Var)>,
    layout: &AttnLayout,
    heads: usize,
    probs: &[F],
) {
    let (_, d) = nodes[q.0].value.dims2();
    let (bsz, n) = (layout.batch, layout.tokens);
    let dh = d / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let qv = nodes[q.0].value.data();
    let kv = nodes[k.0].value.data();
    let vv = nodes[v.0].value.data();
    let (qr, kr) = match rel {
        Some((a, b)) => (Some(nodes[a.0].value.data()), Some(nodes[b.0].value.data())),
        None => (None, None),
    };

    let mut dq = vec![F::zero(); qv.len()];
    let mut dk = vec![F::zero(); kv.len()];
    let mut dv = vec![F::zero(); vv.len()];
    let (mut dqr, mut dkr) = match rel {
        Some((a, b)) => (
            vec![F::zero(); nodes[a.0].value.numel()],
            vec![F::zero(); nodes[b.0].value.numel()],
        ),
        None => (Vec::new(), Vec::new()),
    };
    let mut dp = vec![F::zero(); n];

    for b in 0..bsz {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let p = &probs[((b * heads + h) * n + i) * n..((b * heads + h) * n + i + 1) * n];
                let go = &g[(b * n + i) * d..(b * n + i + 1) * d];
                let mut dot = F::zero();
                for j in 0..n {
                    if !layout.allowed[layout.at(b, i, j)] {
                        continue;
                    }
                    let vj = (b * n + j) * d;
                    let mut s = F::zero();
                    for e in cols.clone() {
                        s += go[e] * vv[vj + e];
                        dv[vj + e] += p[j] * go[e];
                    }
                    dp[j] = s;
                    dot += p[j] * s;
                }
                let qi = (b * n + i) * d;
                for j in 0..n {
                    if !layout.allowed[layout.at(b, i, j)] {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let kj = (b * n + j) * d;
                    match (qr, kr) {
                        (Some(qr), Some(kr)) => {
                            let c = layout.relation.as_ref().unwrap()[layout.at(b, i, j)] as usize;
                            for e in cols.clone() {
                                let kk = kv[kj + e] + kr[c * d + e];
                                let qq = qv[qi + e] + qr[c * d + e];
                                dq[qi + e] += ds * kk;
                                dqr[c * d + e] += ds * kk;
                                dk[kj + e] += ds * qq;
                                dkr[c * d + e] += ds * qq;
                            }
                        }
                        _ => {
                            for e in cols.clone() {
                                dq[qi + e] += ds * kv[kj + e];
                                dk[kj + e] += ds * qv[qi + e];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut flush = |var: Var, src: Vec<F>| {
        if let Some(gv) = accum(nodes, grads, var) {
            gv.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    };
    flush(q, dq);
    flush(k, dk);
    flush(v, dv);
    if let Some((a, b)) = rel {
        flush(a, dqr);
        flush(b, dkr);
    }
}
