//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Entries checked per tensor; larger tensors are subsampled.
    pub max_entries: usize,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_entries: 24,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude among checked entries.
    pub max_grad: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_err < tol)
    }

    pub fn failures(&self, tol: f64) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err >= tol)
            .collect()
    }

    /// Worst relative error per parameter group, where a group is the tensor
    /// name with its trailing component removed (`layers.0.attn.wq` ->
    /// `layers.0.attn`).
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for p in &self.params {
            let group = p
                .name
                .rsplit_once('.')
                .map(|(g, _)| g)
                .unwrap_or(&p.name)
                .to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, e)) => *e = e.max(p.max_rel_err),
                None => groups.push((group, p.max_rel_err)),
            }
        }
        groups
    }
}

/// Compares the tape gradient of `loss` with central differences for every
/// parameter in `store`. `loss` must be deterministic.
pub fn gradcheck<L>(
    store: &mut ParamStore<f64>,
    mut loss: L,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    L: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out, store)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, store)?;
        Ok(tape.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    for id in store.ids().collect::<Vec<_>>() {
        let numel = store.value(id).numel();
        let entries: Vec<usize> = if numel <= opts.max_entries {
            (0..numel).collect()
        } else {
            let mut picked = sample(&mut rng, numel, opts.max_entries).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: 0.0,
        };
        for j in entries {
            let analytic = store.grad(id)[j];
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + opts.step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - opts.step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(opts.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.max_grad = check.max_grad.max(analytic.abs());
        }
        report.params.push(check);
    }
    Ok(report)
}
