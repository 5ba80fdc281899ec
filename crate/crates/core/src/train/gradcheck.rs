//! Central-difference verification of analytic gradients.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Relative error bound.
    pub tolerance: f64,
    /// Entries with `|analytic|` below this are compared absolutely.
    pub small: f64,
    /// Absolute bound for small entries.
    pub abs_tolerance: f64,
    /// Tensors up to this size are checked in full.
    pub full_below: usize,
    /// Largest-|gradient| entries checked in bigger tensors.
    pub top: usize,
    /// Additional uniformly sampled entries in bigger tensors.
    pub random: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, small: 1e-8, abs_tolerance: 1e-7, full_below: 16, top: 4, random: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries compared absolutely, and the largest absolute error among them.
    pub small_checked: usize,
    pub max_small_abs_err: f64,
}

impl TensorReport {
    pub fn passed(&self, opts: &GradCheckOptions) -> bool {
        self.max_rel_err < opts.tolerance && self.max_small_abs_err < opts.abs_tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub loss: f64,
    pub evaluations: usize,
    /// Sorted by descending relative error.
    pub tensors: Vec<TensorReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_small_abs_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_small_abs_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, opts: &GradCheckOptions) -> bool {
        self.tensors.iter().all(|t| t.passed(opts))
    }
}

/// Builds a scalar loss from bound parameters.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var> + 'a;

fn evaluate(f: &LossFn<'_>, params: &ParamStore<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let l = f(&mut g, &b)?;
    let v = g.value(l);
    if v.rank() != 0 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {x}")));
    }
    Ok(x)
}

fn entries_to_check(grad: &[f64], opts: &GradCheckOptions, rng: &mut SplitMix64) -> Vec<usize> {
    let n = grad.len();
    if n <= opts.full_below {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..opts.top.min(n)].to_vec();
    for _ in 0..opts.random {
        picked.push(rng.below(n as u64) as usize);
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Compares analytic gradients of `f` with central differences.
///
/// The closure is evaluated twice at the base point first; differing
/// results are reported as [`Error::NonDeterministic`].
pub fn grad_check(f: &LossFn<'_>, params: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradReport> {
    let first = evaluate(f, params)?;
    let second = evaluate(f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let l = f(&mut g, &b)?;
    let grads = b.collect(&g.backward(l)?);
    drop(g);
    let mut rng = SplitMix64::new(opts.seed);
    let mut work = params.clone();
    let mut evaluations = 3;
    let mut tensors = Vec::new();
    for (name, an) in grads.iter() {
        let idx = entries_to_check(an.data(), opts, &mut rng);
        let mut rep = TensorReport {
            name: name.to_string(),
            checked: idx.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            small_checked: 0,
            max_small_abs_err: 0.0,
        };
        for i in idx {
            let x0 = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = x0 + opts.h;
            let plus = evaluate(f, &work)?;
            work.get_mut(name)?.data_mut()[i] = x0 - opts.h;
            let minus = evaluate(f, &work)?;
            work.get_mut(name)?.data_mut()[i] = x0;
            evaluations += 2;
            let num = (plus - minus) / (2.0 * opts.h);
            let a = an.data()[i];
            if a.abs() < opts.small {
                rep.small_checked += 1;
                rep.max_small_abs_err = rep.max_small_abs_err.max((a - num).abs());
                continue;
            }
            let err = (a - num).abs() / a.abs().max(num.abs());
            if err >= rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_index = i;
                rep.analytic = a;
                rep.numeric = num;
            }
        }
        tensors.push(rep);
    }
    tensors.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err).then_with(|| a.name.cmp(&b.name)));
    Ok(GradReport { loss: first, evaluations, tensors })
}
