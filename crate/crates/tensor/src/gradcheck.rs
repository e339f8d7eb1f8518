//! Central finite-difference checks for tape-built functions.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖g_ad − g_fd‖ / ‖g_fd‖` over all checked entries.
    pub relative_error: f64,
    /// Largest per-entry `|a − b| / max(|a|, |b|, floor)` with
    /// `floor = 1e-6 · max|g_fd|`.
    pub max_entry_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error <= tol && self.max_entry_error <= tol
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::inference();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    f(&tape, &vars)?.value().item()
}

/// Analytic gradients of the scalar `f` at `inputs`.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect())
}

fn summarize(pairs: &[(f64, f64)]) -> GradCheck {
    let fd_max = pairs.iter().fold(0.0f64, |m, &(_, b)| m.max(b.abs()));
    let floor = (1e-6 * fd_max).max(1e-300);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut worst = 0.0f64;
    for &(a, b) in pairs {
        num += (a - b) * (a - b);
        den += b * b;
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(floor));
    }
    GradCheck {
        relative_error: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
        max_entry_error: worst,
        checked: pairs.len(),
    }
}

/// Checks every entry of every input; use for small problems.
pub fn check_full<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let ad = analytic_gradients(&f, inputs)?;
    let mut pairs = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, g) in ad.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[j] = orig;
            pairs.push((g.data()[j], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(summarize(&pairs))
}

/// Checks directional derivatives along the given directions (one entry per
/// input per direction): `⟨∇f, d⟩` against `(f(x + h·d) − f(x − h·d)) / 2h`.
pub fn check_directional<F>(f: F, inputs: &[Tensor], directions: &[Vec<Tensor>], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let ad = analytic_gradients(&f, inputs)?;
    let mut pairs = Vec::new();
    for dir in directions {
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let mut lin = 0.0;
        for i in 0..inputs.len() {
            plus[i].axpy(h, &dir[i])?;
            minus[i].axpy(-h, &dir[i])?;
            lin += ad[i].dot(&dir[i])?;
        }
        let fd = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * h);
        pairs.push((lin, fd));
    }
    Ok(summarize(&pairs))
}

/// Directional check with respect to named parameters. `f` binds its
/// parameters from the store via [`Tape::param`]; each direction holds a
/// subset of the store's names (missing names are held fixed).
pub fn check_params<F>(f: F, store: &ParamStore, directions: &[ParamStore], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;
    let ad: Vec<(String, Tensor)> = tape.param_grads(&grads);
    let eval_at = |s: &ParamStore| -> Result<f64> {
        let t = Tape::inference();
        f(&t, s)?.value().item()
    };
    let mut pairs = Vec::new();
    for dir in directions {
        let mut plus = store.clone();
        let mut minus = store.clone();
        let mut lin = 0.0;
        for (name, d) in dir.iter() {
            plus.get_mut(name)?.axpy(h, d)?;
            minus.get_mut(name)?.axpy(-h, d)?;
            if let Some((_, g)) = ad.iter().find(|(n, _)| n == name) {
                lin += g.dot(d)?;
            }
        }
        pairs.push((lin, (eval_at(&plus)? - eval_at(&minus)?) / (2.0 * h)));
    }
    Ok(summarize(&pairs))
}

/// Unit-variance random direction over the parameters accepted by `keep`.
pub fn random_direction<R: rand::Rng + ?Sized>(store: &ParamStore, keep: impl Fn(&str) -> bool, rng: &mut R) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if keep(name) {
            out.insert(name, Tensor::randn(t.shape().to_vec(), 1.0, rng));
        }
    }
    out
}
