//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it shares nothing with
//! the backward rules it is checking.

use rand::seq::index::sample;
use rand::Rng as _;

use super::dense::Tensor;
use super::params::{ParamId, ParamStore, Session};
use super::tape::{Mode, Var};
use super::{seeded_rng, Rng};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub mode: Mode,
    /// Seed handed to every forward pass, so stochastic ops repeat exactly.
    pub forward_seed: u64,
    /// Check at most this many coordinates per parameter (sampled), or all.
    pub max_coords_per_param: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            mode: Mode::Train,
            forward_seed: 0,
            max_coords_per_param: None,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `forward`'s scalar output with
/// respect to every parameter in `store` against central differences.
pub fn check_gradients<F>(store: &ParamStore, mut forward: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    let mut rng = seeded_rng(opts.forward_seed);
    let mut session = Session::new(store, opts.mode, &mut rng);
    let loss = forward(&mut session)?;
    let grads = session.tape.backward(loss)?;
    let analytic = session.param_grads(&grads);
    drop(session);

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut rng = seeded_rng(opts.forward_seed);
        let mut session = Session::new(s, opts.mode, &mut rng);
        let loss = forward(&mut session)?;
        Ok(session.tape.value(loss).item())
    };

    let mut picker = seeded_rng(opts.forward_seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut probe = store.clone();
    for (pid, grad) in store.param_ids().zip(analytic) {
        let numel = store.param(pid).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < numel => {
                let mut c = sample(&mut picker, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        for i in coords {
            let original = store.param(pid).data()[i];
            probe.param_mut(pid).data_mut()[i] = original + opts.step;
            let plus = eval(&probe)?;
            probe.param_mut(pid).data_mut()[i] = original - opts.step;
            let minus = eval(&probe)?;
            probe.param_mut(pid).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric, opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((store.param_name(pid).to_string(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[-1, 1)`.
pub fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct sensitivity.
pub fn weighted_sum(s: &mut Session, out: Var, seed: u64) -> Result<Var> {
    let mut rng = seeded_rng(seed);
    let w = uniform(s.tape.shape(out), &mut rng);
    let w = s.input(w);
    let prod = s.tape.mul(out, w)?;
    s.tape.sum(prod)
}

/// Store holding `tensors` as parameters named `in0`, `in1`, ...
pub fn store_of(tensors: Vec<Tensor>) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add_param(format!("in{i}"), t))
        .collect();
    (store, ids)
}
