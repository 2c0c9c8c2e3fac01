//! Central finite-difference gradient checks in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::params::{Ctx, ForwardOptions, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences. With `samples = Some((k, seed))` only `k` randomly chosen
/// elements (over all inputs) are perturbed.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64, samples: Option<(usize, u64)>) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    contract!(loss.shape().numel() == 1, "gradient check needs a scalar function, got {}", loss.shape());
    tape.backward(&loss)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |k: usize, j: usize, delta: f64| -> Result<f64> {
        let t = Tape::inference();
        let mut perturbed = inputs.to_vec();
        perturbed[k].data_mut()[j] += delta;
        let vs: Vec<_> = perturbed.into_iter().map(|x| t.constant(x)).collect();
        Ok(f(&t, &vs)?.item())
    };

    let positions: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.numel()).map(move |j| (k, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match samples {
        Some((n, seed)) if n < positions.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, positions.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| positions[i]).collect()
        }
        _ => positions,
    };

    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst: None };
    for (k, j) in chosen {
        let numeric = (eval(k, j, step)? - eval(k, j, -step)?) / (2.0 * step);
        let analytic = grads[k].data()[j];
        let e = rel_err(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((k, j, analytic, numeric));
        }
    }
    Ok(report)
}

/// Like [`check`] but differentiates with respect to the trainable entries
/// of a parameter set bound through a [`Ctx`].
pub fn check_model<F>(
    params: &ModelParams<f64>,
    opts: ForwardOptions<f64>,
    f: F,
    step: f64,
    samples: Option<(usize, u64)>,
) -> Result<GradCheck>
where
    F: for<'t, 'p> Fn(&Ctx<'t, 'p, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params, opts);
    let loss = f(&ctx)?;
    contract!(loss.shape().numel() == 1, "gradient check needs a scalar function, got {}", loss.shape());
    tape.backward(&loss)?;
    let grads = ctx.gradients();
    drop(ctx);

    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    let positions: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .flat_map(|(k, n)| (0..params.get(n).map_or(0, Tensor::numel)).map(move |j| (k, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match samples {
        Some((n, seed)) if n < positions.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, positions.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| positions[i]).collect()
        }
        _ => positions,
    };

    let eval = |name: &str, j: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        if let Some(t) = p.get_mut(name) {
            t.data_mut()[j] += delta;
        }
        let t = Tape::inference();
        let ctx = Ctx::new(&t, &p, opts);
        Ok(f(&ctx)?.item())
    };

    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst: None };
    for (k, j) in chosen {
        let name = &names[k];
        let numeric = (eval(name, j, step)? - eval(name, j, -step)?) / (2.0 * step);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[j]);
        let e = rel_err(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((k, j, analytic, numeric));
        }
    }
    Ok(report)
}
