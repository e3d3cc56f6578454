//! Central finite-difference gradient checking in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates probed per input (all of them if the input is smaller).
    pub samples_per_input: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { step: 1e-5, samples_per_input: 10, floor: 1e-5, tolerance: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<40} max rel err {:.3e} (tol {:.0e}, {} coords)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.checked
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalarize<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let v = out.value();
    if v.is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = out.tape().constant(Tensor::new(v.shape(), w)?);
    out.mul(w)?.sum()
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], seed: u64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    tape.set_check_finite(false);
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = scalarize(f(&tape, &vars)?, seed)?;
    let v = out.value().data()[0];
    Ok(v)
}

/// Compare tape gradients of `f` against central differences. Non-scalar
/// outputs are reduced with a fixed random projection. Only inputs flagged in
/// `differentiable` are checked.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    f: F,
    opts: FdOptions,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if differentiable.len() != inputs.len() {
        return Err(Error::Shape("one differentiable flag per input required".into()));
    }
    let tape = Tape::new();
    tape.set_check_finite(false);
    let vars: Vec<Var<f64>> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| if d { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let loss = scalarize(f(&tape, &vars)?, opts.seed)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        if !differentiable[k] {
            continue;
        }
        let grad = tape.grad(*var).expect("leaf gradient");
        let n = inputs[k].len();
        let coords: Vec<usize> = if n <= opts.samples_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.samples_per_input).into_vec()
        };
        for c in coords {
            let x0 = inputs[k].data()[c];
            probe[k].data_mut()[c] = x0 + opts.step;
            let fp = evaluate(&f, &probe, opts.seed)?;
            probe[k].data_mut()[c] = x0 - opts.step;
            let fm = evaluate(&f, &probe, opts.seed)?;
            probe[k].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            worst = worst.max(relative_error(grad.data()[c], numeric, opts.floor));
            checked += 1;
        }
    }
    Ok(GradCheck { name: name.to_string(), max_rel_err: worst, checked, tolerance: opts.tolerance })
}
