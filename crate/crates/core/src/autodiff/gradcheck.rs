//! Central finite-difference gradient checking.
//!
//! The check only evaluates forward passes of the supplied closure, so it is
//! independent of the backward rules it validates. Non-scalar outputs are
//! reduced with a fixed random projection. Coordinates whose ±h perturbation
//! changes any branch decision (relu sign, max position, clamp) are skipped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared on an absolute scale.
    pub floor: f64,
    /// Coordinates probed per input tensor; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// (input, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

impl GradCheck {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.seed);

        let mut tape = Tape::with_branch_trace();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let projection: Option<Vec<f64>> = (tape.value(out).numel() > 1).then(|| {
            (0..tape.value(out).numel())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        });
        let loss = match &projection {
            Some(w) => tape.dot_const(out, w)?,
            None => out,
        };
        let base_trace = tape.branch_trace();
        let grads = tape.backward(loss)?;

        let eval = |perturbed: &[Tensor<f64>]| -> Result<(f64, Option<u64>)> {
            let mut tape = Tape::with_branch_trace();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.variable(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            let loss = match &projection {
                Some(w) => tape.dot_const(out, w)?,
                None => out,
            };
            Ok((tape.value(loss).item()?, tape.branch_trace()))
        };

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
            let n = input.numel();
            let coords: Vec<usize> = if n <= self.max_coords {
                (0..n).collect()
            } else {
                let mut c = sample(&mut rng, n, self.max_coords).into_vec();
                c.sort_unstable();
                c
            };
            let analytic = grads.get(*var);
            for j in coords {
                let original = input.data()[j];
                work[i].data_mut()[j] = original + self.step;
                let (plus, trace_plus) = eval(&work)?;
                work[i].data_mut()[j] = original - self.step;
                let (minus, trace_minus) = eval(&work)?;
                work[i].data_mut()[j] = original;
                if trace_plus != base_trace || trace_minus != base_trace {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic.map_or(0.0, |g| g.data()[j]);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(err);
                    if err >= report.max_rel_err {
                        report.worst = Some((i, j, a, numeric));
                    }
                }
            }
        }
        Ok(report)
    }
}

/// Tensor of standard-normal entries scaled by `scale`, for test inputs.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}
