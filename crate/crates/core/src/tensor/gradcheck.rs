//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step, within `[1e-6, 1e-4]`.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Check at most this many entries per input (drawn with `seed`);
    /// `None` checks every entry.
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Anything other than
    /// 1.0 is a negative control.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tolerance: 1e-4,
            max_entries_per_input: None,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    pub checked_entries: usize,
    pub max_relative_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&InputCheck> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of the scalar function `f` with central
/// differences `(f(x+eps) − f(x−eps)) / 2eps`, entry by entry, for every
/// input tensor.
///
/// `f` receives one graph variable per input, in order. Finite-difference
/// evaluations run in parallel but results are gathered in a fixed order, so
/// the report is deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference eps {} outside [1e-6, 1e-4]",
            opts.eps
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.iter().map(|x| x * opts.analytic_scale).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(g);

    let mut tasks = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        match opts.max_entries_per_input {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                tasks.extend(picked.into_iter().map(|j| (i, j)));
            }
            _ => tasks.extend((0..n).map(|j| (i, j))),
        }
    }

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out);
        if value.len() != 1 {
            return Err(Error::NonScalarOutput(g.shape(out).to_vec()));
        }
        Ok(value[0])
    };

    let numeric: Vec<f64> = tasks
        .par_iter()
        .map(|&(i, j)| {
            let mut work = inputs.to_vec();
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + opts.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - opts.eps;
            let minus = eval(&work)?;
            Ok((plus - minus) / (2.0 * opts.eps))
        })
        .collect::<Result<_>>()?;

    let mut per_input: Vec<InputCheck> = (0..inputs.len())
        .map(|input| InputCheck {
            input,
            checked_entries: 0,
            max_relative_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    for (&(i, j), &num) in tasks.iter().zip(&numeric) {
        let ana = analytic[i][j];
        let err = relative_error(ana, num);
        let rec = &mut per_input[i];
        rec.checked_entries += 1;
        if err > rec.max_relative_error || rec.checked_entries == 1 {
            rec.max_relative_error = err;
            rec.worst_entry = j;
            rec.analytic = ana;
            rec.numeric = num;
        }
    }
    let max_relative_error = per_input
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        tolerance: opts.tolerance,
        inputs: per_input,
    })
}
