//! Finite-difference verification of the full model's parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, init_params, param_specs, BoundParams, Mode, ModelConfig, ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};

/// Settings for [`check_model_gradients`].
#[derive(Debug, Clone)]
pub struct ModelCheckOptions {
    pub seed: u64,
    /// Scale of the uniform noise added to every initialized parameter. At 1.0
    /// weights get `±sqrt(3 / fan_in)`, so pre-activations have unit variance
    /// throughout; other parameters get `±0.3`. Freshly initialized weights sit
    /// at a near-degenerate point (almost uniform attention) where many
    /// gradients are below finite-difference resolution.
    pub perturbation: f64,
    pub eps: f64,
    pub tolerance: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub max_entries_per_param: Option<usize>,
    /// Negative-control hook, see [`GradCheckOptions::analytic_scale`].
    pub analytic_scale: f64,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            perturbation: 1.0,
            eps: 1e-4,
            tolerance: 1e-4,
            max_entries_per_param: Some(128),
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub checked_entries: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct ModelCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub loss: f64,
}

impl ModelCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    /// Maximum error per parameter group, i.e. per name with the block index
    /// folded (`stage3.block*.mlp.fc1.weight`).
    pub fn groups(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for p in &self.params {
            let key = group_key(&p.name);
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, e)) => *e = e.max(p.max_relative_error),
                None => out.push((key, p.max_relative_error)),
            }
        }
        out
    }
}

fn group_key(name: &str) -> String {
    name.split('.')
        .map(|part| {
            if part.starts_with("block") {
                "block*"
            } else {
                part
            }
        })
        .collect::<Vec<_>>()
        .join(".")
}

/// Inputs feeding one output unit: trailing extents for convolution kernels
/// `[out, in, k, k]`, leading extent for linear weights `[in, out]`.
fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.ends_with("conv.weight") || name.ends_with("dw.weight") {
        shape[1..].iter().product()
    } else {
        shape[0]
    }
}

/// Random parameter point and input sample used by the check.
pub fn check_point(cfg: &ModelConfig, opts: &ModelCheckOptions) -> Result<(ParamStore<f64>, Tensor<f64>, f64)> {
    let mut store = init_params::<f64>(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_C4EC);
    for spec in param_specs(cfg).iter().filter(|s| s.kind.trainable()) {
        let half = match spec.kind {
            ParamKind::Weight => opts.perturbation * (3.0 / fan_in(&spec.name, &spec.shape) as f64).sqrt(),
            _ => opts.perturbation * 0.3,
        };
        let t = store.get_mut(&spec.name).expect("store built from the same specs");
        for v in t.data_mut() {
            *v += rng.gen_range(-half..=half);
        }
    }
    let shape = vec![1, cfg.input_channels, cfg.input_height, cfg.input_width];
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen::<f64>()).collect();
    let target = rng.gen_range(-1.0..1.0);
    Ok((store, Tensor::new(shape, data)?, target))
}

/// Compares reverse-mode gradients of the MSE loss on one random sample
/// against central differences, for every parameter tensor.
pub fn check_model_gradients(cfg: &ModelConfig, opts: &ModelCheckOptions) -> Result<ModelCheckReport> {
    let (store, x, target) = check_point(cfg, opts)?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let loss_fn = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let xv = g.constant(x.clone());
        let out = forward(g, xv, cfg, &store, &bound, Mode::Train)?;
        let t = g.constant(Tensor::new(vec![1, 1], vec![target])?);
        g.mse_loss(out.prediction, t)
    };
    let loss = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss_fn(&mut g, &vars)?;
        g.value(l)[0]
    };
    let gc = GradCheckOptions {
        eps: opts.eps,
        tolerance: opts.tolerance,
        max_entries_per_input: opts.max_entries_per_param,
        seed: opts.seed,
        analytic_scale: opts.analytic_scale,
    };
    let report: GradCheckReport = grad_check(loss_fn, &inputs, &gc)?;
    let params = report
        .inputs
        .iter()
        .map(|c| ParamCheck {
            name: names[c.input].clone(),
            numel: inputs[c.input].numel(),
            checked_entries: c.checked_entries,
            max_relative_error: c.max_relative_error,
        })
        .collect();
    Ok(ModelCheckReport {
        params,
        max_relative_error: report.max_relative_error,
        tolerance: report.tolerance,
        loss,
    })
}
