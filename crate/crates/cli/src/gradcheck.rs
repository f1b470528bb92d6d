use anyhow::Result;
use yldcvt::model::{check_model_gradients, ModelCheckOptions, ModelConfig, FULL_SEASON_INTERVALS};

use crate::{CheckFailed, GradcheckArgs, UsageError};

pub fn run(args: &GradcheckArgs) -> Result<()> {
    if !(args.tolerance > 0.0) {
        return Err(UsageError(format!("--tolerance must be positive, got {}", args.tolerance)).into());
    }
    let cfg = ModelConfig::preset(args.model, FULL_SEASON_INTERVALS);
    let opts = ModelCheckOptions {
        seed: args.seed,
        tolerance: args.tolerance,
        max_entries_per_param: (args.max_entries > 0).then_some(args.max_entries),
        analytic_scale: args.corrupt_gradient.unwrap_or(1.0),
        ..ModelCheckOptions::default()
    };
    let report = check_model_gradients(&cfg, &opts)?;
    let checked: usize = report.params.iter().map(|p| p.checked_entries).sum();
    println!(
        "{}: {} tensors, {checked} entries checked, loss {:.6e}",
        args.model.display_name(),
        report.params.len(),
        report.loss
    );
    for (group, err) in report.groups() {
        println!("{group:<40} {err:.3e}");
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_relative_error, report.tolerance);
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        let worst = report.worst().expect("a failing report has entries");
        println!("FAIL: worst offender {} ({:.3e})", worst.name, worst.max_relative_error);
        Err(CheckFailed.into())
    }
}
