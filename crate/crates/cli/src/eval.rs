use anyhow::{bail, Context, Result};
use yldcvt::data::{read_dataset, read_params};
use yldcvt::model::{ParamStore, FULL_SEASON_INTERVALS};
use yldcvt::train::evaluate;

use crate::artifacts::{read_json, sidecar_path, CheckpointMeta};
use crate::EvalArgs;

pub fn run(args: &EvalArgs) -> Result<()> {
    let meta: CheckpointMeta = read_json(&sidecar_path(&args.checkpoint))?;
    let file = read_params(&args.checkpoint).with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let params = ParamStore::from_param_file(&file, &meta.model)?;

    let mut ds = read_dataset(&args.data).with_context(|| format!("reading dataset {}", args.data.display()))?;
    if meta.in_year && ds.intervals == FULL_SEASON_INTERVALS {
        ds = ds.truncate_in_year()?;
    }
    let samples = ds.samples.iter().filter(|s| s.year == args.test_year).cloned().collect::<Vec<_>>();
    if samples.is_empty() {
        bail!("year {} has no samples; available years: {:?}", args.test_year, ds.years());
    }
    let n = samples.len();
    let test = yldcvt::data::Dataset { samples, ..ds };
    let m = evaluate(&params, &meta.model, &test, &meta.scaler)?;

    println!(
        "{} checkpoint (test year {}, run {}) on year {}: {n} samples",
        meta.preset.display_name(),
        meta.year,
        meta.run,
        args.test_year
    );
    println!("mse {:.6} rmse {:.6} r2 {:.6}", m.mse, m.rmse, m.r2);
    let csv = format!("year,samples,mse,rmse,r2\n{},{n},{:?},{:?},{:?}\n", args.test_year, m.mse, m.rmse, m.r2);
    print!("{csv}");
    if let Some(path) = &args.csv {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
