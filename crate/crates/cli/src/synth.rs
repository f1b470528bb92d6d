use anyhow::{Context, Result};
use yldcvt::data::{generate_synthetic, reference_moments, write_dataset, GeneratorParams};

use crate::{SynthArgs, UsageError};

pub fn run(args: &SynthArgs) -> Result<()> {
    let mut params = match &args.params {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing generator parameters in {}", path.display()))?
        }
        None => GeneratorParams::default(),
    };
    if let Some(s) = args.sigma_noise {
        params.sigma_noise = s;
    }
    if let Some((a, b)) = args.years {
        params.year_start = a;
        params.year_end = b;
    }
    params.validate().map_err(|e| UsageError(e.to_string()))?;
    let n = usize::try_from(args.n).map_err(|_| UsageError(format!("--n {} is too large", args.n)))?;

    let ds = generate_synthetic(n, args.seed, &params)?;
    write_dataset(&ds, &args.out).with_context(|| format!("writing {}", args.out.display()))?;

    let y = ds.targets();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let std = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64).sqrt();
    let (min, max) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (f_mean, f_std) = reference_moments(&params)?;
    println!("wrote {} samples to {}", ds.len(), args.out.display());
    println!(
        "grid {}x{}x{}, years {}-{}, sigma_noise {}",
        ds.bands, ds.bins, ds.intervals, params.year_start, params.year_end, params.sigma_noise
    );
    println!("yield mean {mean:.4} std {std:.4} min {min:.4} max {max:.4}");
    println!("signal reference mean {f_mean:.6} std {f_std:.6}");
    Ok(())
}
