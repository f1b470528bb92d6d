use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use yldcvt::data::{read_dataset, write_params};
use yldcvt::model::{param_count, ModelConfig};
use yldcvt::train::{derive_seed, run_experiment, CellOutcome, TrainConfig, SEED_INIT, SEED_SHUFFLE, SEED_SPLIT};

use crate::artifacts::{
    checkpoint_path, read_json, sha256_file, sidecar_path, write_json, CellSeeds, CheckpointMeta, DatasetRef, RunManifest,
};
use crate::{TrainArgs, UsageError, BUILD_ID};

struct Plan {
    manifest: RunManifest,
    data: PathBuf,
}

fn plan_from_flags(args: &TrainArgs) -> Result<Plan> {
    let (Some(preset), Some(data)) = (args.model, args.data.clone()) else {
        return Err(UsageError("--model and --data are required without --manifest".into()).into());
    };
    let intervals = if args.in_year {
        yldcvt::model::IN_YEAR_INTERVALS
    } else {
        yldcvt::model::FULL_SEASON_INTERVALS
    };
    let mut model = ModelConfig::preset(preset, intervals);
    if let Some(s) = args.kv_stride {
        model = model.with_kv_stride(usize::from(s));
    }
    let mut train = TrainConfig::for_preset(preset);
    if let Some(v) = args.epochs {
        train.epochs = v as usize;
    }
    if let Some(v) = args.lr {
        train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v as usize;
    }
    if let Some(v) = args.precision {
        train.precision = v;
    }
    if let Some(v) = args.runs {
        train.runs = v as usize;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    train.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut test_years = args.test_years.clone();
    test_years.dedup();
    let cells = test_years
        .iter()
        .flat_map(|&year| (0..train.runs).map(move |run| (year, run)))
        .map(|(year, run)| CellSeeds {
            year,
            run,
            split: derive_seed(train.seed, year, run, SEED_SPLIT),
            init: derive_seed(train.seed, year, run, SEED_INIT),
            shuffle: derive_seed(train.seed, year, run, SEED_SHUFFLE),
        })
        .collect();
    let manifest = RunManifest {
        preset,
        param_count: param_count(&model),
        model,
        seed: train.seed,
        train,
        in_year: args.in_year,
        test_years,
        dataset: DatasetRef {
            path: data.clone(),
            sha256: String::new(),
            samples: 0,
        },
        cells,
        build: BUILD_ID.to_string(),
        duration_secs: 0.0,
    };
    Ok(Plan { manifest, data })
}

fn plan_from_manifest(path: &Path, data: Option<&PathBuf>) -> Result<Plan> {
    let mut manifest: RunManifest = read_json(path)?;
    let data = data.cloned().unwrap_or_else(|| manifest.dataset.path.clone());
    let digest = sha256_file(&data)?;
    if digest != manifest.dataset.sha256 {
        bail!(
            "dataset {} has sha256 {digest}, manifest {} recorded {}",
            data.display(),
            path.display(),
            manifest.dataset.sha256
        );
    }
    manifest.build = BUILD_ID.to_string();
    Ok(Plan { manifest, data })
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let Plan { mut manifest, data } = match &args.manifest {
        Some(path) => plan_from_manifest(path, args.data.as_ref())?,
        None => plan_from_flags(args)?,
    };
    manifest.model.validate().map_err(|e| UsageError(e.to_string()))?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&manifest)?);
        return Ok(());
    }

    let mut ds = read_dataset(&data).with_context(|| format!("reading dataset {}", data.display()))?;
    manifest.dataset.sha256 = sha256_file(&data)?;
    manifest.dataset.samples = ds.len();
    if manifest.in_year {
        ds = ds.truncate_in_year()?;
    }

    let ckpt_dir = args.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;

    let m = &manifest;
    let save = |cell: CellOutcome<'_>| -> Result<()> {
        let r = cell.result;
        let path = checkpoint_path(&ckpt_dir, r.year, r.run);
        write_params(&cell.training.best.to_param_file(&m.model), &path)?;
        let meta = CheckpointMeta {
            preset: m.preset,
            model: m.model.clone(),
            in_year: m.in_year,
            year: r.year,
            run: r.run,
            scaler: cell.training.scaler,
            seeds: CellSeeds {
                year: r.year,
                run: r.run,
                split: r.split_seed,
                init: r.init_seed,
                shuffle: r.shuffle_seed,
            },
            best_epoch: r.best_epoch,
            test_metrics: r.metrics,
            history: cell.training.history.clone(),
            build: m.build.clone(),
        };
        write_json(&sidecar_path(&path), &meta)?;
        eprintln!(
            "year {} run {}: rmse {:.4} r2 {:.4} (baseline rmse {:.4} r2 {:.4}), best epoch {}",
            r.year, r.run, r.metrics.rmse, r.metrics.r2, r.baseline.rmse, r.baseline.r2, r.best_epoch
        );
        Ok(())
    };
    let label = m.preset.display_name();
    let report = run_experiment(label, &m.model, &m.train, &ds, &m.test_years, |cell| {
        save(cell).map_err(|e| yldcvt::Error::Io(std::io::Error::other(format!("{e:#}"))))
    })?;

    let out = &args.out_dir;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.md"), report.to_markdown())?;
    fs::write(out.join("runs.csv"), report.runs_csv())?;
    manifest.duration_secs = started.elapsed().as_secs_f64();
    write_json(&out.join("manifest.json"), &manifest)?;
    print!("{}", report.to_markdown());
    println!("wrote report.csv, report.md, runs.csv, manifest.json and {} checkpoints to {}", report.cells.len(), out.display());
    Ok(())
}
