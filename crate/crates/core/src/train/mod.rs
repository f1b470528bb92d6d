//! MSE training with best-on-validation selection, evaluation, and
//! multi-year experiments.

mod experiment;
mod metrics;
mod optim;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use experiment::{
    derive_seed, render_markdown, run_experiment, CellOutcome, CellResult, ExperimentReport, YearSummary, SEED_INIT,
    SEED_SHUFFLE, SEED_SPLIT,
};
pub use metrics::Metrics;
pub use optim::{adam_step, AdamConfig, AdamState};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, init_params, predict, update_running_stats, Mode, ModelConfig, ModelPreset, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 0.00025;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_RUNS: usize = 4;
const EVAL_BATCH: usize = 64;

/// Arithmetic used for training steps. Evaluation always runs at 64 bits on
/// parameters rounded to their 32-bit storage values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub runs: usize,
    pub val_fraction: f64,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn for_preset(preset: ModelPreset) -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: preset.default_epochs(),
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            adam: AdamConfig::default(),
            runs: DEFAULT_RUNS,
            val_fraction: crate::data::SplitSpec::DEFAULT_VAL_FRACTION,
            precision: Precision::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.runs == 0 || self.batch_size == 0 {
            return bad("epochs, runs and batch_size must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Affine map between yields and the standardized units the network is
/// trained in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    /// Mean and population standard deviation of `targets`; a zero spread
    /// falls back to 1.
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a scaler to no targets".into()));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn scale(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn unscale(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch, in (bu/ac)².
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_train_mse: f64,
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl History {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_mse
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, at storage precision.
    pub best: ParamStore<f64>,
    /// Parameters after the final epoch, at storage precision.
    pub last: ParamStore<f64>,
    pub scaler: TargetScaler,
    pub history: History,
}

/// Model predictions for every sample of `ds`, in yield units.
pub fn predict_dataset(params: &ParamStore<f64>, cfg: &ModelConfig, ds: &Dataset, scaler: &TargetScaler) -> Result<Vec<f64>> {
    check_shape(cfg, ds)?;
    let mut out = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = ds.batch::<f64>(chunk)?;
        out.extend(predict(cfg, params, batch)?.into_iter().map(|z| scaler.unscale(z)));
    }
    Ok(out)
}

/// MSE, RMSE and R² of the model on `ds`.
pub fn evaluate(params: &ParamStore<f64>, cfg: &ModelConfig, ds: &Dataset, scaler: &TargetScaler) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict_dataset(params, cfg, ds, scaler)?;
    Metrics::from_predictions(&preds, &ds.targets())
}

/// Predicts the mean training yield for every test sample.
pub fn baseline_mean(train_ds: &Dataset, test_ds: &Dataset) -> Result<Metrics> {
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::InvalidArgument("baseline needs non-empty train and test sets".into()));
    }
    let t = train_ds.targets();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    Metrics::from_predictions(&vec![mean; test_ds.len()], &test_ds.targets())
}

fn mse(params: &ParamStore<f64>, cfg: &ModelConfig, ds: &Dataset, scaler: &TargetScaler) -> Result<f64> {
    let preds = predict_dataset(params, cfg, ds, scaler)?;
    let t = ds.targets();
    Ok(preds.iter().zip(&t).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / t.len() as f64)
}

fn check_shape(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let model = [cfg.input_channels, cfg.input_height, cfg.input_width];
    let data = [ds.bands, ds.bins, ds.intervals];
    if model != data {
        return Err(Error::Shape(format!(
            "dataset grids are {data:?} (bands, bins, intervals) but the model expects {model:?}"
        )));
    }
    Ok(())
}

/// Minibatch Adam on the MSE of standardized targets. After every epoch the
/// validation MSE is measured and the parameters of the best epoch so far
/// are kept. Initialization uses `cfg.seed`; shuffling uses `shuffle_seed`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    shuffle_seed: u64,
) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_with::<f32>(model_cfg, cfg, train_ds, val_ds, shuffle_seed),
        Precision::F64 => train_with::<f64>(model_cfg, cfg, train_ds, val_ds, shuffle_seed),
    }
}

fn train_with<S: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    shuffle_seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training needs non-empty train and validation sets, got {} and {}",
            train_ds.len(),
            val_ds.len()
        )));
    }
    check_shape(model_cfg, train_ds)?;
    check_shape(model_cfg, val_ds)?;

    let targets = train_ds.targets();
    let scaler = TargetScaler::fit(&targets)?;
    let scaled: Vec<S> = targets.iter().map(|&y| S::lit(scaler.scale(y))).collect();
    let mut store = init_params::<S>(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let unit = S::lit(scaler.std * scaler.std);

    let storage = |s: &ParamStore<S>| s.cast::<f32>().cast::<f64>();
    let initial = storage(&store);
    let initial_train_mse = mse(&initial, model_cfg, train_ds, &scaler)?;
    let initial_val_mse = mse(&initial, model_cfg, val_ds, &scaler)?;

    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<f64>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let nonfinite = |detail: String| Error::NonFiniteLoss {
                epoch,
                batch: b + 1,
                detail,
            };
            let mut g = Graph::<S>::new();
            let vars = store.bind(&mut g, true);
            let x = g.constant(train_ds.batch::<S>(idx)?);
            let y = g.constant(Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| scaled[i]).collect())?);
            let step = forward(&mut g, x, model_cfg, &store, &vars, Mode::Train)
                .and_then(|out| Ok((g.mse_loss(out.prediction, y)?, out.batch_stats)));
            let (loss, stats) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(op)) => return Err(nonfinite(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(nonfinite(format!("loss is {value}")));
            }
            loss_sum += (value * unit).as_f64() * idx.len() as f64;
            g.backward(loss)?;
            let grads: IndexMap<String, Vec<S>> = vars
                .iter()
                .filter_map(|(name, v)| g.take_grad(v).map(|gr| (name.to_string(), gr)))
                .collect();
            if let Some((name, _)) = grads.iter().find(|(_, gr)| gr.iter().any(|v| !v.is_finite())) {
                return Err(nonfinite(format!("non-finite gradient for {name}")));
            }
            adam_step(&mut store, &grads, &mut adam, cfg.learning_rate, &cfg.adam)?;
            update_running_stats(&mut store, &stats)?;
        }
        let snapshot = storage(&store);
        let val_mse = mse(&snapshot, model_cfg, val_ds, &scaler)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_ds.len() as f64,
            val_mse,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_mse < *v) {
            best = Some((epoch, val_mse, snapshot));
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_params,
        last: storage(&store),
        scaler,
        history: History {
            initial_train_mse,
            initial_val_mse,
            epochs,
            best_epoch,
        },
    })
}
