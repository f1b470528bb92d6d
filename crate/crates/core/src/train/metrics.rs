use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression errors in target units: `mse` in (bu/ac)², `rmse` in bu/ac.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: f64,
    pub r2: f64,
}

impl Metrics {
    /// `r2 = 1 − SS_res / SS_tot`, with `SS_tot` taken about the mean of
    /// `targets`.
    pub fn from_predictions(predictions: &[f64], targets: &[f64]) -> Result<Self> {
        if predictions.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} targets",
                predictions.len(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
        if ss_tot == 0.0 {
            return Err(Error::DegenerateTargets);
        }
        let ss_res: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
        let mse = ss_res / n;
        Ok(Self {
            mse,
            rmse: mse.sqrt(),
            r2: 1.0 - ss_res / ss_tot,
        })
    }
}
