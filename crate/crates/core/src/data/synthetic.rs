//! Seeded stand-in for real county histograms with a known yield signal.
//!
//! Each sample draws a latent vigor `v` (stratified over the dataset, so the
//! sample moments track the reference closely) and a per-band shift of the
//! seasonal peak. Column `(b, t)` is a Gaussian bump over the bins centred at
//!
//! `base_b + rise_b · (1 + vigor_gain · v) · exp(−(t − peak_b − shift_b)² / 2·season_width²) + jitter`
//!
//! normalized to sum to one. The yield is
//!
//! `yield_mean + yield_std · (sqrt(1 − σ_n²) · z + σ_n · ε)`, `ε ~ N(0, 1)`,
//!
//! where `z` standardizes [`signal_functional`] of the stored grid with
//! moments taken from a fixed reference draw. With `σ_n = 0` the yield is an
//! exact function of the grid.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Dataset, HistogramSample, Provenance};
use crate::error::{Error, Result};
use crate::model::{FULL_SEASON_INTERVALS, HISTOGRAM_BANDS, HISTOGRAM_BINS};
use crate::tensor::Tensor;

const REFERENCE_SEED: u64 = 0x00C0_FFEE;
const REFERENCE_SIZE: usize = 2048;
const BACKGROUND: f64 = 1e-3;
const MIN_YIELD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    /// Noise share of the target standard deviation.
    pub sigma_noise: f64,
    pub year_start: i32,
    pub year_end: i32,
    pub yield_mean: f64,
    pub yield_std: f64,
    /// Relative change of the seasonal rise per unit of vigor.
    pub vigor_gain: f64,
    /// Standard deviation of the per-band peak shift, in intervals.
    pub peak_shift_std: f64,
    /// Width of the seasonal profile, in intervals.
    pub season_width: f64,
    /// Width of each histogram bump, in bins.
    pub bump_width: f64,
    /// Standard deviation of per-column centre noise, in bins.
    pub center_jitter: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            sigma_noise: 0.2,
            year_start: 2003,
            year_end: 2021,
            yield_mean: 45.26,
            yield_std: 10.80,
            vigor_gain: 0.3,
            peak_shift_std: 2.0,
            season_width: 7.0,
            bump_width: 2.5,
            center_jitter: 0.5,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.sigma_noise) {
            return bad("sigma_noise must lie in [0, 1]");
        }
        if self.year_end < self.year_start {
            return bad("year range is empty");
        }
        if !(self.yield_std > 0.0) || !self.yield_mean.is_finite() {
            return bad("yield_std must be positive and yield_mean finite");
        }
        if !(self.season_width > 0.0 && self.bump_width > 0.0) {
            return bad("season_width and bump_width must be positive");
        }
        if !(self.vigor_gain >= 0.0 && self.peak_shift_std >= 0.0 && self.center_jitter >= 0.0) {
            return bad("vigor_gain, peak_shift_std and center_jitter must be non-negative");
        }
        Ok(())
    }

    pub fn years(&self) -> Vec<i32> {
        (self.year_start..=self.year_end).collect()
    }
}

fn band_base(b: usize) -> f64 {
    5.0 + (b % 3) as f64
}

fn band_rise(b: usize) -> f64 {
    10.0 + (b % 4) as f64
}

fn band_peak(b: usize) -> f64 {
    13.0 + 2.0 * (b % 4) as f64
}

fn band_weight(b: usize) -> f64 {
    1.0 + 0.5 * (b as f64).cos()
}

/// Weighted band-mean trajectory: `Σ_b w_b · mean_t(Σ_k k·h[b, k, t])`, the
/// average expected bin index of each band, weighted per band.
pub fn signal_functional(grid: &Tensor<f32>) -> f64 {
    let &[bands, bins, t] = grid.shape() else {
        return f64::NAN;
    };
    let d = grid.data();
    let mut total = 0.0;
    for b in 0..bands {
        let mut acc = 0.0;
        for k in 0..bins {
            let row = &d[(b * bins + k) * t..(b * bins + k + 1) * t];
            acc += k as f64 * row.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        total += band_weight(b) * acc / t as f64;
    }
    total
}

/// Stratified standard-normal vigor values in random order.
fn stratified_normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    strata
        .into_iter()
        .map(|s| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            normal.inverse_cdf((s as f64 + u) / n as f64)
        })
        .collect()
}

fn draw_grid(v: f64, p: &GeneratorParams, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let (bands, bins, t) = (HISTOGRAM_BANDS, HISTOGRAM_BINS, FULL_SEASON_INTERVALS);
    let mut grid = vec![0.0f32; bands * bins * t];
    let mut col = vec![0.0f64; bins];
    for b in 0..bands {
        let shift = p.peak_shift_std * rng.sample::<f64, _>(StandardNormal);
        let rise = band_rise(b) * (1.0 + p.vigor_gain * v);
        let width = p.bump_width * (1.0 + 0.2 * (b % 3) as f64);
        for ti in 0..t {
            let phase = (ti as f64 - band_peak(b) - shift) / p.season_width;
            let jitter = p.center_jitter * rng.sample::<f64, _>(StandardNormal);
            let center = band_base(b) + rise * (-0.5 * phase * phase).exp() + jitter;
            let mut sum = 0.0;
            for (k, c) in col.iter_mut().enumerate() {
                let z = (k as f64 - center) / width;
                *c = (-0.5 * z * z).exp() + BACKGROUND;
                sum += *c;
            }
            for (k, c) in col.iter().enumerate() {
                grid[(b * bins + k) * t + ti] = (c / sum) as f32;
            }
        }
    }
    Tensor::new(vec![bands, bins, t], grid)
}

/// Mean and standard deviation of [`signal_functional`] over a fixed reference
/// draw under `params`.
pub fn reference_moments(params: &GeneratorParams) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
    let vigor = stratified_normals(REFERENCE_SIZE, &mut rng);
    let mut values = Vec::with_capacity(REFERENCE_SIZE);
    for &v in &vigor {
        values.push(signal_functional(&draw_grid(v, params, &mut rng)?));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `n` synthetic samples, deterministic in `seed`. Years cycle round-robin
/// over the configured range; `county_id` counts completed cycles.
pub fn generate_synthetic(n: usize, seed: u64, params: &GeneratorParams) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let (f_mean, f_std) = reference_moments(params)?;
    let years = params.years();
    let w = (1.0 - params.sigma_noise * params.sigma_noise).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vigor = stratified_normals(n, &mut rng);
    let mut samples = Vec::with_capacity(n);
    for (i, &v) in vigor.iter().enumerate() {
        let grid = draw_grid(v, params, &mut rng)?;
        let z = (signal_functional(&grid) - f_mean) / f_std;
        let eps: f64 = rng.sample(StandardNormal);
        let y = params.yield_mean + params.yield_std * (w * z + params.sigma_noise * eps);
        samples.push(HistogramSample {
            county_id: (i / years.len()) as i32,
            year: years[i % years.len()],
            yield_bu_ac: y.max(MIN_YIELD) as f32,
            grid,
        });
    }
    Dataset::new(
        Provenance::Synthetic,
        HISTOGRAM_BANDS,
        HISTOGRAM_BINS,
        FULL_SEASON_INTERVALS,
        samples,
    )
}
