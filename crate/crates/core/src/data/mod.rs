//! Histogram samples, datasets, preprocessing and year-based splitting.

mod format;
mod synthetic;

use std::collections::{BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use format::{
    read_dataset, read_dataset_from, read_params, read_params_from, write_dataset, write_dataset_to, write_params,
    write_params_to, ParamFile, FORMAT_VERSION, MAGIC,
};
pub use synthetic::{generate_synthetic, reference_moments, signal_functional, GeneratorParams};

use crate::error::{Error, Result};
use crate::model::{FULL_SEASON_INTERVALS, IN_YEAR_INTERVALS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One county-year: a `[bands, bins, intervals]` grid of per-band histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSample {
    pub county_id: i32,
    pub year: i32,
    pub yield_bu_ac: f32,
    pub grid: Tensor<f32>,
}

impl HistogramSample {
    pub fn intervals(&self) -> usize {
        self.grid.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    External,
}

impl Provenance {
    pub(crate) fn code(self) -> u8 {
        match self {
            Self::Synthetic => 0,
            Self::External => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub provenance: Provenance,
    pub bands: usize,
    pub bins: usize,
    pub intervals: usize,
    pub samples: Vec<HistogramSample>,
}

impl Dataset {
    /// Builds a dataset, checking grid shapes and `(county, year)` uniqueness.
    pub fn new(
        provenance: Provenance,
        bands: usize,
        bins: usize,
        intervals: usize,
        samples: Vec<HistogramSample>,
    ) -> Result<Self> {
        let ds = Self {
            provenance,
            bands,
            bins,
            intervals,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let want = [self.bands, self.bins, self.intervals];
        let mut seen = HashSet::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            if s.grid.shape() != want {
                return Err(Error::Dataset(format!(
                    "sample {i} has grid shape {:?}, dataset declares {want:?}",
                    s.grid.shape()
                )));
            }
            if !seen.insert((s.county_id, s.year)) {
                return Err(Error::Dataset(format!(
                    "duplicate (county {}, year {}) at sample {i}",
                    s.county_id, s.year
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct years, ascending.
    pub fn years(&self) -> Vec<i32> {
        self.samples
            .iter()
            .map(|s| s.year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.yield_bu_ac)).collect()
    }

    fn with_samples(&self, samples: Vec<HistogramSample>) -> Self {
        Self {
            samples,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            provenance: self.provenance,
            bands: self.bands,
            bins: self.bins,
            intervals: self.intervals,
            samples: Vec::new(),
        }
    }

    /// Stacks the grids of `indices` into an `[N, bands, bins, intervals]`
    /// model input.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let per = self.bands * self.bins * self.intervals;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
            data.extend(s.grid.data().iter().map(|&v| S::lit(f64::from(v))));
        }
        Tensor::new(vec![indices.len(), self.bands, self.bins, self.intervals], data)
    }

    /// In-year variant of every sample, see [`truncate_in_year`].
    pub fn truncate_in_year(&self) -> Result<Self> {
        if self.intervals != FULL_SEASON_INTERVALS {
            return Err(Error::Dataset(format!(
                "in-year truncation needs {FULL_SEASON_INTERVALS} intervals, dataset has {}",
                self.intervals
            )));
        }
        let samples = self.samples.iter().map(truncate_in_year).collect::<Result<_>>()?;
        Ok(Self {
            intervals: IN_YEAR_INTERVALS,
            ..self.with_samples(samples)
        })
    }
}

/// Divides every `(band, interval)` column of a `[bands, bins, intervals]`
/// grid by its sum over bins. All-zero columns stay zero.
pub fn normalize_histograms<S: Scalar>(raw: &Tensor<S>) -> Result<Tensor<S>> {
    let &[bands, bins, intervals] = raw.shape() else {
        return Err(Error::Shape(format!(
            "histogram grid must be [bands, bins, intervals], got {:?}",
            raw.shape()
        )));
    };
    if let Some(pos) = raw.data().iter().position(|&v| v < S::zero()) {
        return Err(Error::InvalidArgument(format!(
            "negative histogram count {} at flat index {pos}",
            raw.data()[pos]
        )));
    }
    let mut out = raw.data().to_vec();
    for b in 0..bands {
        let base = b * bins * intervals;
        for t in 0..intervals {
            let total: S = (0..bins).map(|k| out[base + k * intervals + t]).sum();
            if total > S::zero() {
                for k in 0..bins {
                    out[base + k * intervals + t] /= total;
                }
            }
        }
    }
    Tensor::new(raw.shape().to_vec(), out)
}

/// Keeps the first 19 of 34 intervals, i.e. the part of the season observed
/// before harvest.
pub fn truncate_in_year(s: &HistogramSample) -> Result<HistogramSample> {
    let &[bands, bins, t] = s.grid.shape() else {
        return Err(Error::Shape(format!("grid must be rank 3, got {:?}", s.grid.shape())));
    };
    if t != FULL_SEASON_INTERVALS {
        return Err(Error::InvalidArgument(format!(
            "in-year truncation needs {FULL_SEASON_INTERVALS} intervals, sample has {t}"
        )));
    }
    let mut data = Vec::with_capacity(bands * bins * IN_YEAR_INTERVALS);
    for row in s.grid.data().chunks_exact(t) {
        data.extend_from_slice(&row[..IN_YEAR_INTERVALS]);
    }
    Ok(HistogramSample {
        grid: Tensor::new(vec![bands, bins, IN_YEAR_INTERVALS], data)?,
        ..s.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_year: i32,
    pub val_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub const DEFAULT_VAL_FRACTION: f64 = 0.10;

    pub fn new(test_year: i32, seed: u64) -> Self {
        Self {
            test_year,
            val_fraction: Self::DEFAULT_VAL_FRACTION,
            seed,
        }
    }

    /// `⌊val_fraction · pool⌋`, guarded against the product landing just
    /// below an integer.
    pub fn val_count(&self, pool: usize) -> usize {
        (self.val_fraction * pool as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Test set: every sample of the test year. Pool: every earlier sample, of
/// which a seeded uniform `⌊val_fraction·|pool|⌋` become validation. Later
/// years are unused.
pub fn split_by_year(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Split(format!(
            "val_fraction must lie in (0, 1), got {}",
            spec.val_fraction
        )));
    }
    let test: Vec<_> = ds.samples.iter().filter(|s| s.year == spec.test_year).cloned().collect();
    if test.is_empty() {
        return Err(Error::Split(format!(
            "test year {} has no samples; available years: {:?}",
            spec.test_year,
            ds.years()
        )));
    }
    let pool: Vec<&HistogramSample> = ds.samples.iter().filter(|s| s.year < spec.test_year).collect();
    if pool.is_empty() {
        return Err(Error::Split(format!("no samples from years before {}", spec.test_year)));
    }
    let k = spec.val_count(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut is_val = vec![false; pool.len()];
    for i in sample(&mut rng, pool.len(), k) {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in pool.into_iter().zip(is_val) {
        if v {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    if train.is_empty() {
        return Err(Error::Split("validation draw left no training samples".into()));
    }
    Ok(Split {
        train: ds.with_samples(train),
        val: ds.with_samples(val),
        test: ds.with_samples(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: usize, f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::new(vec![11, 32, t], (0..11 * 32 * t).map(f).collect()).unwrap()
    }

    fn sample_at(county: i32, year: i32) -> HistogramSample {
        HistogramSample {
            county_id: county,
            year,
            yield_bu_ac: 40.0 + county as f32,
            grid: grid(34, |i| (i % 7) as f32),
        }
    }

    fn dataset(years: std::ops::RangeInclusive<i32>, per_year: i32) -> Dataset {
        let samples = years
            .flat_map(|y| (0..per_year).map(move |c| sample_at(c, y)))
            .collect();
        Dataset::new(Provenance::Synthetic, 11, 32, 34, samples).unwrap()
    }

    #[test]
    fn two_equal_bins_halve() {
        let mut raw = Tensor::<f64>::zeros(vec![1, 32, 2]);
        raw.data_mut()[0] = 2.0;
        raw.data_mut()[2] = 2.0;
        let n = normalize_histograms(&raw).unwrap();
        assert_eq!(n.at(&[0, 0, 0]), 0.5);
        assert_eq!(n.at(&[0, 1, 0]), 0.5);
        assert!((0..32).all(|k| n.at(&[0, k, 1]) == 0.0));
    }

    #[test]
    fn negative_counts_are_rejected() {
        let raw = Tensor::new(vec![1, 2, 1], vec![1.0, -1.0]).unwrap();
        assert!(normalize_histograms(&raw).is_err());
    }

    #[test]
    fn split_of_three_years() {
        let ds = dataset(2016..=2018, 5);
        let split = split_by_year(&ds, &SplitSpec::new(2018, 1)).unwrap();
        assert_eq!(split.test.len(), 5);
        assert!(split.test.samples.iter().all(|s| s.year == 2018));
        assert!(split.train.samples.iter().chain(&split.val.samples).all(|s| s.year < 2018));
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.train.len(), 9);
    }

    #[test]
    fn pool_of_100_gives_10_validation() {
        let ds = dataset(2000..=2010, 10);
        let split = split_by_year(&ds, &SplitSpec::new(2010, 3)).unwrap();
        assert_eq!((split.val.len(), split.train.len()), (10, 90));
        let again = split_by_year(&ds, &SplitSpec::new(2010, 3)).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn fraction_guard_handles_representation_error() {
        let spec = SplitSpec {
            val_fraction: 0.29,
            ..SplitSpec::new(0, 0)
        };
        assert_eq!(spec.val_count(100), 29);
    }

    #[test]
    fn missing_years_are_errors() {
        let ds = dataset(2016..=2018, 2);
        let err = split_by_year(&ds, &SplitSpec::new(2020, 0)).unwrap_err().to_string();
        assert!(err.contains("2016") && err.contains("2018"), "{err}");
        assert!(split_by_year(&ds, &SplitSpec::new(2016, 0)).is_err());
        let bad = SplitSpec {
            val_fraction: 1.0,
            ..SplitSpec::new(2018, 0)
        };
        assert!(split_by_year(&ds, &bad).is_err());
    }

    #[test]
    fn truncation_keeps_prefix_once() {
        let s = sample_at(1, 2019);
        let t = truncate_in_year(&s).unwrap();
        assert_eq!(t.grid.shape(), &[11, 32, 19]);
        for b in 0..11 {
            for k in 0..32 {
                for i in 0..19 {
                    assert_eq!(t.grid.at(&[b, k, i]).to_bits(), s.grid.at(&[b, k, i]).to_bits());
                }
            }
        }
        assert_eq!((t.county_id, t.year, t.yield_bu_ac), (s.county_id, s.year, s.yield_bu_ac));
        assert!(truncate_in_year(&t).is_err());
    }

    #[test]
    fn duplicates_and_shape_mismatch_are_rejected() {
        let a = sample_at(1, 2019);
        assert!(Dataset::new(Provenance::External, 11, 32, 34, vec![a.clone(), a.clone()]).is_err());
        assert!(Dataset::new(Provenance::External, 11, 32, 19, vec![a]).is_err());
    }

    #[test]
    fn batches_stack_grids() {
        let ds = dataset(2016..=2016, 3);
        let b = ds.batch::<f64>(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 11, 32, 34]);
        assert!(ds.batch::<f64>(&[3]).is_err());
    }
}
