use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, DEFAULT_NORM_EPS};

/// Number of 8-day intervals in a full-season grid.
pub const FULL_SEASON_INTERVALS: usize = 34;
/// Number of intervals kept for in-year (pre-harvest) prediction.
pub const IN_YEAR_INTERVALS: usize = 19;
pub const HISTOGRAM_BANDS: usize = 11;
pub const HISTOGRAM_BINS: usize = 32;

/// One of the three CvT stages: a convolutional token embedding followed by
/// `depth` convolutional transformer blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub patch_padding: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub q_stride: usize,
    pub kv_stride: usize,
    pub has_cls_token: bool,
}

impl StageConfig {
    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Normalization applied after the depth-wise convolution of each
/// query/key/value projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionNorm {
    /// Per-token normalization over channels; independent of batch size.
    #[default]
    Layer,
    /// Per-channel batch statistics while training, running statistics at
    /// evaluation.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<StageConfig>,
    pub head_hidden: Option<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub projection_norm: ProjectionNorm,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    DEFAULT_NORM_EPS
}

/// Spatial extents of one stage's token map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub has_cls: bool,
}

impl StageGrid {
    pub fn tokens(&self) -> usize {
        self.height * self.width + usize::from(self.has_cls)
    }

    /// Key/value token count after a stride-`kv_stride` projection.
    pub fn kv_tokens(&self, kv_stride: usize) -> usize {
        let h = conv_output_extent(self.height, 3, kv_stride, 1).unwrap_or(0);
        let w = conv_output_extent(self.width, 3, kv_stride, 1).unwrap_or(0);
        h * w + usize::from(self.has_cls)
    }
}

impl ModelConfig {
    pub fn preset(preset: ModelPreset, input_width: usize) -> Self {
        let (dims, heads, depths) = preset.stage_shape();
        let patches = [(7, 4, 2), (3, 2, 1), (3, 2, 1)];
        let stages = (0..3)
            .map(|i| StageConfig {
                patch_kernel: patches[i].0,
                patch_stride: patches[i].1,
                patch_padding: patches[i].2,
                embed_dim: dims[i],
                num_heads: heads[i],
                depth: depths[i],
                mlp_ratio: 4.0,
                q_stride: 1,
                kv_stride: 2,
                has_cls_token: i == 2,
            })
            .collect();
        Self {
            input_channels: HISTOGRAM_BANDS,
            input_height: HISTOGRAM_BINS,
            input_width,
            stages,
            head_hidden: None,
            output_dim: 1,
            projection_norm: ProjectionNorm::Layer,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn with_kv_stride(mut self, kv_stride: usize) -> Self {
        self.stages.iter_mut().for_each(|s| s.kv_stride = kv_stride);
        self
    }

    pub fn stage_input_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.input_channels
        } else {
            self.stages[stage - 1].embed_dim
        }
    }

    pub fn final_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stages.len() != 3 {
            return bad(format!("expected exactly 3 stages, found {}", self.stages.len()));
        }
        if self.output_dim != 1 {
            return bad(format!("output_dim must be 1 for regression, found {}", self.output_dim));
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return bad("input extents must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden must be positive when present".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.embed_dim == 0 || s.num_heads == 0 || s.embed_dim % s.num_heads != 0 {
                return bad(format!(
                    "stage {n}: embed_dim {} not divisible by num_heads {}",
                    s.embed_dim, s.num_heads
                ));
            }
            if !matches!(s.kv_stride, 1 | 2) {
                return bad(format!("stage {n}: kv_stride must be 1 or 2, found {}", s.kv_stride));
            }
            if s.q_stride != 1 {
                return bad(format!("stage {n}: q_stride must be 1, found {}", s.q_stride));
            }
            if s.has_cls_token != (i == 2) {
                return bad(format!("stage {n}: a classification token belongs to the final stage only"));
            }
            if s.patch_kernel == 0 || s.patch_stride == 0 {
                return bad(format!("stage {n}: patch kernel and stride must be positive"));
            }
            if !(s.mlp_ratio > 0.0) || s.mlp_hidden() == 0 {
                return bad(format!("stage {n}: mlp_ratio must give a positive hidden width"));
            }
        }
        self.stage_grids().map(|_| ())
    }

    /// Token-map extents produced by each stage's embedding.
    pub fn stage_grids(&self) -> Result<Vec<StageGrid>> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut grids = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let fit = |ext: usize| conv_output_extent(ext, s.patch_kernel, s.patch_stride, s.patch_padding);
            let (Some(nh), Some(nw)) = (fit(h), fit(w)) else {
                return Err(Error::Config(format!(
                    "stage {}: {h}x{w} input is smaller than the {}x{} patch kernel after padding",
                    i + 1,
                    s.patch_kernel,
                    s.patch_kernel
                )));
            };
            h = nh;
            w = nw;
            grids.push(StageGrid {
                height: h,
                width: w,
                dim: s.embed_dim,
                has_cls: s.has_cls_token,
            });
        }
        Ok(grids)
    }
}

/// Named architectures. The three standard sizes follow the reference CvT
/// configurations; `Tiny` is a desk-scale variant for tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Cvt13,
    Cvt21,
    CvtW24,
    Tiny,
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 4] = [Self::Cvt13, Self::Cvt21, Self::CvtW24, Self::Tiny];

    fn stage_shape(self) -> ([usize; 3], [usize; 3], [usize; 3]) {
        match self {
            Self::Cvt13 => ([64, 192, 384], [1, 3, 6], [1, 2, 10]),
            Self::Cvt21 => ([64, 192, 384], [1, 3, 6], [1, 4, 16]),
            Self::CvtW24 => ([192, 768, 1024], [3, 12, 16], [2, 2, 20]),
            Self::Tiny => ([16, 32, 64], [1, 2, 4], [1, 1, 2]),
        }
    }

    /// Training epochs used with this preset.
    pub fn default_epochs(self) -> usize {
        match self {
            Self::Cvt13 => 150,
            Self::Cvt21 => 200,
            Self::CvtW24 => 250,
            Self::Tiny => 30,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cvt13 => "cvt13",
            Self::Cvt21 => "cvt21",
            Self::CvtW24 => "cvtw24",
            Self::Tiny => "tiny",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::Cvt13 => "CvT-13",
            Self::Cvt21 => "CvT-21",
            Self::CvtW24 => "CvT-W24",
            Self::Tiny => "CvT-Tiny",
        }
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s) || p.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model preset {s:?} (expected cvt13, cvt21, cvtw24 or tiny)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ModelPreset::ALL {
            for w in [FULL_SEASON_INTERVALS, IN_YEAR_INTERVALS] {
                ModelConfig::preset(p, w).validate().unwrap();
            }
        }
    }

    #[test]
    fn cvt13_grids_for_both_widths() {
        let full = ModelConfig::preset(ModelPreset::Cvt13, 34).stage_grids().unwrap();
        let hw: Vec<_> = full.iter().map(|g| (g.height, g.width)).collect();
        assert_eq!(hw, vec![(8, 8), (4, 4), (2, 2)]);
        assert_eq!(full[2].tokens(), 5);
        let in_year = ModelConfig::preset(ModelPreset::Cvt13, 19).stage_grids().unwrap();
        assert_eq!((in_year[0].height, in_year[0].width), (8, 5));
        assert_eq!(in_year[0].tokens(), 40);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::preset(ModelPreset::Tiny, 34);
        let mut c = base.clone();
        c.stages[1].num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.stages[0].kv_stride = 3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.stages[0].has_cls_token = true;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.stages.pop();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.output_dim = 2;
        assert!(c.validate().is_err());
        let mut c = base;
        c.input_width = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_names_round_trip() {
        for p in ModelPreset::ALL {
            assert_eq!(p.name().parse::<ModelPreset>().unwrap(), p);
        }
        assert_eq!(ModelPreset::CvtW24.default_epochs(), 250);
        assert!("cvt99".parse::<ModelPreset>().is_err());
    }
}
