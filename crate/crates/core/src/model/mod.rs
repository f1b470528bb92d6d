//! The three-stage convolutional vision transformer, regressing one value per
//! input grid.

mod check;
mod config;
mod layers;
mod params;

pub use check::{check_model_gradients, check_point, ModelCheckOptions, ModelCheckReport, ParamCheck};
pub use config::{
    ModelConfig, ModelPreset, ProjectionNorm, StageConfig, StageGrid, FULL_SEASON_INTERVALS, HISTOGRAM_BANDS,
    HISTOGRAM_BINS, IN_YEAR_INTERVALS,
};
pub use layers::{multi_head_attention, scaled_dot_product, BatchStats, Layers, Mode, TokenMap, BN_MOMENTUM};
pub use params::{
    init_params, param_count, param_specs, BoundParams, ParamKind, ParamSpec, ParamStore, ProjectionRole, INIT_STD,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    /// Predictions `[N, 1]`.
    pub prediction: Var,
    /// Token-map extents after each stage.
    pub stages: Vec<StageGrid>,
    /// Batch statistics seen by batch-norm projections (training mode only).
    pub batch_stats: Vec<BatchStats<S>>,
}

/// Runs the model on `x[N, C, H, W]` recorded on `g`.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    cfg: &ModelConfig,
    store: &ParamStore<S>,
    params: &BoundParams,
    mode: Mode,
) -> Result<ForwardOutput<S>> {
    let shape = g.shape(x).to_vec();
    let expected = [cfg.input_channels, cfg.input_height, cfg.input_width];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::Shape(format!(
            "input has shape {shape:?}, model expects [N, {}, {}, {}]",
            expected[0], expected[1], expected[2]
        )));
    }
    let mut layers = Layers::new(cfg, store, params, mode);
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut input = x;
    let mut t = None;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let mut map = layers.conv_token_embedding(g, input, i, stage)?;
        if stage.has_cls_token {
            map = layers.prepend_cls(g, map, i)?;
        }
        for j in 0..stage.depth {
            map = layers.cvt_block(g, map, &format!("stage{}.block{j}", i + 1), stage)?;
        }
        stages.push(StageGrid {
            height: map.height,
            width: map.width,
            dim: stage.embed_dim,
            has_cls: map.has_cls,
        });
        if i + 1 < cfg.stages.len() {
            input = to_grid(g, map)?;
        }
        t = Some(map);
    }
    let t = t.ok_or_else(|| Error::Config("model has no stages".into()))?;
    let prediction = layers.head(g, t)?;
    Ok(ForwardOutput {
        prediction,
        stages,
        batch_stats: layers.batch_stats,
    })
}

/// `[N, h·w, D]` spatial tokens back to an `[N, D, h, w]` image.
fn to_grid<S: Scalar>(g: &mut Graph<S>, t: TokenMap) -> Result<Var> {
    if t.has_cls {
        return Err(Error::Config("only the final stage may carry a classification token".into()));
    }
    let shape = g.shape(t.tokens).to_vec();
    let chw = g.permute(t.tokens, &[0, 2, 1])?;
    g.reshape(chw, vec![shape[0], shape[2], t.height, t.width])
}

/// Folds observed batch statistics into the running buffers.
pub fn update_running_stats<S: Scalar>(store: &mut ParamStore<S>, stats: &[BatchStats<S>]) -> Result<()> {
    let m = S::lit(BN_MOMENTUM);
    for s in stats {
        for (suffix, observed) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{}.{suffix}", s.name);
            let buf = store.buffer_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            for (r, &o) in buf.data_mut().iter_mut().zip(observed) {
                *r = (S::one() - m) * *r + m * o;
            }
        }
    }
    Ok(())
}

/// Evaluation-mode predictions for a batch `[N, C, H, W]`.
pub fn predict<S: Scalar>(cfg: &ModelConfig, store: &ParamStore<S>, batch: Tensor<S>) -> Result<Vec<S>> {
    let mut g = Graph::new();
    let params = store.bind(&mut g, false);
    let x = g.constant(batch);
    let out = forward(&mut g, x, cfg, store, &params, Mode::Eval)?;
    Ok(g.value(out.prediction).to_vec())
}
