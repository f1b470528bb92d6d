use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, ProjectionNorm};
use crate::data::ParamFile;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGamma,
    NormBeta,
    ClsToken,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, Self::RunningMean | Self::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Role of a convolutional projection inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionRole {
    Query,
    Key,
    Value,
}

impl ProjectionRole {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Query => "q",
            Self::Key => "k",
            Self::Value => "v",
        }
    }

    /// Keys carry no additive shift: a constant added to every key moves all
    /// attention logits of a query equally, which softmax ignores.
    pub fn has_shift(self) -> bool {
        self != Self::Key
    }
}

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.0.push(ParamSpec { name, shape, kind });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
        self.add(format!("{prefix}.weight"), vec![d_in, d_out], ParamKind::Weight);
        if bias {
            self.add(format!("{prefix}.bias"), vec![d_out], ParamKind::Bias);
        }
    }

    fn norm(&mut self, prefix: &str, d: usize, shift: bool) {
        self.add(format!("{prefix}.gamma"), vec![d], ParamKind::NormGamma);
        if shift {
            self.add(format!("{prefix}.beta"), vec![d], ParamKind::NormBeta);
        }
    }
}

/// Every learnable array (and batch-norm running statistic) implied by a
/// configuration, in initialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = SpecBuilder(Vec::new());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let s = format!("stage{}", i + 1);
        let d = stage.embed_dim;
        let c_in = cfg.stage_input_channels(i);
        let k = stage.patch_kernel;
        b.add(format!("{s}.embed.conv.weight"), vec![d, c_in, k, k], ParamKind::Weight);
        b.add(format!("{s}.embed.conv.bias"), vec![d], ParamKind::Bias);
        b.norm(&format!("{s}.embed.norm"), d, true);
        if stage.has_cls_token {
            b.add(format!("{s}.cls_token"), vec![1, 1, d], ParamKind::ClsToken);
        }
        for j in 0..stage.depth {
            let blk = format!("{s}.block{j}");
            b.norm(&format!("{blk}.norm1"), d, true);
            for role in [ProjectionRole::Query, ProjectionRole::Key, ProjectionRole::Value] {
                let p = format!("{blk}.attn.{}", role.tag());
                b.add(format!("{p}.dw.weight"), vec![d, 1, 3, 3], ParamKind::Weight);
                b.norm(&format!("{p}.norm"), d, role.has_shift());
                if cfg.projection_norm == ProjectionNorm::Batch {
                    b.add(format!("{p}.norm.running_mean"), vec![d], ParamKind::RunningMean);
                    b.add(format!("{p}.norm.running_var"), vec![d], ParamKind::RunningVar);
                }
                b.linear(&format!("{p}.proj"), d, d, role.has_shift());
            }
            b.linear(&format!("{blk}.attn.out"), d, d, true);
            b.norm(&format!("{blk}.norm2"), d, true);
            let hidden = stage.mlp_hidden();
            b.linear(&format!("{blk}.mlp.fc1"), d, hidden, true);
            b.linear(&format!("{blk}.mlp.fc2"), hidden, d, true);
        }
    }
    let d = cfg.final_dim();
    b.norm("head.norm", d, true);
    match cfg.head_hidden {
        Some(h) => {
            b.linear("head.fc1", d, h, true);
            b.linear("head.fc2", h, cfg.output_dim, true);
        }
        None => b.linear("head.fc", d, cfg.output_dim, true),
    }
    b.0
}

/// Number of learnable scalars for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg)
        .iter()
        .filter(|p| p.kind.trainable())
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Named learnable arrays plus non-learnable buffers (batch-norm running
/// statistics), both in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    params: IndexMap<String, Tensor<S>>,
    buffers: IndexMap<String, Tensor<S>>,
    seed: u64,
}

/// Graph variables for every parameter of a store.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Binds names to variables already on a graph.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn empty(seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            seed,
        }
    }

    /// Inserts a learnable array; names must be unique across the store.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.buffers.insert(name, tensor);
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<S>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Records every parameter on `graph`, tracked or as constants.
    pub fn bind(&self, graph: &mut Graph<S>, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone().with_requires_grad(requires_grad))))
            .collect();
        BoundParams { vars }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
        }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_storage(&self) -> Self {
        self.cast::<f32>().cast::<S>()
    }

    /// Checks that names and shapes match what `cfg` requires.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        let (mut n_params, mut n_buffers) = (0, 0);
        for spec in &specs {
            let found = if spec.kind.trainable() {
                n_params += 1;
                self.params.get(&spec.name)
            } else {
                n_buffers += 1;
                self.buffers.get(&spec.name)
            };
            match found {
                None => return Err(Error::MissingParam(spec.name.clone())),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter {} has shape {:?}, configuration requires {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if n_params != self.params.len() || n_buffers != self.buffers.len() {
            return Err(Error::Config(format!(
                "store holds {} parameters and {} buffers, configuration defines {n_params} and {n_buffers}",
                self.params.len(),
                self.buffers.len()
            )));
        }
        Ok(())
    }
}

impl ParamStore<f64> {
    /// Checkpoint form: parameters then buffers, rounded to `f32`, tagged
    /// with the input extents of `cfg`.
    pub fn to_param_file(&self, cfg: &ModelConfig) -> ParamFile {
        ParamFile {
            channels: cfg.input_channels,
            height: cfg.input_height,
            width: cfg.input_width,
            tensors: self
                .params
                .iter()
                .chain(&self.buffers)
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Inverse of [`Self::to_param_file`], validated against `cfg`.
    pub fn from_param_file(file: &ParamFile, cfg: &ModelConfig) -> Result<Self> {
        let stored = [file.channels, file.height, file.width];
        let model = [cfg.input_channels, cfg.input_height, cfg.input_width];
        if stored != model {
            return Err(Error::Shape(format!(
                "checkpoint was trained on {stored:?} inputs (channels, height, width), configuration expects {model:?}"
            )));
        }
        let kinds: IndexMap<String, ParamKind> = param_specs(cfg).into_iter().map(|s| (s.name, s.kind)).collect();
        let mut store = Self::empty(0);
        for (name, t) in &file.tensors {
            match kinds.get(name) {
                Some(k) if !k.trainable() => store.insert_buffer(name.clone(), t.cast())?,
                _ => store.insert(name.clone(), t.cast())?,
            }
        }
        store.check_against(cfg)?;
        Ok(store)
    }
}

/// Deterministic initialization: truncated normal (σ = 0.02, cut at ±2σ) for
/// weights, zeros for biases, norm shifts and the classification token, ones
/// for norm scales.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::empty(seed);
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<S> = match spec.kind {
            ParamKind::Weight => (0..n).map(|_| S::lit(truncated_normal(&mut rng) * INIT_STD)).collect(),
            ParamKind::Bias | ParamKind::NormBeta | ParamKind::ClsToken | ParamKind::RunningMean => {
                vec![S::zero(); n]
            }
            ParamKind::NormGamma | ParamKind::RunningVar => vec![S::one(); n],
        };
        let t = Tensor::new(spec.shape, data)?;
        if spec.kind.trainable() {
            store.insert(spec.name, t)?;
        } else {
            store.insert_buffer(spec.name, t)?;
        }
    }
    Ok(store)
}

/// Standard normal draw rejected outside ±2.
fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
