use super::config::{ModelConfig, ProjectionNorm, StageConfig};
use super::params::{BoundParams, ParamStore, ProjectionRole};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{channel_moments, Conv2dSpec, Graph, Var};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Tokens `[N, L, D]` laid out on an `h × w` grid, optionally preceded by a
/// classification token (`L = h·w + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMap {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
    pub has_cls: bool,
}

impl TokenMap {
    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.spatial_len() + usize::from(self.has_cls)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whether projection batch norms use batch statistics (and report running
/// updates) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub name: String,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Everything one forward pass needs besides the graph.
pub struct Layers<'a, S: Scalar> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParamStore<S>,
    pub params: &'a BoundParams,
    pub mode: Mode,
    pub batch_stats: Vec<BatchStats<S>>,
}

impl<'a, S: Scalar> Layers<'a, S> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore<S>, params: &'a BoundParams, mode: Mode) -> Self {
        Self {
            cfg,
            store,
            params,
            mode,
            batch_stats: Vec::new(),
        }
    }

    fn eps(&self) -> S {
        S::lit(self.cfg.norm_eps)
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    fn p_opt(&self, name: &str) -> Option<Var> {
        self.params.get(name).ok()
    }

    fn linear(&self, g: &mut Graph<S>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p_opt(&format!("{prefix}.bias"));
        g.linear(x, w, b)
    }

    fn layer_norm(&self, g: &mut Graph<S>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p_opt(&format!("{prefix}.beta"));
        g.layer_norm(x, gamma, beta, self.eps())
    }

    /// Convolution to `embed_dim` channels, flattening to tokens, layer norm.
    pub fn conv_token_embedding(
        &self,
        g: &mut Graph<S>,
        x: Var,
        stage_index: usize,
        stage: &StageConfig,
    ) -> Result<TokenMap> {
        let shape = g.shape(x).to_vec();
        let expected = self.cfg.stage_input_channels(stage_index);
        if shape.len() != 4 || shape[1] != expected {
            return Err(Error::Shape(format!(
                "stage {} embedding expects [N, {expected}, H, W] input, got {shape:?}",
                stage_index + 1
            )));
        }
        let s = format!("stage{}.embed", stage_index + 1);
        let w = self.p(&format!("{s}.conv.weight"))?;
        let b = self.p_opt(&format!("{s}.conv.bias"));
        let spec = Conv2dSpec::new(stage.patch_stride, stage.patch_padding, 1);
        let y = g.conv2d(x, w, b, spec)?;
        let (n, d, h, wd) = match *g.shape(y) {
            [n, d, h, w] => (n, d, h, w),
            _ => unreachable!("conv2d output is rank 4"),
        };
        let flat = g.reshape(y, vec![n, d, h * wd])?;
        let tokens = g.permute(flat, &[0, 2, 1])?;
        let tokens = self.layer_norm(g, tokens, &format!("{s}.norm"))?;
        Ok(TokenMap {
            tokens,
            height: h,
            width: wd,
            has_cls: false,
        })
    }

    /// Prepends the learned classification token to every sample.
    pub fn prepend_cls(&self, g: &mut Graph<S>, t: TokenMap, stage_index: usize) -> Result<TokenMap> {
        let n = g.shape(t.tokens)[0];
        let cls = self.p(&format!("stage{}.cls_token", stage_index + 1))?;
        let cls = g.broadcast_batch(cls, n)?;
        let tokens = g.concat(&[cls, t.tokens], 1)?;
        Ok(TokenMap {
            tokens,
            has_cls: true,
            ..t
        })
    }

    /// Depth-wise 3×3 convolution over the token grid, normalization, then a
    /// pointwise linear map. The classification token skips the convolution
    /// and normalization but shares the linear map.
    pub fn conv_projection(
        &mut self,
        g: &mut Graph<S>,
        t: TokenMap,
        prefix: &str,
        role: ProjectionRole,
        stride: usize,
    ) -> Result<Var> {
        if !matches!(stride, 1 | 2) {
            return Err(Error::InvalidArgument(format!(
                "convolutional projection stride must be 1 or 2, got {stride}"
            )));
        }
        let p = format!("{prefix}.attn.{}", role.tag());
        let shape = g.shape(t.tokens).to_vec();
        let (n, d) = (shape[0], shape[2]);
        if shape[1] != t.len() {
            return Err(Error::Shape(format!(
                "token map claims {}x{}{} tokens but tensor is {shape:?}",
                t.height,
                t.width,
                if t.has_cls { "+cls" } else { "" }
            )));
        }
        let (cls, spatial) = if t.has_cls {
            let cls = g.narrow(t.tokens, 1, 0, 1)?;
            let rest = g.narrow(t.tokens, 1, 1, t.spatial_len())?;
            (Some(cls), rest)
        } else {
            (None, t.tokens)
        };
        let chw = g.permute(spatial, &[0, 2, 1])?;
        let grid = g.reshape(chw, vec![n, d, t.height, t.width])?;
        let dw = self.p(&format!("{p}.dw.weight"))?;
        let conv = g.conv2d(grid, dw, None, Conv2dSpec::new(stride, 1, d))?;
        let (h2, w2) = (g.shape(conv)[2], g.shape(conv)[3]);
        let flat = g.reshape(conv, vec![n, d, h2 * w2])?;
        let tokens = g.permute(flat, &[0, 2, 1])?;
        let normed = self.projection_norm(g, tokens, &format!("{p}.norm"))?;
        let all = match cls {
            Some(c) => g.concat(&[c, normed], 1)?,
            None => normed,
        };
        self.linear(g, all, &format!("{p}.proj"))
    }

    fn projection_norm(&mut self, g: &mut Graph<S>, x: Var, prefix: &str) -> Result<Var> {
        match self.cfg.projection_norm {
            ProjectionNorm::Layer => self.layer_norm(g, x, prefix),
            ProjectionNorm::Batch => {
                let gamma = self.p(&format!("{prefix}.gamma"))?;
                let beta = self.p_opt(&format!("{prefix}.beta"));
                match self.mode {
                    Mode::Train => {
                        let d = *g.shape(x).last().expect("rank 3");
                        let (mean, var) = channel_moments(g.value(x), d);
                        self.batch_stats.push(BatchStats {
                            name: prefix.to_string(),
                            mean,
                            var,
                        });
                        g.batch_norm(x, gamma, beta, self.eps())
                    }
                    Mode::Eval => {
                        let buffer = |suffix: &str| {
                            let name = format!("{prefix}.{suffix}");
                            self.store
                                .buffer(&name)
                                .map(|t| t.data().to_vec())
                                .ok_or(Error::MissingParam(name))
                        };
                        let (mean, var) = (buffer("running_mean")?, buffer("running_var")?);
                        g.batch_norm_fixed(x, gamma, beta, &mean, &var, self.eps())
                    }
                }
            }
        }
    }

    /// Pre-norm transformer block: `t + MHA(LN(t))`, then `t + MLP(LN(t))`.
    pub fn cvt_block(&mut self, g: &mut Graph<S>, t: TokenMap, prefix: &str, stage: &StageConfig) -> Result<TokenMap> {
        let x = self.layer_norm(g, t.tokens, &format!("{prefix}.norm1"))?;
        let normed = TokenMap { tokens: x, ..t };
        let q = self.conv_projection(g, normed, prefix, ProjectionRole::Query, stage.q_stride)?;
        let k = self.conv_projection(g, normed, prefix, ProjectionRole::Key, stage.kv_stride)?;
        let v = self.conv_projection(g, normed, prefix, ProjectionRole::Value, stage.kv_stride)?;
        let heads = multi_head_attention(g, q, k, v, stage.num_heads)?;
        let attn = self.linear(g, heads, &format!("{prefix}.attn.out"))?;
        let x = g.add(t.tokens, attn)?;

        let h = self.layer_norm(g, x, &format!("{prefix}.norm2"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.gelu(h)?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc2"))?;
        let tokens = g.add(x, h)?;
        Ok(TokenMap { tokens, ..t })
    }

    /// Final norm on the classification token and the regression head.
    pub fn head(&self, g: &mut Graph<S>, t: TokenMap) -> Result<Var> {
        if !t.has_cls {
            return Err(Error::Config("the final stage carries no classification token".into()));
        }
        let n = g.shape(t.tokens)[0];
        let d = g.shape(t.tokens)[2];
        let cls = g.narrow(t.tokens, 1, 0, 1)?;
        let cls = g.reshape(cls, vec![n, d])?;
        let x = self.layer_norm(g, cls, "head.norm")?;
        match self.cfg.head_hidden {
            Some(_) => {
                let h = self.linear(g, x, "head.fc1")?;
                let h = g.gelu(h)?;
                self.linear(g, h, "head.fc2")
            }
            None => self.linear(g, x, "head.fc"),
        }
    }
}

/// Scaled dot-product attention for `q[..., Lq, dh]`, `k[..., Lk, dh]`,
/// `v[..., Lk, dv]`. Returns the output and the attention weights.
pub fn scaled_dot_product<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let rank = g.shape(k).len();
    let dh = *g.shape(q).last().expect("rank >= 2");
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 2, rank - 1);
    let kt = g.permute(k, &axes)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, S::one() / S::lit(dh as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention on `[N, L, D]` inputs, heads concatenated back to
/// `[N, Lq, D]`. The output projection is applied by the caller.
pub fn multi_head_attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var, num_heads: usize) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::Shape(format!(
            "attention expects q [N, Lq, D] and k, v [N, Lk, D]; got {sq:?}, {sk:?}, {sv:?}"
        )));
    }
    let (n, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!("embedding dim {d} is not divisible by {num_heads} heads")));
    }
    let dh = d / num_heads;
    let split = |g: &mut Graph<S>, x: Var, l: usize| -> Result<Var> {
        let x = g.reshape(x, vec![n, l, num_heads, dh])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let (qh, kh, vh) = (split(g, q, lq)?, split(g, k, lk)?, split(g, v, lk)?);
    let (out, _) = scaled_dot_product(g, qh, kh, vh)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, vec![n, lq, d])
}
