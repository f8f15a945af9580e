//! SD-1.x UNet with every transformer attention call routed through an
//! [`AttentionHook`]. Parameter names follow the diffusers layout.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{self as nn, VarBuilder};
use candle_transformers::models::stable_diffusion::embeddings::{TimestepEmbedding, Timesteps};
use candle_transformers::models::stable_diffusion::resnet::{ResnetBlock2D, ResnetBlock2DConfig};
use cpam_core::attention::FeatureMatrix;
use cpam_core::backend::{run_hook, AttentionCall, AttentionHook, BackendError, HeadProjections, SiteSpec};
use cpam_core::control::AttentionKind;
use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    /// Per down block, whether it carries transformers.
    pub cross_attention: Vec<bool>,
    pub heads: usize,
    pub layers_per_block: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    pub context_dim: usize,
}

impl UnetConfig {
    pub fn sd15() -> Self {
        Self {
            in_channels: 4,
            block_channels: vec![320, 640, 1280, 1280],
            cross_attention: vec![true, true, true, false],
            heads: 8,
            layers_per_block: 2,
            norm_groups: 32,
            norm_eps: 1e-5,
            context_dim: 768,
        }
    }

    /// Transformer sites in execution order for a latent of `latent_hw`.
    pub fn sites(&self, latent_hw: (usize, usize)) -> Vec<SiteSpec> {
        let n = self.block_channels.len();
        let mut grids = Vec::new();
        for (i, &attn) in self.cross_attention.iter().enumerate() {
            if attn {
                for _ in 0..self.layers_per_block {
                    grids.push((i, self.block_channels[i]));
                }
            }
        }
        grids.push((n - 1, self.block_channels[n - 1]));
        for i in 0..n {
            let level = n - 1 - i;
            if self.cross_attention[level] {
                for _ in 0..=self.layers_per_block {
                    grids.push((level, self.block_channels[level]));
                }
            }
        }
        let mut sites = Vec::new();
        for (layer, (level, channels)) in grids.into_iter().enumerate() {
            let grid = (latent_hw.0 >> level, latent_hw.1 >> level);
            for kind in [AttentionKind::SelfAttention, AttentionKind::CrossAttention] {
                sites.push(SiteSpec {
                    kind,
                    layer_index: layer,
                    token_grid: grid,
                    heads: self.heads,
                    head_dim: channels / self.heads,
                });
            }
        }
        sites
    }
}

fn model_err(e: candle_core::Error) -> BackendError {
    BackendError::Model(e.to_string())
}

/// Per-forward state threaded through the blocks.
pub(crate) struct Pass<'a> {
    pub hooks: &'a mut dyn AttentionHook,
    pub aux: &'a [Tensor],
    pub sites: &'a [SiteSpec],
    pub next_site: usize,
    pub visited: Vec<SiteSpec>,
}

impl Pass<'_> {
    fn take_site(&mut self, kind: AttentionKind) -> Result<SiteSpec, BackendError> {
        let site = self
            .sites
            .get(self.next_site)
            .copied()
            .filter(|s| s.kind == kind)
            .ok_or_else(|| BackendError::Model(format!("site {} out of sequence", self.next_site)))?;
        self.next_site += 1;
        self.visited.push(site);
        Ok(site)
    }
}

fn split_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (_, n, c) = x.dims3()?;
    x.reshape((n, heads, c / heads))?.transpose(0, 1)?.contiguous()
}

fn to_features(x: &Tensor) -> Result<Vec<FeatureMatrix>, BackendError> {
    let (h, n, d) = x.dims3().map_err(model_err)?;
    let flat: Vec<f64> = x
        .to_dtype(DType::F64)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1())
        .map_err(model_err)?;
    (0..h)
        .map(|i| {
            let data = Array2::from_shape_vec((n, d), flat[i * n * d..(i + 1) * n * d].to_vec())
                .map_err(|e| BackendError::Model(e.to_string()))?;
            Ok(FeatureMatrix::new(data)?)
        })
        .collect()
}

fn from_features(heads: &[FeatureMatrix], like: &Tensor) -> Result<Tensor, BackendError> {
    let (n, d) = (heads[0].n_tokens(), heads[0].dim());
    let flat: Vec<f32> = heads.iter().flat_map(|h| h.data().iter().map(|v| *v as f32)).collect();
    Tensor::from_vec(flat, (heads.len(), n, d), like.device())
        .and_then(|t| t.to_dtype(like.dtype()))
        .map_err(model_err)
}

struct HookedAttention {
    to_q: nn::Linear,
    to_k: nn::Linear,
    to_v: nn::Linear,
    to_out: nn::Linear,
    heads: usize,
    scale: f64,
}

impl HookedAttention {
    fn new(vs: VarBuilder, dim: usize, context_dim: usize, heads: usize) -> candle_core::Result<Self> {
        Ok(Self {
            to_q: nn::linear_no_bias(dim, dim, vs.pp("to_q"))?,
            to_k: nn::linear_no_bias(context_dim, dim, vs.pp("to_k"))?,
            to_v: nn::linear_no_bias(context_dim, dim, vs.pp("to_v"))?,
            to_out: nn::linear(dim, dim, vs.pp("to_out.0"))?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    fn forward(
        &self,
        xs: &Tensor,
        context: Option<&Tensor>,
        kind: AttentionKind,
        pass: &mut Pass<'_>,
    ) -> Result<Tensor, BackendError> {
        let site = pass.take_site(kind)?;
        let ctx = context.unwrap_or(xs);
        let project = |l: &nn::Linear, x: &Tensor| l.forward(x).and_then(|t| split_heads(&t, self.heads));
        let q = project(&self.to_q, xs).map_err(model_err)?;
        let k = project(&self.to_k, ctx).map_err(model_err)?;
        let v = project(&self.to_v, ctx).map_err(model_err)?;
        let mut out = None;
        if pass.hooks.observes(&site) {
            let (qs, ks, vs) = (to_features(&q)?, to_features(&k)?, to_features(&v)?);
            let heads: Vec<HeadProjections> = qs
                .into_iter()
                .zip(ks)
                .zip(vs)
                .map(|((q, k), v)| HeadProjections { q, k, v })
                .collect();
            let mut aux = Vec::new();
            if kind == AttentionKind::CrossAttention {
                for a in pass.aux {
                    let ka = to_features(&project(&self.to_k, a).map_err(model_err)?)?;
                    let va = to_features(&project(&self.to_v, a).map_err(model_err)?)?;
                    aux.push(ka.into_iter().zip(va).collect::<Vec<_>>());
                }
            }
            let call = AttentionCall {
                site,
                heads: &heads,
                aux: &aux,
            };
            if let Some(replaced) = run_hook(pass.hooks, &call)? {
                out = Some(from_features(&replaced, &q)?);
            }
        }
        let out = match out {
            Some(o) => o,
            None => {
                let w = (q.matmul(&k.t().map_err(model_err)?).map_err(model_err)? * self.scale).map_err(model_err)?;
                nn::ops::softmax_last_dim(&w).and_then(|p| p.matmul(&v)).map_err(model_err)?
            }
        };
        let (h, n, d) = out.dims3().map_err(model_err)?;
        out.transpose(0, 1)
            .and_then(|t| t.reshape((1, n, h * d)))
            .and_then(|t| self.to_out.forward(&t))
            .map_err(model_err)
    }
}

struct FeedForward {
    proj: nn::Linear,
    out: nn::Linear,
}

impl FeedForward {
    fn new(vs: VarBuilder, dim: usize) -> candle_core::Result<Self> {
        Ok(Self {
            proj: nn::linear(dim, dim * 8, vs.pp("net.0.proj"))?,
            out: nn::linear(dim * 4, dim, vs.pp("net.2"))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let parts = self.proj.forward(xs)?.chunk(2, D::Minus1)?;
        self.out.forward(&(&parts[0] * parts[1].gelu()?)?)
    }
}

struct Transformer {
    norm: nn::GroupNorm,
    proj_in: nn::Conv2d,
    attn1: HookedAttention,
    attn2: HookedAttention,
    ff: FeedForward,
    norm1: nn::LayerNorm,
    norm2: nn::LayerNorm,
    norm3: nn::LayerNorm,
    proj_out: nn::Conv2d,
}

impl Transformer {
    fn new(vs: VarBuilder, channels: usize, cfg: &UnetConfig) -> candle_core::Result<Self> {
        let tb = vs.pp("transformer_blocks.0");
        Ok(Self {
            norm: nn::group_norm(cfg.norm_groups, channels, 1e-6, vs.pp("norm"))?,
            proj_in: nn::conv2d(channels, channels, 1, Default::default(), vs.pp("proj_in"))?,
            attn1: HookedAttention::new(tb.pp("attn1"), channels, channels, cfg.heads)?,
            attn2: HookedAttention::new(tb.pp("attn2"), channels, cfg.context_dim, cfg.heads)?,
            ff: FeedForward::new(tb.pp("ff"), channels)?,
            norm1: nn::layer_norm(channels, 1e-5, tb.pp("norm1"))?,
            norm2: nn::layer_norm(channels, 1e-5, tb.pp("norm2"))?,
            norm3: nn::layer_norm(channels, 1e-5, tb.pp("norm3"))?,
            proj_out: nn::conv2d(channels, channels, 1, Default::default(), vs.pp("proj_out"))?,
        })
    }

    fn forward(&self, xs: &Tensor, context: &Tensor, pass: &mut Pass<'_>) -> Result<Tensor, BackendError> {
        let (b, c, h, w) = xs.dims4().map_err(model_err)?;
        let tokens = self
            .norm
            .forward(xs)
            .and_then(|t| self.proj_in.forward(&t))
            .and_then(|t| t.flatten_from(2))
            .and_then(|t| t.transpose(1, 2))
            .and_then(|t| t.contiguous())
            .map_err(model_err)?;
        let a = self.attn1.forward(
            &self.norm1.forward(&tokens).map_err(model_err)?,
            None,
            AttentionKind::SelfAttention,
            pass,
        )?;
        let tokens = (a + &tokens).map_err(model_err)?;
        let a = self.attn2.forward(
            &self.norm2.forward(&tokens).map_err(model_err)?,
            Some(context),
            AttentionKind::CrossAttention,
            pass,
        )?;
        let tokens = (a + &tokens).map_err(model_err)?;
        let tokens = self
            .norm3
            .forward(&tokens)
            .and_then(|t| self.ff.forward(&t))
            .and_then(|f| f + &tokens)
            .map_err(model_err)?;
        tokens
            .transpose(1, 2)
            .and_then(|t| t.reshape((b, c, h, w)))
            .and_then(|t| self.proj_out.forward(&t))
            .and_then(|t| t + xs)
            .map_err(model_err)
    }
}

struct DownBlock {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<Transformer>,
    downsample: Option<nn::Conv2d>,
}

struct UpBlock {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<Transformer>,
    upsample: Option<nn::Conv2d>,
}

pub struct HookedUnet {
    config: UnetConfig,
    conv_in: nn::Conv2d,
    time_proj: Timesteps,
    time_embedding: TimestepEmbedding,
    down: Vec<DownBlock>,
    mid_resnets: [ResnetBlock2D; 2],
    mid_attention: Transformer,
    up: Vec<UpBlock>,
    conv_norm_out: nn::GroupNorm,
    conv_out: nn::Conv2d,
}

impl HookedUnet {
    pub fn new(vs: VarBuilder, config: UnetConfig) -> candle_core::Result<Self> {
        let cfg = &config;
        let n = cfg.block_channels.len();
        let c0 = cfg.block_channels[0];
        let temb = c0 * 4;
        let pad1 = nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let resnet = |vs: VarBuilder, cin: usize, cout: usize| {
            ResnetBlock2D::new(
                vs,
                cin,
                ResnetBlock2DConfig {
                    out_channels: Some(cout),
                    temb_channels: Some(temb),
                    groups: cfg.norm_groups,
                    eps: cfg.norm_eps,
                    ..Default::default()
                },
            )
        };
        let mut down = Vec::with_capacity(n);
        for i in 0..n {
            let vs = vs.pp(format!("down_blocks.{i}"));
            let cout = cfg.block_channels[i];
            let cin = if i == 0 { c0 } else { cfg.block_channels[i - 1] };
            let resnets = (0..cfg.layers_per_block)
                .map(|j| resnet(vs.pp(format!("resnets.{j}")), if j == 0 { cin } else { cout }, cout))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let attentions = if cfg.cross_attention[i] {
                (0..cfg.layers_per_block)
                    .map(|j| Transformer::new(vs.pp(format!("attentions.{j}")), cout, cfg))
                    .collect::<candle_core::Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let downsample = if i + 1 < n {
                Some(nn::conv2d(
                    cout,
                    cout,
                    3,
                    nn::Conv2dConfig {
                        stride: 2,
                        padding: 1,
                        ..Default::default()
                    },
                    vs.pp("downsamplers.0.conv"),
                )?)
            } else {
                None
            };
            down.push(DownBlock {
                resnets,
                attentions,
                downsample,
            });
        }
        let cl = cfg.block_channels[n - 1];
        let mid = vs.pp("mid_block");
        let mid_resnets = [resnet(mid.pp("resnets.0"), cl, cl)?, resnet(mid.pp("resnets.1"), cl, cl)?];
        let mid_attention = Transformer::new(mid.pp("attentions.0"), cl, cfg)?;
        let mut up = Vec::with_capacity(n);
        for i in 0..n {
            let vs = vs.pp(format!("up_blocks.{i}"));
            let level = n - 1 - i;
            let cout = cfg.block_channels[level];
            let prev = if i == 0 { cl } else { cfg.block_channels[level + 1] };
            let skip_in = cfg.block_channels[level.saturating_sub(1)];
            let resnets = (0..=cfg.layers_per_block)
                .map(|j| {
                    let skip = if j == cfg.layers_per_block { skip_in } else { cout };
                    let cin = if j == 0 { prev } else { cout };
                    resnet(vs.pp(format!("resnets.{j}")), cin + skip, cout)
                })
                .collect::<candle_core::Result<Vec<_>>>()?;
            let attentions = if cfg.cross_attention[level] {
                (0..=cfg.layers_per_block)
                    .map(|j| Transformer::new(vs.pp(format!("attentions.{j}")), cout, cfg))
                    .collect::<candle_core::Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let upsample = if i + 1 < n {
                Some(nn::conv2d(cout, cout, 3, pad1, vs.pp("upsamplers.0.conv"))?)
            } else {
                None
            };
            up.push(UpBlock {
                resnets,
                attentions,
                upsample,
            });
        }
        Ok(Self {
            conv_in: nn::conv2d(cfg.in_channels, c0, 3, pad1, vs.pp("conv_in"))?,
            time_proj: Timesteps::new(c0, true, 0.0),
            time_embedding: TimestepEmbedding::new(vs.pp("time_embedding"), c0, temb)?,
            down,
            mid_resnets,
            mid_attention,
            up,
            conv_norm_out: nn::group_norm(cfg.norm_groups, c0, cfg.norm_eps, vs.pp("conv_norm_out"))?,
            conv_out: nn::conv2d(c0, cfg.in_channels, 3, pad1, vs.pp("conv_out"))?,
            config,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    /// `xs`: (1, C, h, w); `context`: (1, T, context_dim).
    pub(crate) fn forward(
        &self,
        xs: &Tensor,
        timestep: f64,
        context: &Tensor,
        pass: &mut Pass<'_>,
    ) -> Result<Tensor, BackendError> {
        let m = model_err;
        let emb = Tensor::new(&[timestep as f32], xs.device())
            .and_then(|t| t.to_dtype(xs.dtype()))
            .and_then(|t| self.time_proj.forward(&t))
            .and_then(|t| self.time_embedding.forward(&t))
            .map_err(m)?;
        let mut xs = self.conv_in.forward(xs).map_err(m)?;
        let mut skips = vec![xs.clone()];
        for block in &self.down {
            for (j, resnet) in block.resnets.iter().enumerate() {
                xs = resnet.forward(&xs, Some(&emb)).map_err(m)?;
                if let Some(attn) = block.attentions.get(j) {
                    xs = attn.forward(&xs, context, pass)?;
                }
                skips.push(xs.clone());
            }
            if let Some(conv) = &block.downsample {
                xs = conv.forward(&xs).map_err(m)?;
                skips.push(xs.clone());
            }
        }
        xs = self.mid_resnets[0].forward(&xs, Some(&emb)).map_err(m)?;
        xs = self.mid_attention.forward(&xs, context, pass)?;
        xs = self.mid_resnets[1].forward(&xs, Some(&emb)).map_err(m)?;
        for block in &self.up {
            for (j, resnet) in block.resnets.iter().enumerate() {
                let skip = skips.pop().ok_or_else(|| BackendError::Model("skip stack exhausted".into()))?;
                xs = Tensor::cat(&[&xs, &skip], 1).and_then(|t| resnet.forward(&t, Some(&emb))).map_err(m)?;
                if let Some(attn) = block.attentions.get(j) {
                    xs = attn.forward(&xs, context, pass)?;
                }
            }
            if let Some(conv) = &block.upsample {
                let (_, _, h, w) = xs.dims4().map_err(m)?;
                let target = skips.last().map(|s| s.dims4()).transpose().map_err(m)?;
                let (th, tw) = target.map(|(_, _, a, b)| (a, b)).unwrap_or((2 * h, 2 * w));
                xs = xs.upsample_nearest2d(th, tw).and_then(|t| conv.forward(&t)).map_err(m)?;
            }
        }
        self.conv_norm_out
            .forward(&xs)
            .and_then(|t| nn::ops::silu(&t))
            .and_then(|t| self.conv_out.forward(&t))
            .map_err(m)
    }
}
