//! The conditional U-Net: consumes the channel-concatenated noisy label and
//! image latent plus a timestep embedding, conditions on the phrase through
//! cross-attention and token-level adapter injection, and predicts the noise.
//!
//! Every layer carries an analytic backward pass; the full composition is
//! verified against central finite differences in `gradcheck`.

use crate::nn::attention::{
    injected_self_attention_backward, injected_self_attention_cached, AttentionWeights,
    CrossAttention, CrossAttnCache, SelfAttnCache,
};
use crate::nn::layers::{
    concat_channels, silu_grid, silu_grid_backward, split_channels, upsample2_nearest,
    upsample2_nearest_backward, Conv2d, GroupNorm, GroupNormCache, LayerNorm, LayerNormCache,
    Linear,
};
use crate::nn::Mat;
use crate::text::PhraseConditioning;
use crate::{fl, Error, LatentGrid, Result, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Topology of the denoiser.
///
/// Input channels are fixed at 5 (1 label + 4 image latent), output at 1.
/// `inject_levels` name the resolutions whose self-attention receives adapter
/// tokens (exactly two, matching the adapter stack); `cross_attn_levels` name
/// the resolutions with cross-attention on the global phrase embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_heads: usize,
    pub inject_levels: Vec<usize>,
    pub cross_attn_levels: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_heads: 1,
            inject_levels: vec![1, 2],
            cross_attn_levels: vec![1, 2],
            time_embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    /// Minimal topology for gradient verification.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4],
            attention_heads: 1,
            inject_levels: vec![1, 2],
            cross_attn_levels: vec![1, 2],
            time_embed_dim: 16,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Channel widths of the adapter-injected levels, coarsest last.
    pub fn adapter_channel_widths(&self) -> Vec<usize> {
        let mut levels = self.inject_levels.clone();
        levels.sort_unstable();
        levels.iter().map(|&l| self.channels(l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l < 2 {
            return Err(Error::parameter("need at least 2 resolutions"));
        }
        if self.inject_levels.len() != 2 {
            return Err(Error::parameter(
                "exactly 2 adapter-injected resolutions are supported",
            ));
        }
        for &lv in self.inject_levels.iter().chain(&self.cross_attn_levels) {
            if lv >= l {
                return Err(Error::parameter(format!("attention level {lv} out of range")));
            }
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim < 2 {
            return Err(Error::parameter("time_embed_dim must be even and >= 2"));
        }
        for &lv in &self.inject_levels {
            if self.channels(lv) % self.attention_heads != 0 {
                return Err(Error::parameter("heads must divide attention channels"));
            }
        }
        Ok(())
    }

    fn scale_of_level(&self, level: usize) -> Option<usize> {
        let mut sorted = self.inject_levels.clone();
        sorted.sort_unstable();
        sorted.iter().position(|&l| l == level)
    }
}

/// Sinusoidal position encoding of a timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = fl::<T>(angle.sin());
        out[half + i] = fl::<T>(angle.cos());
    }
    out
}

fn silu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| crate::nn::layers::silu_scalar(v)).collect()
}

fn silu_vec_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| d * crate::nn::layers::silu_grad_scalar(v))
        .collect()
}

/// Residual block with timestep conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub gn1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub t_proj: Linear<T>,
    pub gn2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
}

pub struct ResBlockCache<T> {
    x: LatentGrid<T>,
    gn1: GroupNormCache<T>,
    pre1: LatentGrid<T>,
    conv1_in: LatentGrid<T>,
    gn2: GroupNormCache<T>,
    pre2: LatentGrid<T>,
    conv2_in: LatentGrid<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(cin: usize, cout: usize, temb: usize, rng: &mut impl Rng) -> Self {
        Self {
            gn1: GroupNorm::new(cin),
            conv1: Conv2d::new(cin, cout, 3, 1, 1, rng),
            t_proj: Linear::new(temb, cout, 0.02, rng),
            gn2: GroupNorm::new(cout),
            // near-zero second conv keeps the block close to identity at init
            conv2: {
                let mut c = Conv2d::new(cout, cout, 3, 1, 1, rng);
                for v in c.w.data_mut() {
                    *v = *v * fl::<T>(0.05);
                }
                c
            },
            skip: if cin != cout {
                Some(Conv2d::new(cin, cout, 1, 1, 0, rng))
            } else {
                None
            },
        }
    }

    fn zeros_like(other: &Self) -> Self {
        Self {
            gn1: GroupNorm {
                groups: other.gn1.groups,
                gamma: crate::nn::Tensor::zeros(other.gn1.gamma.shape()),
                beta: crate::nn::Tensor::zeros(other.gn1.beta.shape()),
                eps: other.gn1.eps,
            },
            conv1: Conv2d::zeros(other.conv1.in_ch(), other.conv1.out_ch(), 3, 1, 1),
            t_proj: Linear::zeros(other.t_proj.in_dim(), other.t_proj.out_dim()),
            gn2: GroupNorm {
                groups: other.gn2.groups,
                gamma: crate::nn::Tensor::zeros(other.gn2.gamma.shape()),
                beta: crate::nn::Tensor::zeros(other.gn2.beta.shape()),
                eps: other.gn2.eps,
            },
            conv2: Conv2d::zeros(other.conv2.in_ch(), other.conv2.out_ch(), 3, 1, 1),
            skip: other
                .skip
                .as_ref()
                .map(|s| Conv2d::zeros(s.in_ch(), s.out_ch(), 1, 1, 0)),
        }
    }

    fn forward(&self, x: &LatentGrid<T>, t_silu: &[T]) -> (LatentGrid<T>, ResBlockCache<T>) {
        let (pre1, gn1c) = self.gn1.forward(x);
        let conv1_in = silu_grid(&pre1);
        let mut h = self.conv1.forward(&conv1_in);
        let tb = self.t_proj.forward_vec(t_silu);
        for cell in h.values_mut().chunks_exact_mut(tb.len()) {
            for (v, &b) in cell.iter_mut().zip(&tb) {
                *v += b;
            }
        }
        let (pre2, gn2c) = self.gn2.forward(&h);
        let conv2_in = silu_grid(&pre2);
        let e = self.conv2.forward(&conv2_in);
        let y = match &self.skip {
            Some(s) => s.forward(x).zip_map(&e, |a, b| a + b).expect("res skip"),
            None => x.zip_map(&e, |a, b| a + b).expect("res skip"),
        };
        (
            y,
            ResBlockCache {
                x: x.clone(),
                gn1: gn1c,
                pre1,
                conv1_in,
                gn2: gn2c,
                pre2,
                conv2_in,
            },
        )
    }

    /// Returns (dL/dx, dL/dt_silu).
    fn backward(
        &self,
        cache: &ResBlockCache<T>,
        t_silu: &[T],
        dy: &LatentGrid<T>,
        grad: &mut ResBlock<T>,
    ) -> (LatentGrid<T>, Vec<T>) {
        let d_conv2_in = self.conv2.backward(&cache.conv2_in, dy, &mut grad.conv2);
        let d_pre2 = silu_grid_backward(&cache.pre2, &d_conv2_in);
        let d_h = self.gn2.backward(&cache.gn2, &d_pre2, &mut grad.gn2);

        // timestep bias was broadcast over space: sum spatial grads per channel
        let cc = d_h.channels();
        let mut d_tb = vec![T::zero(); cc];
        for cell in d_h.values().chunks_exact(cc) {
            for (acc, &v) in d_tb.iter_mut().zip(cell) {
                *acc += v;
            }
        }
        let d_t_silu = self.t_proj.backward_vec(t_silu, &d_tb, &mut grad.t_proj);

        let d_conv1_in = self.conv1.backward(&cache.conv1_in, &d_h, &mut grad.conv1);
        let d_pre1 = silu_grid_backward(&cache.pre1, &d_conv1_in);
        let mut dx = self.gn1.backward(&cache.gn1, &d_pre1, &mut grad.gn1);

        match &self.skip {
            Some(s) => {
                let d_skip = s.backward(&cache.x, dy, grad.skip.as_mut().expect("skip grad"));
                dx = dx.zip_map(&d_skip, |a, b| a + b).expect("skip dx");
            }
            None => {
                dx = dx.zip_map(dy, |a, b| a + b).expect("skip dx");
            }
        }
        (dx, d_t_silu)
    }
}

/// Attention site: optional adapter-injected self-attention (pre-normalized,
/// residual) followed by optional cross-attention on the global embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSite<T> {
    pub self_attn: Option<(LayerNorm<T>, AttentionWeights<T>, usize)>,
    pub cross: Option<CrossAttention<T>>,
}

pub struct SiteCache<T> {
    ln: Option<LayerNormCache<T>>,
    self_cache: Option<SelfAttnCache<T>>,
    cross_cache: Option<CrossAttnCache<T>>,
    scale: Option<usize>,
}

impl<T: Scalar> AttnSite<T> {
    fn forward(
        &self,
        grid: &LatentGrid<T>,
        cond: &PhraseConditioning<T>,
    ) -> Result<(LatentGrid<T>, SiteCache<T>)> {
        let (h, w, c) = grid.shape();
        let mut tokens = Mat::from_vec(h * w, c, grid.values().to_vec())?;
        let mut cache = SiteCache {
            ln: None,
            self_cache: None,
            cross_cache: None,
            scale: None,
        };
        if let Some((ln, weights, scale)) = &self.self_attn {
            let adapters = cond.per_layer.get(*scale).ok_or_else(|| {
                Error::shape(format!("conditioning lacks adapter scale {scale}"))
            })?;
            let (normed, lnc) = ln.forward(&tokens);
            let (attn_out, sc) = injected_self_attention_cached(&normed, adapters, weights)?;
            for i in 0..tokens.data.len() {
                tokens.data[i] += attn_out.data[i];
            }
            cache.ln = Some(lnc);
            cache.self_cache = Some(sc);
            cache.scale = Some(*scale);
        }
        if let Some(cross) = &self.cross {
            let (out, cc) = cross.forward_cached(&tokens, &cond.global)?;
            tokens = out;
            cache.cross_cache = Some(cc);
        }
        let out = LatentGrid::from_vec(h, w, c, tokens.data)?;
        Ok((out, cache))
    }

    /// Backward; accumulates parameter grads and conditioning grads.
    fn backward(
        &self,
        cache: &SiteCache<T>,
        cond: &PhraseConditioning<T>,
        d_out: &LatentGrid<T>,
        grad: &mut AttnSite<T>,
        cond_grad: &mut CondGrad<T>,
    ) -> LatentGrid<T> {
        let (h, w, c) = d_out.shape();
        let mut d_tokens = Mat::from_vec(h * w, c, d_out.values().to_vec()).expect("site grad");

        if let (Some(cross), Some(cc)) = (&self.cross, &cache.cross_cache) {
            let gcross = grad.cross.as_mut().expect("cross grad slot");
            let (d_in, d_global) = cross.backward(cc, &cond.global, &d_tokens, gcross);
            for (a, b) in cond_grad.d_global.iter_mut().zip(d_global) {
                *a += b;
            }
            d_tokens = d_in;
        }

        if let (Some((ln, weights, scale)), Some(sc), Some(lnc)) =
            (&self.self_attn, &cache.self_cache, &cache.ln)
        {
            let (gln, gweights) = {
                let slot = grad.self_attn.as_mut().expect("self-attn grad slot");
                (&mut slot.0, &mut slot.1)
            };
            let (d_normed, d_adapters) =
                injected_self_attention_backward(sc, &d_tokens, weights, gweights);
            let d_from_ln = ln.backward(lnc, &d_normed, gln);
            for i in 0..d_tokens.data.len() {
                d_tokens.data[i] += d_from_ln.data[i];
            }
            let target = &mut cond_grad.d_per_layer[*scale];
            for i in 0..target.data.len() {
                target.data[i] += d_adapters.data[i];
            }
        }
        LatentGrid::from_vec(h, w, c, d_tokens.data).expect("site dx")
    }
}

/// Gradient of the loss w.r.t. a phrase conditioning input.
#[derive(Debug, Clone)]
pub struct CondGrad<T> {
    pub d_global: Vec<T>,
    pub d_per_layer: Vec<Mat<T>>,
}

/// The denoising U-Net Φ.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub time_mlp1: Linear<T>,
    pub time_mlp2: Linear<T>,
    pub stem: Conv2d<T>,
    pub enc_res: Vec<ResBlock<T>>,
    pub enc_site: Vec<Option<AttnSite<T>>>,
    pub down: Vec<Conv2d<T>>,
    pub mid_res1: ResBlock<T>,
    pub mid_site: Option<AttnSite<T>>,
    pub mid_res2: ResBlock<T>,
    pub up: Vec<Conv2d<T>>,
    pub dec_res: Vec<ResBlock<T>>,
    pub dec_site: Vec<Option<AttnSite<T>>>,
    pub out_norm: GroupNorm<T>,
    pub out_conv: Conv2d<T>,
}

/// Input channels: 1 label latent + 4 image latent.
pub const INPUT_CHANNELS: usize = 5;

fn make_site<T: Scalar, R: Rng>(
    config: &DenoiserConfig,
    text_dim: usize,
    level: usize,
    rng: &mut R,
) -> Option<AttnSite<T>> {
    let inject = config.inject_levels.contains(&level);
    let cross = config.cross_attn_levels.contains(&level);
    if !inject && !cross {
        return None;
    }
    let c = config.channels(level);
    Some(AttnSite {
        self_attn: if inject {
            let scale = config.scale_of_level(level).expect("inject scale");
            Some((
                LayerNorm::new(c),
                AttentionWeights::new(c, config.attention_heads, rng),
                scale,
            ))
        } else {
            None
        },
        cross: if cross {
            Some(CrossAttention::new(c, text_dim, rng))
        } else {
            None
        },
    })
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, text_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let l = config.levels();
        let temb = config.time_embed_dim;

        let mut enc_res = Vec::new();
        let mut enc_site = Vec::new();
        let mut down = Vec::new();
        for i in 0..l - 1 {
            enc_res.push(ResBlock::new(config.channels(i), config.channels(i), temb, rng));
            enc_site.push(make_site(&config, text_dim, i, rng));
            down.push(Conv2d::new(config.channels(i), config.channels(i + 1), 3, 2, 1, rng));
        }
        let cm = config.channels(l - 1);
        let mid_res1 = ResBlock::new(cm, cm, temb, rng);
        let mid_site = make_site(&config, text_dim, l - 1, rng);
        let mid_res2 = ResBlock::new(cm, cm, temb, rng);

        let mut up = Vec::new();
        let mut dec_res = Vec::new();
        let mut dec_site = Vec::new();
        for i in (0..l - 1).rev() {
            up.push(Conv2d::new(config.channels(i + 1), config.channels(i), 3, 1, 1, rng));
            dec_res.push(ResBlock::new(2 * config.channels(i), config.channels(i), temb, rng));
            dec_site.push(make_site(&config, text_dim, i, rng));
        }

        let out_conv = Conv2d::zeros(config.channels(0), 1, 3, 1, 1);
        Ok(Self {
            time_mlp1: Linear::new(temb, temb, (1.0 / temb as f64).sqrt(), rng),
            time_mlp2: Linear::new(temb, temb, (1.0 / temb as f64).sqrt(), rng),
            stem: Conv2d::new(INPUT_CHANNELS, config.channels(0), 3, 1, 1, rng),
            enc_res,
            enc_site,
            down,
            mid_res1,
            mid_site,
            mid_res2,
            up,
            dec_res,
            dec_site,
            out_norm: GroupNorm::new(config.channels(0)),
            out_conv,
            config,
        })
    }

    /// Same-shaped zero structure for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let zero_site = |s: &Option<AttnSite<T>>| -> Option<AttnSite<T>> {
            s.as_ref().map(|site| AttnSite {
                self_attn: site.self_attn.as_ref().map(|(ln, w, sc)| {
                    (
                        LayerNorm {
                            gamma: crate::nn::Tensor::zeros(ln.gamma.shape()),
                            beta: crate::nn::Tensor::zeros(ln.beta.shape()),
                            eps: ln.eps,
                        },
                        AttentionWeights::zeros(w.channels(), w.heads),
                        *sc,
                    )
                }),
                cross: site
                    .cross
                    .as_ref()
                    .map(|c| CrossAttention::zeros(c.channels(), c.text_dim())),
            })
        };
        Self {
            config: self.config.clone(),
            time_mlp1: Linear::zeros(self.time_mlp1.in_dim(), self.time_mlp1.out_dim()),
            time_mlp2: Linear::zeros(self.time_mlp2.in_dim(), self.time_mlp2.out_dim()),
            stem: Conv2d::zeros(self.stem.in_ch(), self.stem.out_ch(), 3, 1, 1),
            enc_res: self.enc_res.iter().map(ResBlock::zeros_like).collect(),
            enc_site: self.enc_site.iter().map(zero_site).collect(),
            down: self
                .down
                .iter()
                .map(|c| Conv2d::zeros(c.in_ch(), c.out_ch(), 3, 2, 1))
                .collect(),
            mid_res1: ResBlock::zeros_like(&self.mid_res1),
            mid_site: zero_site(&self.mid_site),
            mid_res2: ResBlock::zeros_like(&self.mid_res2),
            up: self
                .up
                .iter()
                .map(|c| Conv2d::zeros(c.in_ch(), c.out_ch(), 3, 1, 1))
                .collect(),
            dec_res: self.dec_res.iter().map(ResBlock::zeros_like).collect(),
            dec_site: self.dec_site.iter().map(zero_site).collect(),
            out_norm: GroupNorm {
                groups: self.out_norm.groups,
                gamma: crate::nn::Tensor::zeros(self.out_norm.gamma.shape()),
                beta: crate::nn::Tensor::zeros(self.out_norm.beta.shape()),
                eps: self.out_norm.eps,
            },
            out_conv: Conv2d::zeros(self.out_conv.in_ch(), 1, 3, 1, 1),
        }
    }

    fn validate_inputs(
        &self,
        xt: &LatentGrid<T>,
        image_latent: &LatentGrid<T>,
        cond: &PhraseConditioning<T>,
    ) -> Result<()> {
        if xt.channels() != 1 {
            return Err(Error::shape(format!(
                "label latent must have 1 channel, got {}",
                xt.channels()
            )));
        }
        if image_latent.channels() != 4 {
            return Err(Error::shape(format!(
                "image latent must have 4 channels, got {}",
                image_latent.channels()
            )));
        }
        if (xt.height(), xt.width()) != (image_latent.height(), image_latent.width()) {
            return Err(Error::shape(format!(
                "label/image latents misaligned: {:?} vs {:?}",
                xt.shape(),
                image_latent.shape()
            )));
        }
        let div = 1usize << (self.config.levels() - 1);
        if xt.height() % div != 0 || xt.width() % div != 0 {
            return Err(Error::shape(format!(
                "latent dims {}x{} must divide by {div} for {} resolutions",
                xt.height(),
                xt.width(),
                self.config.levels()
            )));
        }
        let widths = self.config.adapter_channel_widths();
        if cond.per_layer.len() != widths.len() {
            return Err(Error::shape(format!(
                "conditioning has {} adapter scales, denoiser wants {}",
                cond.per_layer.len(),
                widths.len()
            )));
        }
        for (block, &w) in cond.per_layer.iter().zip(&widths) {
            if block.cols != w {
                return Err(Error::shape(format!(
                    "adapter width {} does not match denoiser layer width {w}",
                    block.cols
                )));
            }
        }
        Ok(())
    }

    /// Predict the noise for a noisy label latent.
    pub fn forward(
        &self,
        xt: &LatentGrid<T>,
        image_latent: &LatentGrid<T>,
        t: usize,
        cond: &PhraseConditioning<T>,
    ) -> Result<LatentGrid<T>> {
        Ok(self.forward_cached(xt, image_latent, t, cond)?.0)
    }

    pub fn forward_cached(
        &self,
        xt: &LatentGrid<T>,
        image_latent: &LatentGrid<T>,
        t: usize,
        cond: &PhraseConditioning<T>,
    ) -> Result<(LatentGrid<T>, DenoiserTape<T>)> {
        self.validate_inputs(xt, image_latent, cond)?;
        let l = self.config.levels();

        // timestep pathway
        let sin = timestep_embedding::<T>(t, self.config.time_embed_dim);
        let z1 = self.time_mlp1.forward_vec(&sin);
        let z2 = silu_vec(&z1);
        let emb = self.time_mlp2.forward_vec(&z2);
        let t_silu = silu_vec(&emb);

        let input = concat_channels(xt, image_latent);
        let mut h = self.stem.forward(&input);

        let mut enc_caches = Vec::with_capacity(l - 1);
        let mut skips: Vec<LatentGrid<T>> = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let (after_res, res_cache) = self.enc_res[i].forward(&h, &t_silu);
            let (after_site, site_cache) = match &self.enc_site[i] {
                Some(site) => {
                    let (o, c) = site.forward(&after_res, cond)?;
                    (o, Some(c))
                }
                None => (after_res, None),
            };
            skips.push(after_site.clone());
            let down_out = self.down[i].forward(&after_site);
            enc_caches.push(EncLevelTape {
                res: res_cache,
                site: site_cache,
                down_in: after_site,
            });
            h = down_out;
        }

        let (m1, mid1_cache) = self.mid_res1.forward(&h, &t_silu);
        let (m_site, mid_site_cache) = match &self.mid_site {
            Some(site) => {
                let (o, c) = site.forward(&m1, cond)?;
                (o, Some(c))
            }
            None => (m1.clone(), None),
        };
        let (m2, mid2_cache) = self.mid_res2.forward(&m_site, &t_silu);
        let mut hdec = m2;

        let mut dec_caches = Vec::with_capacity(l - 1);
        for (j, i) in (0..l - 1).rev().enumerate() {
            let up_in = upsample2_nearest(&hdec);
            let up_out = self.up[j].forward(&up_in);
            let cat = concat_channels(&up_out, &skips[i]);
            let (after_res, res_cache) = self.dec_res[j].forward(&cat, &t_silu);
            let (after_site, site_cache) = match &self.dec_site[j] {
                Some(site) => {
                    let (o, c) = site.forward(&after_res, cond)?;
                    (o, Some(c))
                }
                None => (after_res, None),
            };
            dec_caches.push(DecLevelTape {
                up_in,
                res: res_cache,
                site: site_cache,
            });
            hdec = after_site;
        }

        let (normed, out_gn_cache) = self.out_norm.forward(&hdec);
        let out_conv_in = silu_grid(&normed);
        let eps = self.out_conv.forward(&out_conv_in);

        let tape = DenoiserTape {
            input,
            t,
            sin,
            z1,
            z2,
            emb,
            t_silu,
            enc: enc_caches,
            mid1: mid1_cache,
            mid_site: mid_site_cache,
            mid2: mid2_cache,
            dec: dec_caches,
            out_gn: out_gn_cache,
            out_pre: normed,
            out_conv_in,
        };
        Ok((eps, tape))
    }

    /// Full backward pass; accumulates parameter grads into `grad` and
    /// returns the gradient w.r.t. the conditioning.
    pub fn backward(
        &self,
        tape: &DenoiserTape<T>,
        cond: &PhraseConditioning<T>,
        d_eps: &LatentGrid<T>,
        grad: &mut Denoiser<T>,
    ) -> CondGrad<T> {
        let l = self.config.levels();
        let widths = self.config.adapter_channel_widths();
        let m_tokens = cond.per_layer.first().map(|b| b.rows).unwrap_or(0);
        let mut cond_grad = CondGrad {
            d_global: vec![T::zero(); cond.global.len()],
            d_per_layer: widths.iter().map(|&w| Mat::zeros(m_tokens, w)).collect(),
        };
        let mut d_t_silu_total = vec![T::zero(); self.config.time_embed_dim];
        let add_t = |d: Vec<T>, total: &mut Vec<T>| {
            for (a, b) in total.iter_mut().zip(d) {
                *a += b;
            }
        };

        // output head
        let d_out_conv_in = self
            .out_conv
            .backward(&tape.out_conv_in, d_eps, &mut grad.out_conv);
        let d_normed = silu_grid_backward(&tape.out_pre, &d_out_conv_in);
        let mut d = self.out_norm.backward(&tape.out_gn, &d_normed, &mut grad.out_norm);

        // decoder levels, unwinding in reverse build order (finest first)
        let mut d_skips: Vec<Option<LatentGrid<T>>> = vec![None; l - 1];
        for j in (0..l - 1).rev() {
            let i = l - 2 - j; // encoder level this decoder stage pairs with
            let tape_j = &tape.dec[j];
            if let (Some(site), Some(site_cache)) = (&self.dec_site[j], &tape_j.site) {
                let gsite = grad.dec_site[j].as_mut().expect("dec site grad");
                d = site.backward(site_cache, cond, &d, gsite, &mut cond_grad);
            }
            let (d_cat, d_t) =
                self.dec_res[j].backward(&tape_j.res, &tape.t_silu, &d, &mut grad.dec_res[j]);
            add_t(d_t, &mut d_t_silu_total);
            let c_up = self.up[j].out_ch();
            let (d_up_out, d_skip) = split_channels(&d_cat, c_up);
            d_skips[i] = Some(d_skip);
            let d_up_in = self.up[j].backward(&tape_j.up_in, &d_up_out, &mut grad.up[j]);
            d = upsample2_nearest_backward(&d_up_in);
        }

        // middle
        let (d_mid, d_t) = self
            .mid_res2
            .backward(&tape.mid2, &tape.t_silu, &d, &mut grad.mid_res2);
        add_t(d_t, &mut d_t_silu_total);
        let mut d = d_mid;
        if let (Some(site), Some(site_cache)) = (&self.mid_site, &tape.mid_site) {
            let gsite = grad.mid_site.as_mut().expect("mid site grad");
            d = site.backward(site_cache, cond, &d, gsite, &mut cond_grad);
        }
        let (d_mid1, d_t) = self
            .mid_res1
            .backward(&tape.mid1, &tape.t_silu, &d, &mut grad.mid_res1);
        add_t(d_t, &mut d_t_silu_total);
        let mut d = d_mid1;

        // encoder levels in reverse
        for i in (0..l - 1).rev() {
            let tape_i = &tape.enc[i];
            let mut d_site_out = self.down[i].backward(&tape_i.down_in, &d, &mut grad.down[i]);
            if let Some(d_skip) = &d_skips[i] {
                d_site_out = d_site_out.zip_map(d_skip, |a, b| a + b).expect("skip grad");
            }
            let d_after_res = match (&self.enc_site[i], &tape_i.site) {
                (Some(site), Some(site_cache)) => {
                    let gsite = grad.enc_site[i].as_mut().expect("enc site grad");
                    site.backward(site_cache, cond, &d_site_out, gsite, &mut cond_grad)
                }
                _ => d_site_out,
            };
            let (d_in, d_t) = self.enc_res[i].backward(
                &tape_i.res,
                &tape.t_silu,
                &d_after_res,
                &mut grad.enc_res[i],
            );
            add_t(d_t, &mut d_t_silu_total);
            d = d_in;
        }

        // stem (input gradient discarded: xt and the image latent are data)
        let _ = self.stem.backward(&tape.input, &d, &mut grad.stem);

        // timestep pathway
        let d_emb = silu_vec_backward(&tape.emb, &d_t_silu_total);
        let d_z2 = self.time_mlp2.backward_vec(&tape.z2, &d_emb, &mut grad.time_mlp2);
        let d_z1 = silu_vec_backward(&tape.z1, &d_z2);
        let _ = self.time_mlp1.backward_vec(&tape.sin, &d_z1, &mut grad.time_mlp1);

        cond_grad
    }
}

/// Encoder-level intermediates.
pub struct EncLevelTape<T> {
    res: ResBlockCache<T>,
    site: Option<SiteCache<T>>,
    down_in: LatentGrid<T>,
}

/// Decoder-level intermediates.
pub struct DecLevelTape<T> {
    up_in: LatentGrid<T>,
    res: ResBlockCache<T>,
    site: Option<SiteCache<T>>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct DenoiserTape<T> {
    input: LatentGrid<T>,
    pub t: usize,
    sin: Vec<T>,
    z1: Vec<T>,
    z2: Vec<T>,
    emb: Vec<T>,
    t_silu: Vec<T>,
    enc: Vec<EncLevelTape<T>>,
    mid1: ResBlockCache<T>,
    mid_site: Option<SiteCache<T>>,
    mid2: ResBlockCache<T>,
    dec: Vec<DecLevelTape<T>>,
    out_gn: GroupNormCache<T>,
    out_pre: LatentGrid<T>,
    out_conv_in: LatentGrid<T>,
}
