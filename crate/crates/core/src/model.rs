//! The full trainable bundle: denoiser, text embedder, adapter stack, null
//! embeddings, plus the frozen image encoder and the optional learned label
//! decoder. Parameters are reachable through named visitation, which drives
//! the optimizer, checkpointing and finite-difference verification.

use crate::codec::{ImageLatentEncoder, LabelDecoder};
use crate::denoiser::{CondGrad, Denoiser, DenoiserConfig};
use crate::nn::attention::{AttentionWeights, CrossAttention};
use crate::nn::layers::{Conv2d, GroupNorm, LayerNorm, Linear};
use crate::nn::Tensor;
use crate::rng::rng_from_seed;
use crate::text::{
    null_conditioning, project_adapters, project_adapters_backward, AdapterStack, NullEmbeddings,
    PhraseConditioning, TextEmbedder,
};
use crate::{Error, Result, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Named access to every parameter tensor in a component.
pub trait VisitParams<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>));
}

impl<T: Scalar> VisitParams<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl<T: Scalar> VisitParams<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl<T: Scalar> VisitParams<T> for GroupNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<T: Scalar> VisitParams<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<T: Scalar> VisitParams<T> for AttentionWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

impl<T: Scalar> VisitParams<T> for CrossAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

impl<T: Scalar> VisitParams<T> for crate::denoiser::ResBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.gn1.visit(&format!("{prefix}.gn1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.t_proj.visit(&format!("{prefix}.t_proj"), f);
        self.gn2.visit(&format!("{prefix}.gn2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&format!("{prefix}.skip"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.gn1.visit_mut(&format!("{prefix}.gn1"), f);
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.t_proj.visit_mut(&format!("{prefix}.t_proj"), f);
        self.gn2.visit_mut(&format!("{prefix}.gn2"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&format!("{prefix}.skip"), f);
        }
    }
}

impl<T: Scalar> VisitParams<T> for crate::denoiser::AttnSite<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        if let Some((ln, w, _)) = &self.self_attn {
            ln.visit(&format!("{prefix}.ln"), f);
            w.visit(&format!("{prefix}.self"), f);
        }
        if let Some(c) = &self.cross {
            c.visit(&format!("{prefix}.cross"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        if let Some((ln, w, _)) = &mut self.self_attn {
            ln.visit_mut(&format!("{prefix}.ln"), f);
            w.visit_mut(&format!("{prefix}.self"), f);
        }
        if let Some(c) = &mut self.cross {
            c.visit_mut(&format!("{prefix}.cross"), f);
        }
    }
}

impl<T: Scalar> VisitParams<T> for Denoiser<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.time_mlp1.visit(&format!("{prefix}.time_mlp1"), f);
        self.time_mlp2.visit(&format!("{prefix}.time_mlp2"), f);
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, r) in self.enc_res.iter().enumerate() {
            r.visit(&format!("{prefix}.enc{i}.res"), f);
        }
        for (i, s) in self.enc_site.iter().enumerate() {
            if let Some(site) = s {
                site.visit(&format!("{prefix}.enc{i}.attn"), f);
            }
        }
        for (i, d) in self.down.iter().enumerate() {
            d.visit(&format!("{prefix}.down{i}"), f);
        }
        self.mid_res1.visit(&format!("{prefix}.mid.res1"), f);
        if let Some(site) = &self.mid_site {
            site.visit(&format!("{prefix}.mid.attn"), f);
        }
        self.mid_res2.visit(&format!("{prefix}.mid.res2"), f);
        for (i, u) in self.up.iter().enumerate() {
            u.visit(&format!("{prefix}.up{i}"), f);
        }
        for (i, r) in self.dec_res.iter().enumerate() {
            r.visit(&format!("{prefix}.dec{i}.res"), f);
        }
        for (i, s) in self.dec_site.iter().enumerate() {
            if let Some(site) = s {
                site.visit(&format!("{prefix}.dec{i}.attn"), f);
            }
        }
        self.out_norm.visit(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit(&format!("{prefix}.out_conv"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.time_mlp1.visit_mut(&format!("{prefix}.time_mlp1"), f);
        self.time_mlp2.visit_mut(&format!("{prefix}.time_mlp2"), f);
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (i, r) in self.enc_res.iter_mut().enumerate() {
            r.visit_mut(&format!("{prefix}.enc{i}.res"), f);
        }
        for (i, s) in self.enc_site.iter_mut().enumerate() {
            if let Some(site) = s {
                site.visit_mut(&format!("{prefix}.enc{i}.attn"), f);
            }
        }
        for (i, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}.down{i}"), f);
        }
        self.mid_res1.visit_mut(&format!("{prefix}.mid.res1"), f);
        if let Some(site) = &mut self.mid_site {
            site.visit_mut(&format!("{prefix}.mid.attn"), f);
        }
        self.mid_res2.visit_mut(&format!("{prefix}.mid.res2"), f);
        for (i, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.up{i}"), f);
        }
        for (i, r) in self.dec_res.iter_mut().enumerate() {
            r.visit_mut(&format!("{prefix}.dec{i}.res"), f);
        }
        for (i, s) in self.dec_site.iter_mut().enumerate() {
            if let Some(site) = s {
                site.visit_mut(&format!("{prefix}.dec{i}.attn"), f);
            }
        }
        self.out_norm.visit_mut(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit_mut(&format!("{prefix}.out_conv"), f);
    }
}

impl<T: Scalar> VisitParams<T> for TextEmbedder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.embeddings"), &self.embeddings);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.embeddings"), &mut self.embeddings);
    }
}

impl<T: Scalar> VisitParams<T> for AdapterStack<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.projections().iter().enumerate() {
            p.visit(&format!("{prefix}.scale{i}"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        for (i, p) in self.projections_mut().iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.scale{i}"), f);
        }
    }
}

impl<T: Scalar> VisitParams<T> for NullEmbeddings<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.global"), &self.global);
        for (i, t) in self.per_layer.iter().enumerate() {
            f(format!("{prefix}.scale{i}"), t);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(format!("{prefix}.global"), &mut self.global);
        for (i, t) in self.per_layer.iter_mut().enumerate() {
            f(format!("{prefix}.scale{i}"), t);
        }
    }
}

impl<T: Scalar> VisitParams<T> for ImageLatentEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
    }
}

impl<T: Scalar> VisitParams<T> for LabelDecoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, c) in self.ups.iter().enumerate() {
            c.visit(&format!("{prefix}.up{i}"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (i, c) in self.ups.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.up{i}"), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

/// Hyperparameters fixing every component's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    /// Global text embedding dimension D_txt.
    pub text_dim: usize,
    /// Adapter tokens per scale M.
    pub adapter_tokens: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Desk-scale default for 64x64 scenes.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            text_dim: 32,
            adapter_tokens: 4,
            vocab_size,
        }
    }

    /// Minimal shapes for gradient verification.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            denoiser: DenoiserConfig::tiny(),
            text_dim: 8,
            adapter_tokens: 2,
            vocab_size,
        }
    }
}

/// Parameter groups, distinguishing trainable from frozen tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Denoiser,
    Text,
    Adapters,
    Null,
    ImageEncoder,
    LabelDecoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("denoiser") {
            ParamGroup::Denoiser
        } else if name.starts_with("text") {
            ParamGroup::Text
        } else if name.starts_with("adapters") {
            ParamGroup::Adapters
        } else if name.starts_with("null") {
            ParamGroup::Null
        } else if name.starts_with("image_encoder") {
            ParamGroup::ImageEncoder
        } else {
            ParamGroup::LabelDecoder
        }
    }

    /// Whether the diffusion training loop updates this group.
    pub fn trainable(self) -> bool {
        matches!(
            self,
            ParamGroup::Denoiser | ParamGroup::Text | ParamGroup::Adapters | ParamGroup::Null
        )
    }
}

/// The complete label-diffusion model.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDiffusionModel<T> {
    pub config: ModelConfig,
    pub denoiser: Denoiser<T>,
    pub text: TextEmbedder<T>,
    pub adapters: AdapterStack<T>,
    pub null_cond: NullEmbeddings<T>,
    pub image_encoder: ImageLatentEncoder<T>,
    pub label_decoder: Option<LabelDecoder<T>>,
}

impl<T: Scalar> LabelDiffusionModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let denoiser = Denoiser::new(config.denoiser.clone(), config.text_dim, &mut rng)?;
        let widths = config.denoiser.adapter_channel_widths();
        let text = TextEmbedder::new(config.vocab_size, config.text_dim, &mut rng);
        let adapters = AdapterStack::new(config.text_dim, config.adapter_tokens, &widths, &mut rng)?;
        let null_cond = NullEmbeddings::new(config.text_dim, config.adapter_tokens, &widths, &mut rng);
        Ok(Self {
            config,
            denoiser,
            text,
            adapters,
            null_cond,
            image_encoder: ImageLatentEncoder::new(),
            label_decoder: None,
        })
    }

    /// Same-shaped zero structure for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut_all(&mut |_, t| t.fill(T::zero()));
        z
    }

    pub fn visit_all<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.denoiser.visit("denoiser", f);
        self.text.visit("text", f);
        self.adapters.visit("adapters", f);
        self.null_cond.visit("null", f);
        self.image_encoder.visit("image_encoder", f);
        if let Some(d) = &self.label_decoder {
            d.visit("label_decoder", f);
        }
    }

    pub fn visit_mut_all<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.denoiser.visit_mut("denoiser", f);
        self.text.visit_mut("text", f);
        self.adapters.visit_mut("adapters", f);
        self.null_cond.visit_mut("null", f);
        self.image_encoder.visit_mut("image_encoder", f);
        if let Some(d) = &mut self.label_decoder {
            d.visit_mut("label_decoder", f);
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_all(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut_all(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_all(&mut |_, t| ok &= t.all_finite());
        ok
    }

    /// Overwrite every parameter with seeded Gaussian noise. Test support:
    /// activates paths that are zero at init (output conv, attention W^O) so
    /// gradient verification exercises the whole graph.
    pub fn randomize_parameters(&mut self, std: f64, seed: u64) {
        let mut rng = rng_from_seed(seed);
        self.visit_mut_all(&mut |_, t| {
            for v in t.data_mut() {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                *v = T::from_f64_c(z * std);
            }
        });
    }

    /// Conditioning for a tokenized phrase.
    pub fn phrase_conditioning(&self, token_ids: &[usize]) -> Result<PhraseConditioning<T>> {
        for &id in token_ids {
            if id >= self.config.vocab_size {
                return Err(Error::parameter(format!(
                    "token id {id} outside vocab of {}",
                    self.config.vocab_size
                )));
            }
        }
        let global = self.text.embed_ids(token_ids)?;
        let per_layer = project_adapters(&global, &self.adapters)?;
        Ok(PhraseConditioning {
            global,
            per_layer,
            is_null: false,
        })
    }

    /// The learned unconditional ("none") conditioning.
    pub fn null_conditioning(&self) -> PhraseConditioning<T> {
        null_conditioning(&self.null_cond)
    }

    /// Route a conditioning gradient into the phrase pathway parameters.
    pub fn phrase_cond_backward(
        &self,
        token_ids: &[usize],
        cond: &PhraseConditioning<T>,
        cgrad: &CondGrad<T>,
        grad: &mut Self,
    ) {
        let mut d_global = cgrad.d_global.clone();
        let d_from_adapters =
            project_adapters_backward(&cond.global, &self.adapters, &cgrad.d_per_layer, &mut grad.adapters);
        for (a, b) in d_global.iter_mut().zip(d_from_adapters) {
            *a += b;
        }
        self.text.embed_ids_backward(token_ids, &d_global, &mut grad.text);
    }

    /// Route a conditioning gradient into the null-embedding parameters.
    pub fn null_cond_backward(&self, cgrad: &CondGrad<T>, grad: &mut Self) {
        for (a, &b) in grad
            .null_cond
            .global
            .data_mut()
            .iter_mut()
            .zip(&cgrad.d_global)
        {
            *a = *a + b;
        }
        for (t, m) in grad.null_cond.per_layer.iter_mut().zip(&cgrad.d_per_layer) {
            for (a, &b) in t.data_mut().iter_mut().zip(&m.data) {
                *a = *a + b;
            }
        }
    }

    /// Convert parameters (not config) to another scalar type.
    pub fn cast<U: Scalar>(&self) -> LabelDiffusionModel<U> {
        let mut target = LabelDiffusionModel::<U>::new(self.config.clone(), 0)
            .expect("config already validated");
        if self.label_decoder.is_some() {
            target.label_decoder = Some(LabelDecoder::init(0));
        }
        let src = self.named_params();
        let mut idx = 0usize;
        target.visit_mut_all(&mut |name, t| {
            let (src_name, src_t) = &src[idx];
            assert_eq!(&name, src_name, "visitation order mismatch");
            *t = src_t.cast::<U>();
            idx += 1;
        });
        target
    }
}
