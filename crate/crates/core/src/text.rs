//! Phrase conditioning: global text embeddings, per-scale adapter features,
//! learned null ("none") embeddings and the conditional-dropout operator.

use crate::nn::layers::Linear;
use crate::nn::{Mat, Tensor};
use crate::{Error, Result, Scalar};
use rand::Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Reserved id for out-of-vocabulary words.
pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Closed token table over the synthetic phrase grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseVocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl PhraseVocabulary {
    /// Build from a token list; an `<unk>` entry is prepended when missing.
    pub fn new(mut tokens: Vec<String>) -> Self {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            tokens.insert(0, UNK_TOKEN.to_string());
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Tokenize a whitespace-separated phrase into dense ids.
    pub fn encode(&self, phrase: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = phrase.split_whitespace().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            return Err(Error::parameter("empty phrase"));
        }
        Ok(ids)
    }

    /// One token per line; id = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.is_empty() {
                tokens.push(line);
            }
        }
        if tokens.is_empty() {
            return Err(Error::data("empty vocabulary file"));
        }
        Ok(Self::new(tokens))
    }
}

/// Global embedding plus per-scale adapter token features.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseConditioning<T> {
    /// Pooled D_txt phrase embedding.
    pub global: Vec<T>,
    /// One M×C_l token block per adapter scale.
    pub per_layer: Vec<Mat<T>>,
    pub is_null: bool,
}

/// Learned word-embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedder<T> {
    /// [vocab, D_txt]
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> TextEmbedder<T> {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            embeddings: Tensor::randn(&[vocab_size, dim], 0.2, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    /// Mean of word embeddings. Accumulation runs in sorted-id order, so a
    /// permuted phrase produces the bitwise-identical vector.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Vec<T>> {
        if ids.is_empty() {
            return Err(Error::parameter("empty phrase"));
        }
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        let d = self.dim();
        let mut out = vec![T::zero(); d];
        for &id in &sorted {
            let row = &self.embeddings.data()[id * d..(id + 1) * d];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_f64_c(ids.len() as f64);
        for o in &mut out {
            *o = *o * inv;
        }
        Ok(out)
    }

    /// Distribute the pooled gradient back over the word rows.
    pub fn embed_ids_backward(&self, ids: &[usize], d_global: &[T], grad: &mut TextEmbedder<T>) {
        let d = self.dim();
        let inv = T::one() / T::from_f64_c(ids.len() as f64);
        for &id in ids {
            let row = &mut grad.embeddings.data_mut()[id * d..(id + 1) * d];
            for (g, &dg) in row.iter_mut().zip(d_global) {
                *g += dg * inv;
            }
        }
    }
}

/// Mean-pooled embedding of a whitespace-separated phrase.
pub fn embed_phrase<T: Scalar>(
    phrase: &str,
    vocab: &PhraseVocabulary,
    embedder: &TextEmbedder<T>,
) -> Result<Vec<T>> {
    embedder.embed_ids(&vocab.encode(phrase)?)
}

/// One learnable projection `D_txt → M·C_l` per adapter scale; exactly two
/// scales, attached to the two coarsest denoiser resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack<T> {
    projections: Vec<Linear<T>>,
    tokens_per_scale: usize,
    channel_widths: Vec<usize>,
}

impl<T: Scalar> AdapterStack<T> {
    pub fn new(
        text_dim: usize,
        tokens_per_scale: usize,
        channel_widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channel_widths.len() != 2 {
            return Err(Error::parameter(format!(
                "adapter stack requires exactly 2 scales, got {}",
                channel_widths.len()
            )));
        }
        let projections = channel_widths
            .iter()
            .map(|&c| Linear::new(text_dim, tokens_per_scale * c, 0.02, rng))
            .collect();
        Ok(Self {
            projections,
            tokens_per_scale,
            channel_widths: channel_widths.to_vec(),
        })
    }

    pub fn num_scales(&self) -> usize {
        self.projections.len()
    }

    pub fn tokens_per_scale(&self) -> usize {
        self.tokens_per_scale
    }

    pub fn channel_widths(&self) -> &[usize] {
        &self.channel_widths
    }

    pub fn projections(&self) -> &[Linear<T>] {
        &self.projections
    }

    pub fn projections_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.projections
    }
}

/// Project the global embedding into per-scale M×C_l adapter token blocks.
pub fn project_adapters<T: Scalar>(
    global: &[T],
    adapters: &AdapterStack<T>,
) -> Result<Vec<Mat<T>>> {
    let mut out = Vec::with_capacity(adapters.num_scales());
    for (proj, &c) in adapters.projections.iter().zip(&adapters.channel_widths) {
        if proj.in_dim() != global.len() {
            return Err(Error::shape(format!(
                "adapter projection expects D_txt {}, got {}",
                proj.in_dim(),
                global.len()
            )));
        }
        let flat = proj.forward_vec(global);
        out.push(Mat::from_vec(adapters.tokens_per_scale, c, flat)?);
    }
    Ok(out)
}

/// Backward of [`project_adapters`]: accumulates projection grads and the
/// gradient w.r.t. the global embedding.
pub fn project_adapters_backward<T: Scalar>(
    global: &[T],
    adapters: &AdapterStack<T>,
    d_per_layer: &[Mat<T>],
    grad: &mut AdapterStack<T>,
) -> Vec<T> {
    let mut d_global = vec![T::zero(); global.len()];
    for ((proj, gproj), dm) in adapters
        .projections
        .iter()
        .zip(grad.projections.iter_mut())
        .zip(d_per_layer)
    {
        let dx = proj.backward_vec(global, &dm.data, gproj);
        for (a, b) in d_global.iter_mut().zip(dx) {
            *a += b;
        }
    }
    d_global
}

/// Learned "none" conditioning used for the unconditional branch.
#[derive(Debug, Clone, PartialEq)]
pub struct NullEmbeddings<T> {
    /// D_txt null global vector.
    pub global: Tensor<T>,
    /// One M×C_l null token block per adapter scale.
    pub per_layer: Vec<Tensor<T>>,
}

impl<T: Scalar> NullEmbeddings<T> {
    pub fn new(
        text_dim: usize,
        tokens_per_scale: usize,
        channel_widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            global: Tensor::randn(&[text_dim], 0.2, rng),
            per_layer: channel_widths
                .iter()
                .map(|&c| Tensor::randn(&[tokens_per_scale, c], 0.02, rng))
                .collect(),
        }
    }
}

/// Materialize the null conditioning (`is_null = true`).
pub fn null_conditioning<T: Scalar>(null: &NullEmbeddings<T>) -> PhraseConditioning<T> {
    PhraseConditioning {
        global: null.global.data().to_vec(),
        per_layer: null
            .per_layer
            .iter()
            .map(|t| {
                Mat::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec())
                    .expect("null token block")
            })
            .collect(),
        is_null: true,
    }
}

/// With probability `p_drop` replace the whole conditioning (global and all
/// adapter blocks together) by the null conditioning.
pub fn conditional_dropout<T: Scalar>(
    cond: PhraseConditioning<T>,
    p_drop: f64,
    null: &NullEmbeddings<T>,
    rng: &mut impl Rng,
) -> PhraseConditioning<T> {
    debug_assert!((0.0..=1.0).contains(&p_drop));
    let u: f64 = rng.gen();
    if u < p_drop {
        null_conditioning(null)
    } else {
        cond
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn small_vocab() -> PhraseVocabulary {
        PhraseVocabulary::new(
            ["red", "blue", "circle", "square", "two"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }

    #[test]
    fn vocab_ids_dense_and_unk_reserved() {
        let v = small_vocab();
        assert_eq!(v.id(UNK_TOKEN), UNK_ID);
        assert_eq!(v.id("red"), 1);
        assert_eq!(v.id("nonexistent"), UNK_ID);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i)), i);
        }
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let v = small_vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = PhraseVocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn embed_phrase_deterministic_and_discriminative() {
        let v = small_vocab();
        let mut rng = rng_from_seed(1);
        let emb = TextEmbedder::<f64>::new(v.len(), 8, &mut rng);
        let a = embed_phrase("red circle", &v, &emb).unwrap();
        let b = embed_phrase("red circle", &v, &emb).unwrap();
        assert_eq!(a, b);
        let c = embed_phrase("red square", &v, &emb).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn embed_unknown_word_is_unk_embedding() {
        let v = small_vocab();
        let mut rng = rng_from_seed(2);
        let emb = TextEmbedder::<f64>::new(v.len(), 8, &mut rng);
        let got = embed_phrase("zebra", &v, &emb).unwrap();
        let unk = &emb.embeddings.data()[0..8];
        assert_eq!(got.as_slice(), unk);
    }

    #[test]
    fn embed_empty_phrase_is_error() {
        let v = small_vocab();
        let mut rng = rng_from_seed(3);
        let emb = TextEmbedder::<f64>::new(v.len(), 8, &mut rng);
        assert!(matches!(
            embed_phrase("   ", &v, &emb),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn embed_is_word_order_invariant() {
        // mean pooling: permuting words gives the identical vector
        let v = small_vocab();
        let mut rng = rng_from_seed(4);
        let emb = TextEmbedder::<f64>::new(v.len(), 8, &mut rng);
        let a = embed_phrase("red blue circle", &v, &emb).unwrap();
        let b = embed_phrase("circle red blue", &v, &emb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adapters_linear_in_global() {
        let mut rng = rng_from_seed(5);
        let mut stack = AdapterStack::<f64>::new(8, 4, &[16, 32], &mut rng).unwrap();
        for proj in stack.projections_mut() {
            proj.b.fill(0.0);
        }
        let v: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let p1 = project_adapters(&v, &stack).unwrap();
        let p2 = project_adapters(&v2, &stack).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            let doubled: Vec<f64> = a.data.iter().map(|x| 2.0 * x).collect();
            for (x, y) in doubled.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-12);
            }
        }

        // zero input with zero bias gives all-zero adapter tokens
        let z = project_adapters(&vec![0.0; 8], &stack).unwrap();
        assert!(z.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adapters_additivity_zero_bias() {
        let mut rng = rng_from_seed(6);
        let mut stack = AdapterStack::<f64>::new(4, 2, &[8, 16], &mut rng).unwrap();
        for proj in stack.projections_mut() {
            proj.b.fill(0.0);
        }
        let a = vec![0.3, -0.2, 0.5, 0.9];
        let b = vec![-0.4, 0.8, 0.1, -0.6];
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = project_adapters(&a, &stack).unwrap();
        let pb = project_adapters(&b, &stack).unwrap();
        let ps = project_adapters(&sum, &stack).unwrap();
        for i in 0..2 {
            for j in 0..pa[i].data.len() {
                assert!((pa[i].data[j] + pb[i].data[j] - ps[i].data[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adapter_shapes_match_config_sweep() {
        let mut rng = rng_from_seed(7);
        for &(d, m, c0, c1) in &[(8usize, 4usize, 16usize, 32usize), (16, 2, 64, 128), (4, 1, 8, 8)] {
            let stack = AdapterStack::<f64>::new(d, m, &[c0, c1], &mut rng).unwrap();
            let g = vec![0.5; d];
            let blocks = project_adapters(&g, &stack).unwrap();
            assert_eq!(blocks.len(), 2);
            assert_eq!((blocks[0].rows, blocks[0].cols), (m, c0));
            assert_eq!((blocks[1].rows, blocks[1].cols), (m, c1));
        }
    }

    #[test]
    fn adapter_stack_requires_two_scales() {
        let mut rng = rng_from_seed(8);
        assert!(AdapterStack::<f64>::new(8, 4, &[16], &mut rng).is_err());
        assert!(AdapterStack::<f64>::new(8, 4, &[16, 32, 64], &mut rng).is_err());
    }

    #[test]
    fn null_conditioning_is_stable_and_flagged() {
        let mut rng = rng_from_seed(9);
        let null = NullEmbeddings::<f64>::new(8, 4, &[16, 32], &mut rng);
        let a = null_conditioning(&null);
        let b = null_conditioning(&null);
        assert_eq!(a, b);
        assert!(a.is_null);
    }

    #[test]
    fn dropout_edge_probabilities() {
        let mut rng = rng_from_seed(10);
        let null = NullEmbeddings::<f64>::new(4, 2, &[8, 16], &mut rng);
        let cond = PhraseConditioning {
            global: vec![1.0; 4],
            per_layer: vec![Mat::zeros(2, 8), Mat::zeros(2, 16)],
            is_null: false,
        };
        for _ in 0..50 {
            let kept = conditional_dropout(cond.clone(), 0.0, &null, &mut rng);
            assert!(!kept.is_null);
            assert_eq!(kept.global, cond.global);
            let dropped = conditional_dropout(cond.clone(), 1.0, &null, &mut rng);
            assert!(dropped.is_null);
            // global and adapter features are replaced together
            assert_eq!(dropped.global, null.global.data().to_vec());
            assert_eq!(dropped.per_layer[0].data, null.per_layer[0].data().to_vec());
            assert_eq!(dropped.per_layer[1].data, null.per_layer[1].data().to_vec());
        }
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut rng = rng_from_seed(11);
        let null = NullEmbeddings::<f64>::new(4, 2, &[8, 16], &mut rng);
        let cond = PhraseConditioning {
            global: vec![1.0; 4],
            per_layer: vec![Mat::zeros(2, 8), Mat::zeros(2, 16)],
            is_null: false,
        };
        let n = 100_000;
        let mut dropped = 0usize;
        for _ in 0..n {
            if conditional_dropout(cond.clone(), 0.1, &null, &mut rng).is_null {
                dropped += 1;
            }
        }
        let rate = dropped as f64 / n as f64;
        assert!((0.094..=0.106).contains(&rate), "rate {rate}");
    }
}
