//! Token-level attention: adapter-injected self-attention and single-token
//! cross-attention.
//!
//! Injected self-attention concatenates projected text tokens to the image
//! tokens, attends over the joint sequence, then discards the text-token
//! outputs so injected tokens never leak downstream.

use super::{mm, mm_nt, mm_tn, Mat, Tensor};
use crate::{fl, Error, Result, Scalar};
use rand::Rng;

/// Square Q/K/V/O projections shared by image and injected tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(channels: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && channels % heads == 0, "heads must divide channels");
        let std = (1.0 / channels as f64).sqrt();
        Self {
            wq: Tensor::randn(&[channels, channels], std, rng),
            wk: Tensor::randn(&[channels, channels], std, rng),
            wv: Tensor::randn(&[channels, channels], std, rng),
            // near-zero output projection keeps the residual branch quiet at init
            wo: Tensor::randn(&[channels, channels], 0.02, rng),
            heads,
        }
    }

    pub fn zeros(channels: usize, heads: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[channels, channels]),
            wk: Tensor::zeros(&[channels, channels]),
            wv: Tensor::zeros(&[channels, channels]),
            wo: Tensor::zeros(&[channels, channels]),
            heads,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SelfAttnCache<T> {
    joint: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Softmax probabilities, one (S×S) block per head.
    probs: Vec<Mat<T>>,
    /// Attention output before W^O.
    z_pre: Mat<T>,
    n_image: usize,
}

fn softmax_rows<T: Scalar>(scores: &mut Mat<T>) {
    for r in 0..scores.rows {
        let row = scores.row_mut(r);
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Self-attention over `concat(tokens, adapter_tokens)`, returning only the
/// first `N` output rows. With zero adapter rows this is plain
/// self-attention over the image tokens.
pub fn injected_self_attention<T: Scalar>(
    tokens: &Mat<T>,
    adapter_tokens: &Mat<T>,
    weights: &AttentionWeights<T>,
) -> Result<Mat<T>> {
    let (out, _) = injected_self_attention_cached(tokens, adapter_tokens, weights)?;
    Ok(out)
}

pub fn injected_self_attention_cached<T: Scalar>(
    tokens: &Mat<T>,
    adapter_tokens: &Mat<T>,
    weights: &AttentionWeights<T>,
) -> Result<(Mat<T>, SelfAttnCache<T>)> {
    let c = weights.channels();
    if tokens.cols != c || (adapter_tokens.rows > 0 && adapter_tokens.cols != c) {
        return Err(Error::shape(format!(
            "attention width mismatch: tokens {}x{}, adapters {}x{}, weights {c}",
            tokens.rows, tokens.cols, adapter_tokens.rows, adapter_tokens.cols
        )));
    }
    let joint = tokens.vstack(adapter_tokens)?;
    let s = joint.rows;
    let heads = weights.heads;
    let hd = c / heads;
    let scale = fl::<T>(1.0 / (hd as f64).sqrt());

    let mut q = Mat::zeros(s, c);
    let mut k = Mat::zeros(s, c);
    let mut v = Mat::zeros(s, c);
    mm(&joint.data, s, c, weights.wq.data(), c, &mut q.data);
    mm(&joint.data, s, c, weights.wk.data(), c, &mut k.data);
    mm(&joint.data, s, c, weights.wv.data(), c, &mut v.data);

    let mut probs = Vec::with_capacity(heads);
    let mut z_pre = Mat::zeros(s, c);
    for h in 0..heads {
        // gather head columns
        let mut qh = Mat::zeros(s, hd);
        let mut kh = Mat::zeros(s, hd);
        let mut vh = Mat::zeros(s, hd);
        for r in 0..s {
            for ch in 0..hd {
                qh.set(r, ch, q.get(r, h * hd + ch) * scale);
                kh.set(r, ch, k.get(r, h * hd + ch));
                vh.set(r, ch, v.get(r, h * hd + ch));
            }
        }
        let mut scores = Mat::zeros(s, s);
        mm_nt(&qh.data, s, hd, &kh.data, s, &mut scores.data);
        softmax_rows(&mut scores);
        let mut zh = Mat::zeros(s, hd);
        mm(&scores.data, s, s, &vh.data, hd, &mut zh.data);
        for r in 0..s {
            for ch in 0..hd {
                z_pre.set(r, h * hd + ch, zh.get(r, ch));
            }
        }
        probs.push(scores);
    }

    let mut z = Mat::zeros(s, c);
    mm(&z_pre.data, s, c, weights.wo.data(), c, &mut z.data);

    let mut out = Mat::zeros(tokens.rows, c);
    out.data.copy_from_slice(&z.data[..tokens.rows * c]);
    Ok((
        out,
        SelfAttnCache {
            joint,
            q,
            k,
            v,
            probs,
            z_pre,
            n_image: tokens.rows,
        },
    ))
}

/// Backward of [`injected_self_attention`]; returns (d_tokens, d_adapters).
pub fn injected_self_attention_backward<T: Scalar>(
    cache: &SelfAttnCache<T>,
    d_out: &Mat<T>,
    weights: &AttentionWeights<T>,
    grad: &mut AttentionWeights<T>,
) -> (Mat<T>, Mat<T>) {
    let c = weights.channels();
    let s = cache.joint.rows;
    let n = cache.n_image;
    let heads = weights.heads;
    let hd = c / heads;
    let scale = fl::<T>(1.0 / (hd as f64).sqrt());

    // discarded text-token outputs carry zero gradient
    let mut dz = Mat::zeros(s, c);
    dz.data[..n * c].copy_from_slice(&d_out.data);

    // z = z_pre · Wo
    let mut dz_pre = Mat::zeros(s, c);
    mm_nt(&dz.data, s, c, weights.wo.data(), c, &mut dz_pre.data);
    mm_tn(&cache.z_pre.data, s, c, &dz.data, c, grad.wo.data_mut());

    let mut dq = Mat::zeros(s, c);
    let mut dk = Mat::zeros(s, c);
    let mut dv = Mat::zeros(s, c);

    for h in 0..heads {
        let probsh = &cache.probs[h];
        let mut dzh = Mat::zeros(s, hd);
        let mut vh = Mat::zeros(s, hd);
        let mut qh = Mat::zeros(s, hd);
        let mut kh = Mat::zeros(s, hd);
        for r in 0..s {
            for ch in 0..hd {
                dzh.set(r, ch, dz_pre.get(r, h * hd + ch));
                vh.set(r, ch, cache.v.get(r, h * hd + ch));
                qh.set(r, ch, cache.q.get(r, h * hd + ch) * scale);
                kh.set(r, ch, cache.k.get(r, h * hd + ch));
            }
        }
        // zh = probs · vh
        let mut dprobs = Mat::zeros(s, s);
        mm_nt(&dzh.data, s, hd, &vh.data, s, &mut dprobs.data);
        let mut dvh = Mat::zeros(s, hd);
        mm_tn(&probsh.data, s, s, &dzh.data, hd, &mut dvh.data);

        // softmax backward per row
        let mut dscores = Mat::zeros(s, s);
        for r in 0..s {
            let p = probsh.row(r);
            let dp = dprobs.row(r);
            let mut dot = T::zero();
            for (pv, dv_) in p.iter().zip(dp) {
                dot += *pv * *dv_;
            }
            for j in 0..s {
                dscores.set(r, j, p[j] * (dp[j] - dot));
            }
        }

        // scores = (qh·scale) · khᵀ
        let mut dqh = Mat::zeros(s, hd);
        mm(&dscores.data, s, s, &kh.data, hd, &mut dqh.data);
        let mut dkh = Mat::zeros(s, hd);
        mm_tn(&dscores.data, s, s, &qh.data, hd, &mut dkh.data);

        for r in 0..s {
            for ch in 0..hd {
                dq.set(r, h * hd + ch, dqh.get(r, ch) * scale);
                dk.set(r, h * hd + ch, dkh.get(r, ch));
                dv.set(r, h * hd + ch, dvh.get(r, ch));
            }
        }
    }

    // q/k/v = joint · W
    let mut djoint = Mat::zeros(s, c);
    mm_nt(&dq.data, s, c, weights.wq.data(), c, &mut djoint.data);
    mm_nt(&dk.data, s, c, weights.wk.data(), c, &mut djoint.data);
    mm_nt(&dv.data, s, c, weights.wv.data(), c, &mut djoint.data);
    mm_tn(&cache.joint.data, s, c, &dq.data, c, grad.wq.data_mut());
    mm_tn(&cache.joint.data, s, c, &dk.data, c, grad.wk.data_mut());
    mm_tn(&cache.joint.data, s, c, &dv.data, c, grad.wv.data_mut());

    let m = s - n;
    let mut d_tokens = Mat::zeros(n, c);
    d_tokens.data.copy_from_slice(&djoint.data[..n * c]);
    let mut d_adapters = Mat::zeros(m, c);
    d_adapters.data.copy_from_slice(&djoint.data[n * c..]);
    (d_tokens, d_adapters)
}

/// Cross-attention against a single projected text token, residual-added to
/// the image tokens. Keys and values are projections of the global phrase
/// embedding; with one key the softmax weight is identically 1 per query.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T> {
    /// [C, C] query projection (structurally present; a single key makes the
    /// attention weights constant).
    pub wq: Tensor<T>,
    /// [D_txt, C]
    pub wk: Tensor<T>,
    /// [D_txt, C]
    pub wv: Tensor<T>,
    /// [C, C]
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct CrossAttnCache<T> {
    v: Vec<T>,
    n: usize,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn new(channels: usize, text_dim: usize, rng: &mut impl Rng) -> Self {
        let std_c = (1.0 / channels as f64).sqrt();
        let std_t = (1.0 / text_dim as f64).sqrt();
        Self {
            wq: Tensor::randn(&[channels, channels], std_c, rng),
            wk: Tensor::randn(&[text_dim, channels], std_t, rng),
            wv: Tensor::randn(&[text_dim, channels], std_t, rng),
            wo: Tensor::randn(&[channels, channels], 0.02, rng),
        }
    }

    pub fn zeros(channels: usize, text_dim: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[channels, channels]),
            wk: Tensor::zeros(&[text_dim, channels]),
            wv: Tensor::zeros(&[text_dim, channels]),
            wo: Tensor::zeros(&[channels, channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn text_dim(&self) -> usize {
        self.wk.shape()[0]
    }

    pub fn forward(&self, tokens: &Mat<T>, global: &[T]) -> Result<Mat<T>> {
        let (out, _) = self.forward_cached(tokens, global)?;
        Ok(out)
    }

    pub fn forward_cached(&self, tokens: &Mat<T>, global: &[T]) -> Result<(Mat<T>, CrossAttnCache<T>)> {
        let c = self.channels();
        let d = self.text_dim();
        if tokens.cols != c {
            return Err(Error::shape(format!(
                "cross-attention channels: tokens {} vs weights {c}",
                tokens.cols
            )));
        }
        if global.len() != d {
            return Err(Error::shape(format!(
                "cross-attention text dim: {} vs {d}",
                global.len()
            )));
        }
        // single key/value token: softmax over one element is 1 for every
        // query, so the attended value is v for each row
        let mut v = vec![T::zero(); c];
        mm(global, 1, d, self.wv.data(), c, &mut v);
        let mut o = vec![T::zero(); c];
        mm(&v, 1, c, self.wo.data(), c, &mut o);
        let mut out = Mat::zeros(tokens.rows, c);
        for r in 0..tokens.rows {
            for cc in 0..c {
                out.set(r, cc, tokens.get(r, cc) + o[cc]);
            }
        }
        Ok((
            out,
            CrossAttnCache {
                v,
                n: tokens.rows,
            },
        ))
    }

    /// Backward; returns (d_tokens, d_global).
    pub fn backward(
        &self,
        cache: &CrossAttnCache<T>,
        global: &[T],
        d_out: &Mat<T>,
        grad: &mut CrossAttention<T>,
    ) -> (Mat<T>, Vec<T>) {
        let c = self.channels();
        let d = self.text_dim();
        // residual path
        let d_tokens = d_out.clone();
        // broadcast path: every row received the same o = v·Wo
        let mut dsum = vec![T::zero(); c];
        for r in 0..cache.n {
            for cc in 0..c {
                dsum[cc] += d_out.get(r, cc);
            }
        }
        let mut dv = vec![T::zero(); c];
        mm_nt(&dsum, 1, c, self.wo.data(), c, &mut dv);
        mm_tn(&cache.v, 1, c, &dsum, c, grad.wo.data_mut());
        let mut d_global = vec![T::zero(); d];
        mm_nt(&dv, 1, c, self.wv.data(), d, &mut d_global);
        mm_tn(global, 1, d, &dv, c, grad.wv.data_mut());
        (d_tokens, d_global)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    /// Plain softmax self-attention written independently of the
    /// implementation above, as the M = 0 oracle.
    fn plain_self_attention(x: &Mat<f64>, w: &AttentionWeights<f64>) -> Mat<f64> {
        let n = x.rows;
        let c = x.cols;
        let proj = |m: &Tensor<f64>| -> Mat<f64> {
            let mut out = Mat::zeros(n, c);
            for r in 0..n {
                for o in 0..c {
                    let mut acc = 0.0;
                    for i in 0..c {
                        acc += x.get(r, i) * m.data()[i * c + o];
                    }
                    out.set(r, o, acc);
                }
            }
            out
        };
        let q = proj(&w.wq);
        let k = proj(&w.wk);
        let v = proj(&w.wv);
        let scale = 1.0 / (c as f64).sqrt();
        let mut out = Mat::zeros(n, c);
        for r in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut acc = 0.0;
                for cc in 0..c {
                    acc += q.get(r, cc) * k.get(j, cc);
                }
                scores[j] = acc * scale;
            }
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut zr = vec![0.0; c];
            for j in 0..n {
                let p = exps[j] / sum;
                for cc in 0..c {
                    zr[cc] += p * v.get(j, cc);
                }
            }
            for o in 0..c {
                let mut acc = 0.0;
                for cc in 0..c {
                    acc += zr[cc] * w.wo.data()[cc * c + o];
                }
                out.set(r, o, acc);
            }
        }
        out
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = rng_from_seed(seed);
        let t = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut rng);
        Mat::from_vec(rows, cols, t.data().to_vec()).unwrap()
    }

    #[test]
    fn zero_adapters_reduce_to_plain_self_attention() {
        let mut rng = rng_from_seed(10);
        let w = AttentionWeights::<f64>::new(8, 1, &mut rng);
        let x = rand_mat(6, 8, 11);
        let empty = Mat::zeros(0, 8);
        let got = injected_self_attention(&x, &empty, &w).unwrap();
        let expect = plain_self_attention(&x, &w);
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn adapter_permutation_invariance() {
        let mut rng = rng_from_seed(12);
        let w = AttentionWeights::<f64>::new(8, 1, &mut rng);
        let x = rand_mat(5, 8, 13);
        let adapters = rand_mat(4, 8, 14);
        let base = injected_self_attention(&x, &adapters, &w).unwrap();

        // reverse the adapter rows
        let mut rev = Mat::zeros(4, 8);
        for r in 0..4 {
            rev.row_mut(r).copy_from_slice(adapters.row(3 - r));
        }
        let permuted = injected_self_attention(&x, &rev, &w).unwrap();
        assert!(base.max_abs_diff(&permuted) <= 1e-6);
    }

    #[test]
    fn output_token_count_over_sweep() {
        let mut rng = rng_from_seed(15);
        for &(n, m, c) in &[(16usize, 4usize, 32usize), (1, 0, 8), (4, 7, 16), (9, 1, 8)] {
            let w = AttentionWeights::<f64>::new(c, 1, &mut rng);
            let x = rand_mat(n, c, 100 + n as u64);
            let a = rand_mat(m, c, 200 + m as u64);
            let out = injected_self_attention(&x, &a, &w).unwrap();
            assert_eq!((out.rows, out.cols), (n, c));
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut rng = rng_from_seed(16);
        let w = AttentionWeights::<f64>::new(8, 1, &mut rng);
        let x = rand_mat(4, 6, 17);
        let empty = Mat::zeros(0, 6);
        assert!(injected_self_attention(&x, &empty, &w).is_err());
    }

    #[test]
    fn cross_attention_broadcast_and_residual() {
        let mut rng = rng_from_seed(20);
        let ca = CrossAttention::<f64>::new(8, 4, &mut rng);
        let x = rand_mat(5, 8, 21);
        let g: Vec<f64> = (0..4).map(|i| 0.3 * i as f64 - 0.5).collect();
        let out = ca.forward(&x, &g).unwrap();

        // attention weight over the single key is 1: rows shift by v·Wo
        let mut v = vec![0.0; 8];
        mm(&g, 1, 4, ca.wv.data(), 8, &mut v);
        let mut o = vec![0.0; 8];
        mm(&v, 1, 8, ca.wo.data(), 8, &mut o);
        for r in 0..5 {
            for c in 0..8 {
                assert!((out.get(r, c) - x.get(r, c) - o[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_zero_value_projection_is_identity() {
        let mut rng = rng_from_seed(22);
        let mut ca = CrossAttention::<f64>::new(8, 4, &mut rng);
        ca.wv.fill(0.0);
        let x = rand_mat(3, 8, 23);
        let g = vec![1.0; 4];
        let out = ca.forward(&x, &g).unwrap();
        assert!(out.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn cross_attention_shape_preserved_sweep() {
        let mut rng = rng_from_seed(24);
        for &(n, c, d) in &[(4usize, 8usize, 4usize), (16, 32, 16), (1, 8, 8)] {
            let ca = CrossAttention::<f64>::new(c, d, &mut rng);
            let x = rand_mat(n, c, 300 + n as u64);
            let g = vec![0.1; d];
            let out = ca.forward(&x, &g).unwrap();
            assert_eq!((out.rows, out.cols), (n, c));
        }
    }
}
