//! Label and image codecs: binary masks to 1-channel latents, RGB images to
//! 4-channel latents, and the three mask decode strategies (bilinear,
//! nearest, learned decoder).
//!
//! Value convention: label latents live in [-1, 1] with 0 as the
//! binarization midpoint; the spatial factor between pixels and latent cells
//! is fixed at 8.

use crate::nn::layers::{silu_grid, silu_grid_backward, upsample2_nearest, upsample2_nearest_backward, Conv2d};
use crate::nn::Tensor;
use crate::rng::rng_from_seed;
use crate::{fl, Error, LatentGrid, Result, Scalar};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Spatial downsampling factor between image pixels and latent cells.
pub const LATENT_FACTOR: usize = 8;

/// H×W mask with strictly binary cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} wants {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::data("mask values must be strictly binary"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Pixelwise union.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mask union shape mismatch"));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a | b)
            .collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    /// True when no pixel is shared.
    pub fn disjoint(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a & b == 0)
    }

    /// Write as 8-bit single-channel PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path)?;
        Ok(())
    }

    /// Load a {0, 255} single-channel PNG; other gray values are rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut mask = BinaryMask::zeros(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            match p.0[0] {
                0 => {}
                255 => mask.set(y as usize, x as usize, true),
                other => {
                    return Err(Error::data(format!(
                        "mask {} has non-binary value {other} at ({x},{y})",
                        path.display()
                    )))
                }
            }
        }
        Ok(mask)
    }
}

/// How a generated label latent becomes a full-resolution binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeKind {
    /// Bilinear upsample then threshold (default; pairs with CFG sampling).
    BilinearCfg,
    /// Nearest-neighbor upsample then threshold.
    Nearest,
    /// Trained convolutional decoder then threshold.
    LearnedDecoder,
}

/// Decode strategy plus binarization threshold in the [-1, 1] convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeStrategy {
    pub kind: DecodeKind,
    pub threshold: f64,
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        Self {
            kind: DecodeKind::BilinearCfg,
            threshold: 0.0,
        }
    }
}

/// Area-average the mask into 8x8 cells and map [0,1] -> [-1,1].
pub fn encode_label<T: Scalar>(mask: &BinaryMask) -> Result<LatentGrid<T>> {
    let (h, w) = mask.shape();
    if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
        return Err(Error::shape(format!(
            "mask dims {h}x{w} not divisible by {LATENT_FACTOR}"
        )));
    }
    let (lh, lw) = (h / LATENT_FACTOR, w / LATENT_FACTOR);
    let inv = 1.0 / (LATENT_FACTOR * LATENT_FACTOR) as f64;
    Ok(LatentGrid::from_fn(lh, lw, 1, |cy, cx, _| {
        let mut sum = 0usize;
        for y in cy * LATENT_FACTOR..(cy + 1) * LATENT_FACTOR {
            for x in cx * LATENT_FACTOR..(cx + 1) * LATENT_FACTOR {
                sum += mask.get(y, x) as usize;
            }
        }
        fl::<T>(2.0 * (sum as f64 * inv) - 1.0)
    }))
}

/// Bilinear upsample with half-pixel centers and edge clamping.
pub fn bilinear_upsample<T: Scalar>(
    latent: &LatentGrid<T>,
    target_h: usize,
    target_w: usize,
) -> LatentGrid<T> {
    let (sh, sw, c) = latent.shape();
    let fy = sh as f64 / target_h as f64;
    let fx = sw as f64 / target_w as f64;
    LatentGrid::from_fn(target_h, target_w, c, |y, x, cc| {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let wy = fl::<T>(sy - y0 as f64);
        let wx = fl::<T>(sx - x0 as f64);
        let one = T::one();
        let a = latent.get(y0, x0, cc) * (one - wy) * (one - wx);
        let b = latent.get(y0, x1, cc) * (one - wy) * wx;
        let d = latent.get(y1, x0, cc) * wy * (one - wx);
        let e = latent.get(y1, x1, cc) * wy * wx;
        a + b + d + e
    })
}

/// Nearest-neighbor upsample.
pub fn nearest_upsample<T: Scalar>(
    latent: &LatentGrid<T>,
    target_h: usize,
    target_w: usize,
) -> LatentGrid<T> {
    let (sh, sw, c) = latent.shape();
    LatentGrid::from_fn(target_h, target_w, c, |y, x, cc| {
        let sy = (y * sh / target_h).min(sh - 1);
        let sx = (x * sw / target_w).min(sw - 1);
        latent.get(sy, sx, cc)
    })
}

fn threshold_to_mask<T: Scalar>(grid: &LatentGrid<T>, threshold: f64) -> BinaryMask {
    let (h, w, _) = grid.shape();
    let thr = fl::<T>(threshold);
    let mut mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            mask.set(y, x, grid.get(y, x, 0) > thr);
        }
    }
    mask
}

/// Decode a 1-channel label latent to a binary mask at target resolution.
///
/// The learned-decoder strategy requires trained decoder parameters.
pub fn decode_label<T: Scalar>(
    latent: &LatentGrid<T>,
    target_h: usize,
    target_w: usize,
    strategy: &DecodeStrategy,
    learned: Option<&LabelDecoder<T>>,
) -> Result<BinaryMask> {
    if latent.channels() != 1 {
        return Err(Error::shape(format!(
            "label latent must have 1 channel, got {}",
            latent.channels()
        )));
    }
    if !(-1.0..1.0).contains(&strategy.threshold) {
        return Err(Error::parameter(format!(
            "decode threshold {} outside (-1,1)",
            strategy.threshold
        )));
    }
    let upsampled = match strategy.kind {
        DecodeKind::BilinearCfg => bilinear_upsample(latent, target_h, target_w),
        DecodeKind::Nearest => nearest_upsample(latent, target_h, target_w),
        DecodeKind::LearnedDecoder => {
            let dec = learned.ok_or_else(|| {
                Error::parameter("learned decode strategy requires trained decoder parameters")
            })?;
            let full = dec.forward(latent);
            if full.height() == target_h && full.width() == target_w {
                full
            } else {
                bilinear_upsample(&full, target_h, target_w)
            }
        }
    };
    Ok(threshold_to_mask(&upsampled, strategy.threshold))
}

/// Small strided convolutional encoder: 3-channel RGB in [0,1] to a
/// 4-channel latent at 1/8 resolution.
///
/// Channels 0..2 initialize to block color means mapped to [-1,1]; channel 3
/// to a diagonal luminance gradient carrying sub-cell structure. Parameters
/// are learnable but stay frozen in the diffusion training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLatentEncoder<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> ImageLatentEncoder<T> {
    pub fn new() -> Self {
        let mut conv = Conv2d::zeros(3, 4, LATENT_FACTOR, LATENT_FACTOR, 0);
        let k = LATENT_FACTOR;
        // weight layout [ky, kx, in, out]
        let idx = |ky: usize, kx: usize, i: usize, o: usize| ((ky * k + kx) * 3 + i) * 4 + o;
        let data = conv.w.data_mut();
        for c in 0..3 {
            for ky in 0..k {
                for kx in 0..k {
                    data[idx(ky, kx, c, c)] = fl::<T>(2.0 / (k * k) as f64);
                }
            }
        }
        for ky in 0..k {
            for kx in 0..k {
                let g = (kx as f64 - 3.5) + (ky as f64 - 3.5);
                for i in 0..3 {
                    data[idx(ky, kx, i, 3)] = fl::<T>(g / (7.0 * (k * k) as f64 * 3.0));
                }
            }
        }
        for o in 0..3 {
            conv.b.data_mut()[o] = fl::<T>(-1.0);
        }
        Self { conv }
    }

    /// Encode an H×W×3 grid with values in [0,1]; H and W must divide by 8.
    pub fn encode(&self, image: &LatentGrid<T>) -> Result<LatentGrid<T>> {
        let (h, w, c) = image.shape();
        if c != 3 {
            return Err(Error::shape(format!("image must have 3 channels, got {c}")));
        }
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return Err(Error::shape(format!(
                "image dims {h}x{w} not divisible by {LATENT_FACTOR}"
            )));
        }
        Ok(self.conv.forward(image))
    }
}

impl<T: Scalar> Default for ImageLatentEncoder<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Convert an 8-bit RGB image to an H×W×3 grid in [0,1].
pub fn rgb_to_grid<T: Scalar>(img: &image::RgbImage) -> LatentGrid<T> {
    LatentGrid::from_fn(img.height() as usize, img.width() as usize, 3, |y, x, c| {
        fl::<T>(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    })
}

/// Trained upsampling decoder: 1-channel latent to a full-resolution value
/// map, thresholded by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDecoder<T> {
    pub stem: Conv2d<T>,
    pub ups: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
}

const DECODER_WIDTH: usize = 16;

impl<T: Scalar> LabelDecoder<T> {
    pub fn init(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            stem: Conv2d::new(1, DECODER_WIDTH, 3, 1, 1, &mut rng),
            ups: (0..3)
                .map(|_| Conv2d::new(DECODER_WIDTH, DECODER_WIDTH, 3, 1, 1, &mut rng))
                .collect(),
            head: Conv2d::new(DECODER_WIDTH, 1, 1, 1, 0, &mut rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            stem: Conv2d::zeros(1, DECODER_WIDTH, 3, 1, 1),
            ups: (0..3).map(|_| Conv2d::zeros(DECODER_WIDTH, DECODER_WIDTH, 3, 1, 1)).collect(),
            head: Conv2d::zeros(DECODER_WIDTH, 1, 1, 1, 0),
        }
    }

    /// Latent (h, w, 1) to values at (8h, 8w, 1).
    pub fn forward(&self, latent: &LatentGrid<T>) -> LatentGrid<T> {
        let mut h = silu_grid(&self.stem.forward(latent));
        for conv in &self.ups {
            h = silu_grid(&conv.forward(&upsample2_nearest(&h)));
        }
        self.head.forward(&h)
    }

    fn forward_train(&self, latent: &LatentGrid<T>) -> (LatentGrid<T>, Vec<LatentGrid<T>>) {
        // cache pre-activation inputs for backward
        let mut acts = Vec::new();
        let pre = self.stem.forward(latent);
        acts.push(latent.clone());
        acts.push(pre.clone());
        let mut h = silu_grid(&pre);
        for conv in &self.ups {
            let up = upsample2_nearest(&h);
            let pre = conv.forward(&up);
            acts.push(up);
            acts.push(pre.clone());
            h = silu_grid(&pre);
        }
        acts.push(h.clone());
        (self.head.forward(&h), acts)
    }

    fn backward(&self, acts: &[LatentGrid<T>], d_out: &LatentGrid<T>, grad: &mut Self) {
        let head_in = &acts[acts.len() - 1];
        let mut d = self.head.backward(head_in, d_out, &mut grad.head);
        for (i, conv) in self.ups.iter().enumerate().rev() {
            let pre = &acts[3 + 2 * i];
            let up_in = &acts[2 + 2 * i];
            let d_pre = silu_grid_backward(pre, &d);
            let d_up = conv.backward(up_in, &d_pre, &mut grad.ups[i]);
            d = upsample2_nearest_backward(&d_up);
        }
        let d_pre = silu_grid_backward(&acts[1], &d);
        self.stem.backward(&acts[0], &d_pre, &mut grad.stem);
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = vec![&mut self.stem.w, &mut self.stem.b];
        for c in &mut self.ups {
            v.push(&mut c.w);
            v.push(&mut c.b);
        }
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = vec![&self.stem.w, &self.stem.b];
        for c in &self.ups {
            v.push(&c.w);
            v.push(&c.b);
        }
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }
}

/// Outcome of [`train_label_autoencoder`].
#[derive(Debug, Clone)]
pub struct LabelDecoderReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean round-trip IoU over the training masks after the last epoch.
    pub reconstruction_iou: f64,
}

/// Fit the learned decoder to invert [`encode_label`] round-trips.
///
/// Minimizes per-pixel squared error against the mask in the [-1,1]
/// convention; constant all-ones/all-zeros masks are appended as anchors so
/// saturated latents decode to saturated masks.
pub fn train_label_autoencoder<T: Scalar>(
    masks: &[BinaryMask],
    epochs: usize,
    seed: u64,
) -> Result<(LabelDecoder<T>, LabelDecoderReport)> {
    if masks.is_empty() {
        return Err(Error::data("label autoencoder needs a nonempty dataset"));
    }
    let (h, w) = masks[0].shape();
    let mut train: Vec<BinaryMask> = masks.to_vec();
    // saturated anchors so constant latents decode to constant masks
    let mut ones = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            ones.set(y, x, true);
        }
    }
    for _ in 0..2 {
        train.push(BinaryMask::zeros(h, w));
        train.push(ones.clone());
    }

    let mut dec = LabelDecoder::<T>::init(seed);
    let mut m = dec.zeros_like();
    let mut v = dec.zeros_like();
    let lr = 2e-3;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut step = 0u64;
    let mut initial_loss = f64::NAN;
    let mut final_loss = 0.0;

    for epoch in 0..epochs.max(1) {
        let mut epoch_loss = 0.0;
        for mask in &train {
            let latent = encode_label::<T>(mask)?;
            let (pred, acts) = dec.forward_train(&latent);
            let target = LatentGrid::from_fn(h, w, 1, |y, x, _| {
                fl::<T>(if mask.get(y, x) { 1.0 } else { -1.0 })
            });
            let n = fl::<T>((h * w) as f64);
            let diff = pred.zip_map(&target, |p, t| p - t)?;
            let loss: f64 = diff
                .values()
                .iter()
                .map(|d| d.to_f64_c() * d.to_f64_c())
                .sum::<f64>()
                / (h * w) as f64;
            epoch_loss += loss;
            if initial_loss.is_nan() {
                initial_loss = loss;
            }
            let d_out = diff.map(|d| d * fl::<T>(2.0) / n);
            let mut grad = dec.zeros_like();
            dec.backward(&acts, &d_out, &mut grad);
            step += 1;
            let gs = grad.tensors();
            let mut ms = m.tensors_mut();
            let mut vs = v.tensors_mut();
            // adam update, one tensor at a time
            for (i, p) in dec.tensors_mut().into_iter().enumerate() {
                crate::nn::layers::adam_update_tensor(
                    p, gs[i], ms[i], vs[i], lr, b1, b2, eps, step,
                );
            }
            let _ = epoch;
        }
        final_loss = epoch_loss / train.len() as f64;
    }

    // round-trip IoU over the provided masks
    let strategy = DecodeStrategy {
        kind: DecodeKind::LearnedDecoder,
        threshold: 0.0,
    };
    let mut iou_sum = 0.0;
    for mask in masks {
        let latent = encode_label::<T>(mask)?;
        let decoded = decode_label(&latent, h, w, &strategy, Some(&dec))?;
        iou_sum += crate::eval::iou(&decoded, mask)?;
    }
    let report = LabelDecoderReport {
        initial_loss,
        final_loss,
        reconstruction_iou: iou_sum / masks.len() as f64,
    };
    Ok((dec, report))
}
