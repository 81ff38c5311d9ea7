//! Rank-3 value grids: diffusion latents and network feature maps.

use crate::{Error, Result, Scalar};
use rand::Rng;
use rand_distr::StandardNormal;

/// Height × width × channels array stored row-major with channels innermost.
///
/// Carries clean latents, noisy latents, noise draws and intermediate feature
/// maps. Label latents have one channel, image latents four.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Scalar> LatentGrid<T> {
    /// All-zero grid.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "degenerate grid");
        Self {
            height,
            width,
            channels,
            values: vec![T::zero(); height * width * channels],
        }
    }

    /// Grid filled with a constant.
    pub fn constant(height: usize, width: usize, channels: usize, v: T) -> Self {
        let mut g = Self::zeros(height, width, channels);
        g.values.fill(v);
        g
    }

    /// Build from a flat row-major (y, x, c) vector.
    pub fn from_vec(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Build by evaluating `f(y, x, c)` on every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut g = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let idx = g.index(y, x, c);
                    g.values[idx] = f(y, x, c);
                }
            }
        }
        g
    }

    /// Standard-normal draw with the given shape.
    pub fn randn(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let mut g = Self::zeros(height, width, channels);
        for v in &mut g.values {
            let z: f64 = rng.sample(StandardNormal);
            *v = T::from_f64_c(z);
        }
        g
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// (height, width, channels).
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let idx = self.index(y, x, c);
        self.values[idx] = v;
    }

    /// Flat value slice, row-major with channels innermost.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Contiguous channel slice at one spatial cell.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let base = (y * self.width + x) * self.channels;
        &self.values[base..base + self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    fn require_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Elementwise map into a new grid.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.require_same_shape(other, "zip_map")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute difference over all cells; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// True when every cell is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Convert every cell through `Scalar` widening/narrowing.
    pub fn cast<U: Scalar>(&self) -> LatentGrid<U> {
        LatentGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|v| U::from_f64_c(v.to_f64_c())).collect(),
        }
    }
}
