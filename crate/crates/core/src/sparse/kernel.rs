use std::collections::HashMap;

use rand::Rng;

use super::{Coord4, SparseTensor4};
use crate::error::{Error, Result};
use crate::real::Real;

/// Weights of a sparse convolution. `weights` is laid out
/// `[kernel_offset][in_width][out_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: [usize; 4],
    pub stride: [i32; 4],
    pub in_width: usize,
    pub out_width: usize,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(kernel: [usize; 4], stride: [i32; 4], in_width: usize, out_width: usize, bias: bool) -> Self {
        let volume: usize = kernel.iter().product();
        Self {
            kernel,
            stride,
            in_width,
            out_width,
            weights: vec![T::zero(); volume * in_width * out_width],
            bias: bias.then(|| vec![T::zero(); out_width]),
        }
    }

    /// Uniform `±sqrt(1 / fan_in)` initialization, `fan_in = volume * in_width`.
    pub fn random<R: Rng>(
        rng: &mut R,
        kernel: [usize; 4],
        stride: [i32; 4],
        in_width: usize,
        out_width: usize,
        bias: bool,
    ) -> Self {
        let mut p = Self::zeros(kernel, stride, in_width, out_width, bias);
        let bound = (1.0 / p.fan_in().max(1) as f64).sqrt();
        p.weights
            .iter_mut()
            .for_each(|w| *w = T::of(rng.gen_range(-bound..=bound)));
        if let Some(b) = p.bias.as_mut() {
            b.iter_mut().for_each(|w| *w = T::of(rng.gen_range(-bound..=bound)));
        }
        p
    }

    pub fn volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.volume() * self.in_width
    }

    pub fn validate(&self) -> Result<()> {
        kernel_offsets(self.kernel)?;
        if self.stride.iter().any(|&s| s < 1) {
            return Err(Error::StrideMismatch(format!("conv stride must be positive, got {:?}", self.stride)));
        }
        let expected = self.volume() * self.in_width * self.out_width;
        if self.weights.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: self.weights.len(),
            });
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_width {
                return Err(Error::LengthMismatch {
                    expected: self.out_width,
                    found: b.len(),
                });
            }
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("non-finite conv weight".into()));
        }
        Ok(())
    }

    /// Weight matrix of kernel offset `k`, `in_width x out_width` row-major.
    pub fn weight(&self, k: usize) -> &[T] {
        let n = self.in_width * self.out_width;
        &self.weights[k * n..(k + 1) * n]
    }

    /// Swaps input and output widths and transposes each offset matrix. The
    /// result, used as deconvolution weights, is the adjoint of `self` used as
    /// convolution weights.
    pub fn transposed(&self) -> Self {
        let (i, o) = (self.in_width, self.out_width);
        let mut weights = vec![T::zero(); self.weights.len()];
        for k in 0..self.volume() {
            for a in 0..i {
                for b in 0..o {
                    weights[k * i * o + b * i + a] = self.weights[k * i * o + a * o + b];
                }
            }
        }
        Self {
            kernel: self.kernel,
            stride: self.stride,
            in_width: o,
            out_width: i,
            weights,
            bias: self.bias.as_ref().map(|_| vec![T::zero(); i]),
        }
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            kernel: self.kernel,
            stride: self.stride,
            in_width: self.in_width,
            out_width: self.out_width,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.as_ref().map(|b| b.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }
}

/// Centered offsets of an odd kernel in lexicographic `(x, y, z, t)` order.
pub fn kernel_offsets(kernel: [usize; 4]) -> Result<Vec<[i32; 4]>> {
    if let Some(k) = kernel.iter().find(|&&k| k % 2 == 0) {
        return Err(Error::Unsupported(format!("kernel size {k} is even; only odd sizes are supported")));
    }
    let half: [i32; 4] = std::array::from_fn(|a| (kernel[a] / 2) as i32);
    let mut out = Vec::with_capacity(kernel.iter().product());
    for dx in -half[0]..=half[0] {
        for dy in -half[1]..=half[1] {
            for dz in -half[2]..=half[2] {
                for dt in -half[3]..=half[3] {
                    out.push([dx, dy, dz, dt]);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KernelPair {
    pub out_row: u32,
    pub offset: u32,
    pub in_row: u32,
}

/// Contributions `(in_row, out_row, offset)` of a sparse convolution, sorted
/// by `(out_row, offset, in_row)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelMap {
    pub pairs: Vec<KernelPair>,
}

impl KernelMap {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Triples in the `(in_row, out_row, kernel_offset_index)` form.
    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        self.pairs
            .iter()
            .map(|p| (p.in_row as usize, p.out_row as usize, p.offset as usize))
            .collect()
    }
}

/// Pairs input rows with output sites: `in = out + offset * input_stride`.
pub(crate) fn build_pairs(
    input_index: &HashMap<Coord4, usize>,
    input_stride: [i32; 4],
    out_coords: &[Coord4],
    kernel: [usize; 4],
) -> Result<KernelMap> {
    let offsets: Vec<[i32; 4]> = kernel_offsets(kernel)?
        .into_iter()
        .map(|o| std::array::from_fn(|a| o[a] * input_stride[a]))
        .collect();
    let mut pairs = Vec::new();
    for (o, oc) in out_coords.iter().enumerate() {
        for (k, d) in offsets.iter().enumerate() {
            if let Some(&i) = input_index.get(&oc.offset(*d)) {
                pairs.push(KernelPair {
                    out_row: o as u32,
                    offset: k as u32,
                    in_row: i as u32,
                });
            }
        }
    }
    // Already in (out_row, offset) order; in_row is unique per (out_row, offset).
    Ok(KernelMap { pairs })
}

/// Kernel map of `params` from `input` onto `out_coords`.
pub fn kernel_map<T: Real>(input: &SparseTensor4<T>, out_coords: &[Coord4], params: &ConvParams<T>) -> Result<KernelMap> {
    let mut seen = std::collections::HashSet::with_capacity(out_coords.len());
    if let Some(c) = out_coords.iter().find(|c| !seen.insert(**c)) {
        return Err(Error::DuplicateCoordinate(*c));
    }
    build_pairs(input.index(), input.stride(), out_coords, params.kernel)
}
