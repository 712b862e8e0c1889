//! Layer primitives with explicit backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::{
    sparse_conv_backward, sparse_conv_traced, sparse_deconv_backward, sparse_deconv_traced, ConvParams, ConvTape,
    Coord4, SparseTensor4,
};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    /// No nonlinearity; used to probe linearity of the conv stacks.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu if x <= T::zero() => x * T::of(LEAKY_SLOPE),
            _ => x,
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, pre: T) -> T {
        match self {
            Activation::LeakyRelu if pre <= T::zero() => T::of(LEAKY_SLOPE),
            _ => T::one(),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += *v;
    }
}

pub(crate) fn accumulate_conv<T: Real>(acc: &mut ConvParams<T>, weights: &[T], bias: Option<&[T]>) {
    add_into(&mut acc.weights, weights);
    if let (Some(a), Some(b)) = (acc.bias.as_mut(), bias) {
        add_into(a, b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SparseKind {
    Conv,
    Deconv,
}

/// Saved state of one sparse (de)convolution followed by an optional activation.
#[derive(Debug, Clone)]
pub(crate) struct SparseLayerTrace<T> {
    kind: SparseKind,
    input: Vec<T>,
    tape: ConvTape,
    pre: Vec<T>,
    activation: Option<Activation>,
}

fn activate<T: Real>(out: &mut SparseTensor4<T>, activation: Option<Activation>) -> Vec<T> {
    let pre = out.features().to_vec();
    if let Some(a) = activation {
        out.features_mut().iter_mut().for_each(|v| *v = a.apply(*v));
    }
    pre
}

pub(crate) fn sparse_layer<T: Real>(
    input: &SparseTensor4<T>,
    params: &ConvParams<T>,
    activation: Option<Activation>,
) -> Result<(SparseTensor4<T>, SparseLayerTrace<T>)> {
    let (mut out, tape) = sparse_conv_traced(input, params)?;
    let pre = activate(&mut out, activation);
    Ok((
        out,
        SparseLayerTrace {
            kind: SparseKind::Conv,
            input: input.features().to_vec(),
            tape,
            pre,
            activation,
        },
    ))
}

pub(crate) fn sparse_up_layer<T: Real>(
    input: &SparseTensor4<T>,
    target: &SparseTensor4<T>,
    params: &ConvParams<T>,
    activation: Option<Activation>,
) -> Result<(SparseTensor4<T>, SparseLayerTrace<T>)> {
    let (mut out, tape) = sparse_deconv_traced(input, target.coords(), target.stride(), params)?;
    let pre = activate(&mut out, activation);
    Ok((
        out,
        SparseLayerTrace {
            kind: SparseKind::Deconv,
            input: input.features().to_vec(),
            tape,
            pre,
            activation,
        },
    ))
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// w.r.t. the layer input.
pub(crate) fn sparse_layer_backward<T: Real>(
    trace: &SparseLayerTrace<T>,
    params: &ConvParams<T>,
    grad_out: &[T],
    grads: &mut ConvParams<T>,
) -> Vec<T> {
    let g: Vec<T> = match trace.activation {
        Some(a) => grad_out.iter().zip(&trace.pre).map(|(g, p)| *g * a.derivative(*p)).collect(),
        None => grad_out.to_vec(),
    };
    let cg = match trace.kind {
        SparseKind::Conv => sparse_conv_backward(&trace.tape, &trace.input, params, &g),
        SparseKind::Deconv => sparse_deconv_backward(&trace.tape, &trace.input, params, &g),
    };
    accumulate_conv(grads, &cg.weights, cg.bias.as_deref());
    cg.input
}

/// Dense 2D convolution with "same" zero padding. Weights are laid out
/// `[ky][kx][in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2dParams<T> {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            weights: vec![T::zero(); kernel * kernel * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn random<R: Rng>(rng: &mut R, kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        let mut p = Self::zeros(kernel, in_channels, out_channels);
        let bound = (1.0 / (kernel * kernel * in_channels).max(1) as f64).sqrt();
        p.weights
            .iter_mut()
            .chain(p.bias.iter_mut())
            .for_each(|w| *w = T::of(rng.gen_range(-bound..=bound)));
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Unsupported(format!("2D kernel size {} is even", self.kernel)));
        }
        let n = self.kernel * self.kernel * self.in_channels * self.out_channels;
        if self.weights.len() != n || self.bias.len() != self.out_channels {
            return Err(Error::LengthMismatch {
                expected: n,
                found: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Conv2dParams<U> {
        Conv2dParams {
            kernel: self.kernel,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

fn chw_to_hwc<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = x[ch * h * w + p];
        }
    }
    out
}

fn hwc_to_chw<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = x[p * c + ch];
        }
    }
    out
}

/// Yields `(kernel_index, out_pos, in_pos)` for every in-bounds tap.
fn taps(kernel: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let half = (kernel / 2) as isize;
    (0..h).flat_map(move |y| {
        (0..w).flat_map(move |x| {
            (0..kernel).flat_map(move |ky| {
                (0..kernel).filter_map(move |kx| {
                    let sy = y as isize + ky as isize - half;
                    let sx = x as isize + kx as isize - half;
                    (sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize)
                        .then(|| (ky * kernel + kx, y * w + x, sy as usize * w + sx as usize))
                })
            })
        })
    })
}

/// Channel-major `C x H x W` in, channel-major out.
pub fn conv2d<T: Real>(input: &[T], h: usize, w: usize, p: &Conv2dParams<T>) -> Vec<T> {
    let (ci, co) = (p.in_channels, p.out_channels);
    let x = chw_to_hwc(input, ci, h, w);
    let mut out = vec![T::zero(); h * w * co];
    for pos in 0..h * w {
        out[pos * co..(pos + 1) * co].copy_from_slice(&p.bias);
    }
    for (k, op, ip) in taps(p.kernel, h, w) {
        let xin = &x[ip * ci..(ip + 1) * ci];
        let wk = &p.weights[k * ci * co..(k + 1) * ci * co];
        let o = &mut out[op * co..(op + 1) * co];
        for (a, &xa) in xin.iter().enumerate() {
            if xa == T::zero() {
                continue;
            }
            for (ov, &wv) in o.iter_mut().zip(&wk[a * co..(a + 1) * co]) {
                *ov += xa * wv;
            }
        }
    }
    hwc_to_chw(&out, co, h, w)
}

/// Returns the input gradient and accumulates weight/bias gradients.
pub fn conv2d_backward<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    p: &Conv2dParams<T>,
    grad_out: &[T],
    grads: &mut Conv2dParams<T>,
) -> Vec<T> {
    let (ci, co) = (p.in_channels, p.out_channels);
    let x = chw_to_hwc(input, ci, h, w);
    let g = chw_to_hwc(grad_out, co, h, w);
    let mut gx = vec![T::zero(); h * w * ci];
    for pos in 0..h * w {
        add_into(&mut grads.bias, &g[pos * co..(pos + 1) * co]);
    }
    for (k, op, ip) in taps(p.kernel, h, w) {
        let go = &g[op * co..(op + 1) * co];
        let xin = &x[ip * ci..(ip + 1) * ci];
        let wk = &p.weights[k * ci * co..(k + 1) * ci * co];
        let gw = &mut grads.weights[k * ci * co..(k + 1) * ci * co];
        let gi = &mut gx[ip * ci..(ip + 1) * ci];
        for a in 0..ci {
            let wr = &wk[a * co..(a + 1) * co];
            let mut acc = T::zero();
            for (wv, gv) in wr.iter().zip(go) {
                acc += *wv * *gv;
            }
            gi[a] += acc;
            let xa = xin[a];
            if xa != T::zero() {
                for (gwv, gv) in gw[a * co..(a + 1) * co].iter_mut().zip(go) {
                    *gwv += xa * *gv;
                }
            }
        }
    }
    hwc_to_chw(&gx, ci, h, w)
}

/// Mean-pools per-point rows into voxels; `rows[p]` is the voxel of point `p`.
pub(crate) fn pool_points<T: Real>(
    coords: &[Coord4],
    point_features: &[T],
    width: usize,
) -> Result<(SparseTensor4<T>, Vec<usize>, Vec<usize>)> {
    let mut index = std::collections::HashMap::with_capacity(coords.len());
    let mut uniq = Vec::new();
    let mut rows = Vec::with_capacity(coords.len());
    for c in coords {
        let r = *index.entry(*c).or_insert_with(|| {
            uniq.push(*c);
            uniq.len() - 1
        });
        rows.push(r);
    }
    let mut counts = vec![0usize; uniq.len()];
    let mut feats = vec![T::zero(); uniq.len() * width];
    for (p, &r) in rows.iter().enumerate() {
        counts[r] += 1;
        add_into(&mut feats[r * width..(r + 1) * width], &point_features[p * width..(p + 1) * width]);
    }
    for (r, &n) in counts.iter().enumerate() {
        let inv = T::one() / T::of(n as f64);
        feats[r * width..(r + 1) * width].iter_mut().for_each(|v| *v *= inv);
    }
    let t = SparseTensor4::from_parts(uniq, feats, width, [1; 4])?;
    Ok((t, rows, counts))
}

pub(crate) fn pool_points_backward<T: Real>(rows: &[usize], counts: &[usize], width: usize, grad: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        let inv = T::one() / T::of(counts[r] as f64);
        out.extend(grad[r * width..(r + 1) * width].iter().map(|g| *g * inv));
    }
    out
}
