use std::collections::HashMap;

use rayon::prelude::*;

use super::kernel::{build_pairs, ConvParams, KernelMap, KernelPair};
use super::{Coord4, SparseTensor4};
use crate::error::{Error, Result};
use crate::real::Real;

/// Rows below this count are accumulated on the calling thread.
const PARALLEL_ROWS: usize = 2048;

/// Everything the backward pass of one convolution needs besides the input
/// features and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTape {
    pub map: KernelMap,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
}

fn row_starts(map: &KernelMap, n_out: usize) -> Vec<usize> {
    let mut starts = vec![0usize; n_out + 1];
    for p in &map.pairs {
        starts[p.out_row as usize + 1] += 1;
    }
    for i in 0..n_out {
        starts[i + 1] += starts[i];
    }
    starts
}

fn accumulate_row<T: Real>(out: &mut [T], pairs: &[KernelPair], input: &[T], params: &ConvParams<T>) {
    let (iw, ow) = (params.in_width, params.out_width);
    if let Some(b) = &params.bias {
        out.copy_from_slice(b);
    } else {
        out.iter_mut().for_each(|v| *v = T::zero());
    }
    for p in pairs {
        let f = &input[p.in_row as usize * iw..(p.in_row as usize + 1) * iw];
        let w = params.weight(p.offset as usize);
        for (a, &fa) in f.iter().enumerate() {
            if fa == T::zero() {
                continue;
            }
            let wr = &w[a * ow..(a + 1) * ow];
            for (o, &wv) in out.iter_mut().zip(wr) {
                *o += fa * wv;
            }
        }
    }
}

/// `out[o] = bias + sum over (i, o, k) of input[i] * W_k`, rows in map order.
fn apply<T: Real>(map: &KernelMap, n_out: usize, input: &[T], params: &ConvParams<T>) -> Vec<T> {
    let ow = params.out_width;
    let starts = row_starts(map, n_out);
    let mut out = vec![T::zero(); n_out * ow];
    if ow == 0 {
        return out;
    }
    if n_out >= PARALLEL_ROWS {
        out.par_chunks_mut(ow).enumerate().for_each(|(o, row)| {
            accumulate_row(row, &map.pairs[starts[o]..starts[o + 1]], input, params);
        });
    } else {
        for (o, row) in out.chunks_mut(ow).enumerate() {
            accumulate_row(row, &map.pairs[starts[o]..starts[o + 1]], input, params);
        }
    }
    out
}

fn apply_backward<T: Real>(tape: &ConvTape, input: &[T], params: &ConvParams<T>, grad_out: &[T]) -> ConvGrads<T> {
    let (iw, ow) = (params.in_width, params.out_width);
    let mut g_in = vec![T::zero(); tape.n_in * iw];
    let mut g_w = vec![T::zero(); params.weights.len()];
    for p in &tape.map.pairs {
        let (i, o, k) = (p.in_row as usize, p.out_row as usize, p.offset as usize);
        let go = &grad_out[o * ow..(o + 1) * ow];
        if go.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let f = &input[i * iw..(i + 1) * iw];
        let w = params.weight(k);
        let gw = &mut g_w[k * iw * ow..(k + 1) * iw * ow];
        let gi = &mut g_in[i * iw..(i + 1) * iw];
        for a in 0..iw {
            let wr = &w[a * ow..(a + 1) * ow];
            let mut acc = T::zero();
            for (wv, gv) in wr.iter().zip(go) {
                acc += *wv * *gv;
            }
            gi[a] += acc;
            let fa = f[a];
            if fa != T::zero() {
                for (gwv, gv) in gw[a * ow..(a + 1) * ow].iter_mut().zip(go) {
                    *gwv += fa * *gv;
                }
            }
        }
    }
    let bias = params.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); ow];
        for row in grad_out.chunks(ow.max(1)) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += *v;
            }
        }
        gb
    });
    ConvGrads {
        input: g_in,
        weights: g_w,
        bias,
    }
}

fn check_input<T: Real>(input: &SparseTensor4<T>, params: &ConvParams<T>) -> Result<()> {
    params.validate()?;
    if input.width() != params.in_width {
        return Err(Error::WidthMismatch {
            expected: params.in_width,
            found: input.width(),
        });
    }
    Ok(())
}

/// Sparse convolution with the kernel map kept for the backward pass.
///
/// With unit stride the output sites are the input sites. Otherwise they are
/// the distinct input coordinates floored to the new tensor stride
/// `input.stride * params.stride`, in first-occurrence order.
pub fn sparse_conv_traced<T: Real>(
    input: &SparseTensor4<T>,
    params: &ConvParams<T>,
) -> Result<(SparseTensor4<T>, ConvTape)> {
    check_input(input, params)?;
    let in_stride = input.stride();
    let out_stride: [i32; 4] = std::array::from_fn(|a| in_stride[a] * params.stride[a]);
    let out_coords: Vec<Coord4> = if params.stride == [1; 4] {
        input.coords().to_vec()
    } else {
        let mut seen = HashMap::with_capacity(input.len());
        let mut out = Vec::new();
        for c in input.coords() {
            let f = c.floor_to(out_stride);
            if seen.insert(f, ()).is_none() {
                out.push(f);
            }
        }
        out
    };
    let map = build_pairs(input.index(), in_stride, &out_coords, params.kernel)?;
    let features = apply(&map, out_coords.len(), input.features(), params);
    let n_out = out_coords.len();
    let out = SparseTensor4::from_parts(out_coords, features, params.out_width, out_stride)?;
    Ok((
        out,
        ConvTape {
            map,
            n_in: input.len(),
            n_out,
        },
    ))
}

pub fn sparse_conv<T: Real>(input: &SparseTensor4<T>, params: &ConvParams<T>) -> Result<SparseTensor4<T>> {
    sparse_conv_traced(input, params).map(|(t, _)| t)
}

/// Gradients of a convolution given the upstream gradient of its output.
pub fn sparse_conv_backward<T: Real>(
    tape: &ConvTape,
    input_features: &[T],
    params: &ConvParams<T>,
    grad_out: &[T],
) -> ConvGrads<T> {
    apply_backward(tape, input_features, params, grad_out)
}

/// Transposed sparse convolution from `input` onto `target` coordinates of
/// stride `target_stride`.
///
/// The pairing is the one a strided [`sparse_conv`] from the targets to the
/// input sites would use, walked in reverse. With `params` equal to
/// `conv_params.transposed()` this is the adjoint of that convolution.
pub fn sparse_deconv_traced<T: Real>(
    input: &SparseTensor4<T>,
    target: &[Coord4],
    target_stride: [i32; 4],
    params: &ConvParams<T>,
) -> Result<(SparseTensor4<T>, ConvTape)> {
    check_input(input, params)?;
    let expected: [i32; 4] = std::array::from_fn(|a| target_stride[a] * params.stride[a]);
    if expected != input.stride() {
        return Err(Error::StrideMismatch(format!(
            "input stride {:?} is not target stride {:?} times conv stride {:?}",
            input.stride(),
            target_stride,
            params.stride
        )));
    }
    let mut target_index = HashMap::with_capacity(target.len());
    for (r, c) in target.iter().enumerate() {
        if !c.is_aligned(target_stride) {
            return Err(Error::MisalignedCoordinate {
                coord: *c,
                stride: target_stride,
            });
        }
        if target_index.insert(*c, r).is_some() {
            return Err(Error::DuplicateCoordinate(*c));
        }
    }
    let forward = build_pairs(&target_index, target_stride, input.coords(), params.kernel)?;
    let mut pairs: Vec<KernelPair> = forward
        .pairs
        .into_iter()
        .map(|p| KernelPair {
            out_row: p.in_row,
            offset: p.offset,
            in_row: p.out_row,
        })
        .collect();
    pairs.sort_unstable();
    let map = KernelMap { pairs };
    let features = apply(&map, target.len(), input.features(), params);
    let out = SparseTensor4::from_parts(target.to_vec(), features, params.out_width, target_stride)?;
    Ok((
        out,
        ConvTape {
            map,
            n_in: input.len(),
            n_out: target.len(),
        },
    ))
}

pub fn sparse_deconv<T: Real>(
    input: &SparseTensor4<T>,
    target: &[Coord4],
    target_stride: [i32; 4],
    params: &ConvParams<T>,
) -> Result<SparseTensor4<T>> {
    sparse_deconv_traced(input, target, target_stride, params).map(|(t, _)| t)
}

pub fn sparse_deconv_backward<T: Real>(
    tape: &ConvTape,
    input_features: &[T],
    params: &ConvParams<T>,
    grad_out: &[T],
) -> ConvGrads<T> {
    apply_backward(tape, input_features, params, grad_out)
}
