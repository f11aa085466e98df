//! Forward and backward kernels for every operation the network needs.
//!
//! Convolutions are direct (shift-and-accumulate over kernel offsets); at the
//! volume sizes this engine targets that beats the bookkeeping cost of im2col
//! and keeps the inner loops contiguous for vectorization. All reductions run
//! in ascending index order so results are reproducible bit-for-bit, and each
//! output element is produced by exactly one thread, which makes the rayon
//! parallel paths reproducible as well.

use rayon::prelude::*;

use super::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

struct ConvDims {
    c_in: usize,
    c_out: usize,
    k: usize,
    in_sp: [usize; 3],
    out_sp: [usize; 3],
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "conv3d input must be rank 4 [C,D,H,W], got {:?}",
            input.shape()
        )));
    }
    if kernel.rank() != 5 {
        return Err(Error::shape(format!(
            "conv3d kernel must be rank 5 [Co,Ci,k,k,k], got {:?}",
            kernel.shape()
        )));
    }
    let (c_in, d, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (c_out, kc, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kernel.shape()[3] != k || kernel.shape()[4] != k {
        return Err(Error::shape(format!(
            "conv3d kernel must be cubic, got {:?}",
            kernel.shape()
        )));
    }
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv3d kernel expects {kc} input channels but input {:?} has {c_in}",
            input.shape()
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv3d bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv3d kernel size {k} must be odd")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("conv3d stride {stride} must be 1 or 2")));
    }
    if stride == 1 && padding != (k - 1) / 2 {
        return Err(Error::invalid(format!(
            "conv3d with stride 1 requires padding {} for kernel {k}, got {padding}",
            (k - 1) / 2
        )));
    }
    if padding >= k {
        return Err(Error::invalid(format!(
            "conv3d padding {padding} must be smaller than kernel {k}"
        )));
    }
    let out_len = |n: usize| (n + 2 * padding - k) / stride + 1;
    if d + 2 * padding < k || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(format!(
            "conv3d input {:?} too small for kernel {:?} with padding {padding}",
            input.shape(),
            kernel.shape()
        )));
    }
    Ok(ConvDims {
        c_in,
        c_out,
        k,
        in_sp: [d, h, w],
        out_sp: [out_len(d), out_len(h), out_len(w)],
    })
}

/// Valid output index range along one axis for a given kernel offset, so that
/// `o * stride + off` stays inside `[0, in_len)`.
#[inline]
fn axis_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let max_i = in_len as isize - 1 - off;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Zero-padded neighbor copies of a row: `left[i] = row[i-1]` and
/// `right[i] = row[i+1]`, with the out-of-range lane left at zero. The
/// padding lane turns the dropped edge tap into `+ w·0`, which is exact, so
/// every lane runs the same full expression and the loop trip count is the
/// whole row — a multiple of the vector width instead of `N-2` plus scalar
/// edge handling. Worth the copies only when several accumulators amortize
/// them; the one- and two-channel cores below keep the scalar edges.
#[inline]
fn shifts<T: Scalar, const N: usize>(row: &[T; N]) -> ([T; N], [T; N]) {
    let mut left = [T::zero(); N];
    let mut right = [T::zero(); N];
    left[1..].copy_from_slice(&row[..N - 1]);
    right[..N - 1].copy_from_slice(&row[1..]);
    (left, right)
}

/// One fused pass of a 3-tap row stencil: `acc[i] += w0·row[i-1] + w1·row[i]
/// + w2·row[i+1]` with out-of-range taps dropped. Rows at these volume sizes
/// are short, so visiting each row once for all three kernel offsets beats
/// three separate passes by a wide margin.
#[inline]
fn stencil3_core<T: Scalar, const N: usize>(acc: &mut [T], row: &[T], w0: T, w1: T, w2: T) {
    let acc: &mut [T; N] = acc.try_into().expect("stencil width");
    let row: &[T; N] = row.try_into().expect("stencil width");
    acc[0] = acc[0] + w1 * row[0] + w2 * row[1];
    for i in 1..N - 1 {
        acc[i] = acc[i] + w0 * row[i - 1] + w1 * row[i] + w2 * row[i + 1];
    }
    acc[N - 1] = acc[N - 1] + w0 * row[N - 2] + w1 * row[N - 1];
}

/// Dispatch on the row width so the vectorizer sees a fixed trip count for
/// the sizes the network actually uses.
#[inline]
fn stencil3_add<T: Scalar>(acc: &mut [T], row: &[T], w0: T, w1: T, w2: T) {
    match acc.len() {
        4 => stencil3_core::<T, 4>(acc, row, w0, w1, w2),
        8 => stencil3_core::<T, 8>(acc, row, w0, w1, w2),
        16 => stencil3_core::<T, 16>(acc, row, w0, w1, w2),
        32 => stencil3_core::<T, 32>(acc, row, w0, w1, w2),
        n => {
            acc[0] = acc[0] + w1 * row[0] + w2 * row[1];
            for i in 1..n - 1 {
                acc[i] = acc[i] + w0 * row[i - 1] + w1 * row[i] + w2 * row[i + 1];
            }
            acc[n - 1] = acc[n - 1] + w0 * row[n - 2] + w1 * row[n - 1];
        }
    }
}

/// Two-accumulator variant: the row loads are shared between a pair of
/// output channels, which roughly doubles arithmetic per byte moved.
#[inline]
fn stencil3_core2<T: Scalar, const N: usize>(
    acc0: &mut [T],
    acc1: &mut [T],
    row: &[T],
    wa: (T, T, T),
    wb: (T, T, T),
) {
    let acc0: &mut [T; N] = acc0.try_into().expect("stencil width");
    let acc1: &mut [T; N] = acc1.try_into().expect("stencil width");
    let row: &[T; N] = row.try_into().expect("stencil width");
    acc0[0] = acc0[0] + wa.1 * row[0] + wa.2 * row[1];
    acc1[0] = acc1[0] + wb.1 * row[0] + wb.2 * row[1];
    for i in 1..N - 1 {
        acc0[i] = acc0[i] + wa.0 * row[i - 1] + wa.1 * row[i] + wa.2 * row[i + 1];
        acc1[i] = acc1[i] + wb.0 * row[i - 1] + wb.1 * row[i] + wb.2 * row[i + 1];
    }
    acc0[N - 1] = acc0[N - 1] + wa.0 * row[N - 2] + wa.1 * row[N - 1];
    acc1[N - 1] = acc1[N - 1] + wb.0 * row[N - 2] + wb.1 * row[N - 1];
}

#[inline]
fn stencil3_add2<T: Scalar>(
    acc0: &mut [T],
    acc1: &mut [T],
    row: &[T],
    wa: (T, T, T),
    wb: (T, T, T),
) {
    match acc0.len() {
        4 => stencil3_core2::<T, 4>(acc0, acc1, row, wa, wb),
        8 => stencil3_core2::<T, 8>(acc0, acc1, row, wa, wb),
        16 => stencil3_core2::<T, 16>(acc0, acc1, row, wa, wb),
        32 => stencil3_core2::<T, 32>(acc0, acc1, row, wa, wb),
        _ => {
            stencil3_add(acc0, row, wa.0, wa.1, wa.2);
            stencil3_add(acc1, row, wb.0, wb.1, wb.2);
        }
    }
}

/// Full in-plane 3x3 stencil for one interior output row: three input rows
/// and nine taps in a single pass. `w` is the kh-major 3x3 weight slab.
#[inline]
fn stencil33_core<T: Scalar, const N: usize>(
    acc: &mut [T],
    r0: &[T],
    r1: &[T],
    r2: &[T],
    w: &[T],
) {
    let acc: &mut [T; N] = acc.try_into().expect("stencil width");
    let r0: &[T; N] = r0.try_into().expect("stencil width");
    let r1: &[T; N] = r1.try_into().expect("stencil width");
    let r2: &[T; N] = r2.try_into().expect("stencil width");
    acc[0] = acc[0]
        + w[1] * r0[0]
        + w[2] * r0[1]
        + w[4] * r1[0]
        + w[5] * r1[1]
        + w[7] * r2[0]
        + w[8] * r2[1];
    for i in 1..N - 1 {
        acc[i] = acc[i]
            + w[0] * r0[i - 1]
            + w[1] * r0[i]
            + w[2] * r0[i + 1]
            + w[3] * r1[i - 1]
            + w[4] * r1[i]
            + w[5] * r1[i + 1]
            + w[6] * r2[i - 1]
            + w[7] * r2[i]
            + w[8] * r2[i + 1];
    }
    acc[N - 1] = acc[N - 1]
        + w[0] * r0[N - 2]
        + w[1] * r0[N - 1]
        + w[3] * r1[N - 2]
        + w[4] * r1[N - 1]
        + w[6] * r2[N - 2]
        + w[7] * r2[N - 1];
}

#[inline]
fn stencil33_add<T: Scalar>(acc: &mut [T], r0: &[T], r1: &[T], r2: &[T], w: &[T]) {
    match acc.len() {
        4 => stencil33_core::<T, 4>(acc, r0, r1, r2, w),
        8 => stencil33_core::<T, 8>(acc, r0, r1, r2, w),
        16 => stencil33_core::<T, 16>(acc, r0, r1, r2, w),
        32 => stencil33_core::<T, 32>(acc, r0, r1, r2, w),
        _ => {
            stencil3_add(acc, r0, w[0], w[1], w[2]);
            stencil3_add(acc, r1, w[3], w[4], w[5]);
            stencil3_add(acc, r2, w[6], w[7], w[8]);
        }
    }
}

#[inline]
fn stencil33_core2<T: Scalar, const N: usize>(
    acc0: &mut [T],
    acc1: &mut [T],
    r0: &[T],
    r1: &[T],
    r2: &[T],
    wa: &[T],
    wb: &[T],
) {
    let acc0: &mut [T; N] = acc0.try_into().expect("stencil width");
    let acc1: &mut [T; N] = acc1.try_into().expect("stencil width");
    let r0: &[T; N] = r0.try_into().expect("stencil width");
    let r1: &[T; N] = r1.try_into().expect("stencil width");
    let r2: &[T; N] = r2.try_into().expect("stencil width");
    acc0[0] = acc0[0]
        + wa[1] * r0[0]
        + wa[2] * r0[1]
        + wa[4] * r1[0]
        + wa[5] * r1[1]
        + wa[7] * r2[0]
        + wa[8] * r2[1];
    acc1[0] = acc1[0]
        + wb[1] * r0[0]
        + wb[2] * r0[1]
        + wb[4] * r1[0]
        + wb[5] * r1[1]
        + wb[7] * r2[0]
        + wb[8] * r2[1];
    for i in 1..N - 1 {
        acc0[i] = acc0[i]
            + wa[0] * r0[i - 1]
            + wa[1] * r0[i]
            + wa[2] * r0[i + 1]
            + wa[3] * r1[i - 1]
            + wa[4] * r1[i]
            + wa[5] * r1[i + 1]
            + wa[6] * r2[i - 1]
            + wa[7] * r2[i]
            + wa[8] * r2[i + 1];
        acc1[i] = acc1[i]
            + wb[0] * r0[i - 1]
            + wb[1] * r0[i]
            + wb[2] * r0[i + 1]
            + wb[3] * r1[i - 1]
            + wb[4] * r1[i]
            + wb[5] * r1[i + 1]
            + wb[6] * r2[i - 1]
            + wb[7] * r2[i]
            + wb[8] * r2[i + 1];
    }
    acc0[N - 1] = acc0[N - 1]
        + wa[0] * r0[N - 2]
        + wa[1] * r0[N - 1]
        + wa[3] * r1[N - 2]
        + wa[4] * r1[N - 1]
        + wa[6] * r2[N - 2]
        + wa[7] * r2[N - 1];
    acc1[N - 1] = acc1[N - 1]
        + wb[0] * r0[N - 2]
        + wb[1] * r0[N - 1]
        + wb[3] * r1[N - 2]
        + wb[4] * r1[N - 1]
        + wb[6] * r2[N - 2]
        + wb[7] * r2[N - 1];
}

#[inline]
fn stencil33_add2<T: Scalar>(
    acc0: &mut [T],
    acc1: &mut [T],
    r0: &[T],
    r1: &[T],
    r2: &[T],
    wa: &[T],
    wb: &[T],
) {
    match acc0.len() {
        4 => stencil33_core2::<T, 4>(acc0, acc1, r0, r1, r2, wa, wb),
        8 => stencil33_core2::<T, 8>(acc0, acc1, r0, r1, r2, wa, wb),
        16 => stencil33_core2::<T, 16>(acc0, acc1, r0, r1, r2, wa, wb),
        32 => stencil33_core2::<T, 32>(acc0, acc1, r0, r1, r2, wa, wb),
        _ => {
            stencil33_add(acc0, r0, r1, r2, wa);
            stencil33_add(acc1, r0, r1, r2, wb);
        }
    }
}

/// Four-accumulator variant. Single-precision rows span too few vectors to
/// hide the FMA latency with one or two accumulation chains; four channels
/// per row sweep keeps the pipeline busy.
#[inline]
fn stencil33_core4<T: Scalar, const N: usize>(
    acc: [&mut [T]; 4],
    r0: &[T],
    r1: &[T],
    r2: &[T],
    w: [&[T]; 4],
) {
    let [a0, a1, a2, a3] = acc;
    let a0: &mut [T; N] = a0.try_into().expect("stencil width");
    let a1: &mut [T; N] = a1.try_into().expect("stencil width");
    let a2: &mut [T; N] = a2.try_into().expect("stencil width");
    let a3: &mut [T; N] = a3.try_into().expect("stencil width");
    let r0: &[T; N] = r0.try_into().expect("stencil width");
    let r1: &[T; N] = r1.try_into().expect("stencil width");
    let r2: &[T; N] = r2.try_into().expect("stencil width");
    let w: [&[T; 9]; 4] = [
        w[0][..9].try_into().expect("weight slab"),
        w[1][..9].try_into().expect("weight slab"),
        w[2][..9].try_into().expect("weight slab"),
        w[3][..9].try_into().expect("weight slab"),
    ];
    let (l0, h0) = shifts(r0);
    let (l1, h1) = shifts(r1);
    let (l2, h2) = shifts(r2);
    for i in 0..N {
        a0[i] = a0[i]
            + w[0][0] * l0[i]
            + w[0][1] * r0[i]
            + w[0][2] * h0[i]
            + w[0][3] * l1[i]
            + w[0][4] * r1[i]
            + w[0][5] * h1[i]
            + w[0][6] * l2[i]
            + w[0][7] * r2[i]
            + w[0][8] * h2[i];
        a1[i] = a1[i]
            + w[1][0] * l0[i]
            + w[1][1] * r0[i]
            + w[1][2] * h0[i]
            + w[1][3] * l1[i]
            + w[1][4] * r1[i]
            + w[1][5] * h1[i]
            + w[1][6] * l2[i]
            + w[1][7] * r2[i]
            + w[1][8] * h2[i];
        a2[i] = a2[i]
            + w[2][0] * l0[i]
            + w[2][1] * r0[i]
            + w[2][2] * h0[i]
            + w[2][3] * l1[i]
            + w[2][4] * r1[i]
            + w[2][5] * h1[i]
            + w[2][6] * l2[i]
            + w[2][7] * r2[i]
            + w[2][8] * h2[i];
        a3[i] = a3[i]
            + w[3][0] * l0[i]
            + w[3][1] * r0[i]
            + w[3][2] * h0[i]
            + w[3][3] * l1[i]
            + w[3][4] * r1[i]
            + w[3][5] * h1[i]
            + w[3][6] * l2[i]
            + w[3][7] * r2[i]
            + w[3][8] * h2[i];
    }
}

#[inline]
fn stencil33_add4<T: Scalar>(acc: [&mut [T]; 4], r0: &[T], r1: &[T], r2: &[T], w: [&[T]; 4]) {
    match r0.len() {
        4 => stencil33_core4::<T, 4>(acc, r0, r1, r2, w),
        8 => stencil33_core4::<T, 8>(acc, r0, r1, r2, w),
        16 => stencil33_core4::<T, 16>(acc, r0, r1, r2, w),
        32 => stencil33_core4::<T, 32>(acc, r0, r1, r2, w),
        _ => {
            let [a0, a1, a2, a3] = acc;
            stencil33_add(a0, r0, r1, r2, w[0]);
            stencil33_add(a1, r0, r1, r2, w[1]);
            stencil33_add(a2, r0, r1, r2, w[2]);
            stencil33_add(a3, r0, r1, r2, w[3]);
        }
    }
}

#[inline]
fn stencil3_add4<T: Scalar>(acc: [&mut [T]; 4], row: &[T], w: [(T, T, T); 4]) {
    let [a0, a1, a2, a3] = acc;
    stencil3_add2(a0, a1, row, w[0], w[1]);
    stencil3_add2(a2, a3, row, w[2], w[3]);
}

#[inline]
fn row_dots3_core<T: Scalar, const N: usize>(go: &[T], in_row: &[T]) -> (T, T, T) {
    let go: &[T; N] = go.try_into().expect("row width");
    let in_row: &[T; N] = in_row.try_into().expect("row width");
    let mut a0 = T::zero();
    let mut a1 = go[0] * in_row[0];
    let mut a2 = T::zero();
    for i in 1..N {
        a0 = a0 + go[i] * in_row[i - 1];
        a1 = a1 + go[i] * in_row[i];
        a2 = a2 + go[i - 1] * in_row[i];
    }
    (a0, a1, a2)
}

/// Dot products of `go` against `in_row` at the three k=3 alignments,
/// returned in kernel-offset order kw = 0, 1, 2.
#[inline]
fn row_dots3<T: Scalar>(go: &[T], in_row: &[T]) -> (T, T, T) {
    match go.len() {
        4 => row_dots3_core::<T, 4>(go, in_row),
        8 => row_dots3_core::<T, 8>(go, in_row),
        16 => row_dots3_core::<T, 16>(go, in_row),
        32 => row_dots3_core::<T, 32>(go, in_row),
        _ => {
            let mut a0 = T::zero();
            let mut a1 = go[0] * in_row[0];
            let mut a2 = T::zero();
            for i in 1..go.len() {
                a0 = a0 + go[i] * in_row[i - 1];
                a1 = a1 + go[i] * in_row[i];
                a2 = a2 + go[i - 1] * in_row[i];
            }
            (a0, a1, a2)
        }
    }
}

/// 3D cross-correlation with bias: input `[Ci,D,H,W]`, kernel `[Co,Ci,k,k,k]`,
/// bias `[Co]`. Output spatial side is `(n + 2p - k)/stride + 1`.
#[inline]
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    T::conv3d_fwd(input, kernel, bias, stride, padding)
}

pub(super) fn conv3d_body<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let dims = conv_dims(input, kernel, bias, stride, padding)?;
    let [d, h, w] = dims.in_sp;
    let [od, oh, ow] = dims.out_sp;
    let (in_sp, out_sp) = (d * h * w, od * oh * ow);
    let k = dims.k;
    let in_data = input.data();
    let ker = kernel.data();
    let b = bias.data();
    let p = padding as isize;

    let fast3 = stride == 1 && k == 3 && w >= 2;
    let mut out = vec![T::zero(); dims.c_out * out_sp];
    if fast3 {
        // Output channels go in blocks so each swept input row feeds several
        // accumulators: per channel the summation order is unchanged, the
        // loads are amortized. Four channels for f32 (short rows need more
        // independent accumulation chains to hide FMA latency), two for f64.
        let bw = if T::DTYPE == Dtype::F32 { 4 } else { 2 };
        out.par_chunks_mut(bw * out_sp).enumerate().for_each(|(blk, out_blk)| {
            let co = bw * blk;
            let bs = out_blk.len() / out_sp;
            let mut accs = [
                vec![T::zero(); w],
                vec![T::zero(); w],
                vec![T::zero(); w],
                vec![T::zero(); w],
            ];
            for o_d in 0..od {
                for o_h in 0..oh {
                    for a in accs.iter_mut().take(bs) {
                        for v in a.iter_mut() {
                            *v = T::zero();
                        }
                    }
                    let interior = o_h >= 1 && o_h + 1 < h;
                    for ci in 0..dims.c_in {
                        let in_c = &in_data[ci * in_sp..(ci + 1) * in_sp];
                        let kers: [&[T]; 4] = std::array::from_fn(|j| {
                            &ker[((co + j.min(bs - 1)) * dims.c_in + ci) * 27..][..27]
                        });
                        for kd in 0..3usize {
                            let i_d = o_d as isize + kd as isize - 1;
                            if i_d < 0 || i_d >= d as isize {
                                continue;
                            }
                            let plane = i_d as usize * h * w;
                            if interior {
                                let base = plane + (o_h - 1) * w;
                                let rows = &in_c[base..base + 3 * w];
                                let (r0, r1, r2) = (&rows[..w], &rows[w..2 * w], &rows[2 * w..]);
                                let ws: [&[T]; 4] =
                                    std::array::from_fn(|j| &kers[j][kd * 9..kd * 9 + 9]);
                                let [a0, a1, a2, a3] = &mut accs;
                                match bs {
                                    4 => stencil33_add4([a0, a1, a2, a3], r0, r1, r2, ws),
                                    3 => {
                                        stencil33_add2(a0, a1, r0, r1, r2, ws[0], ws[1]);
                                        stencil33_add(a2, r0, r1, r2, ws[2]);
                                    }
                                    2 => stencil33_add2(a0, a1, r0, r1, r2, ws[0], ws[1]),
                                    _ => stencil33_add(a0, r0, r1, r2, ws[0]),
                                }
                                continue;
                            }
                            for kh in 0..3usize {
                                let i_h = o_h as isize + kh as isize - 1;
                                if i_h < 0 || i_h >= h as isize {
                                    continue;
                                }
                                let row = &in_c[plane + i_h as usize * w..][..w];
                                let t = (kd * 3 + kh) * 3;
                                let ws: [(T, T, T); 4] = std::array::from_fn(|j| {
                                    (kers[j][t], kers[j][t + 1], kers[j][t + 2])
                                });
                                let [a0, a1, a2, a3] = &mut accs;
                                match bs {
                                    4 => stencil3_add4([a0, a1, a2, a3], row, ws),
                                    3 => {
                                        stencil3_add2(a0, a1, row, ws[0], ws[1]);
                                        stencil3_add(a2, row, ws[2].0, ws[2].1, ws[2].2);
                                    }
                                    2 => stencil3_add2(a0, a1, row, ws[0], ws[1]),
                                    _ => stencil3_add(a0, row, ws[0].0, ws[0].1, ws[0].2),
                                }
                            }
                        }
                    }
                    let at = (o_d * oh + o_h) * ow;
                    for (j, a) in accs.iter().take(bs).enumerate() {
                        out_blk[j * out_sp + at..j * out_sp + at + ow].copy_from_slice(a);
                    }
                }
            }
            for (j, out_ch) in out_blk.chunks_mut(out_sp).enumerate() {
                let bias_v = b[co + j];
                for v in out_ch.iter_mut() {
                    *v = *v + bias_v;
                }
            }
        });
        return Tensor::new(&[dims.c_out, od, oh, ow], out);
    }
    out.par_chunks_mut(out_sp).enumerate().for_each(|(co, out_c)| {
        for ci in 0..dims.c_in {
            let in_c = &in_data[ci * in_sp..(ci + 1) * in_sp];
            let ker_c = &ker[(co * dims.c_in + ci) * k * k * k..];
            for kd in 0..k {
                let off_d = kd as isize - p;
                let (dlo, dhi) = axis_range(od, d, stride, off_d);
                for kh in 0..k {
                    let off_h = kh as isize - p;
                    let (hlo, hhi) = axis_range(oh, h, stride, off_h);
                    for kw in 0..k {
                        let wgt = ker_c[(kd * k + kh) * k + kw];
                        let off_w = kw as isize - p;
                        let (wlo, whi) = axis_range(ow, w, stride, off_w);
                        if wlo >= whi {
                            continue;
                        }
                        for o_d in dlo..dhi {
                            let i_d = (o_d * stride) as isize + off_d;
                            for o_h in hlo..hhi {
                                let i_h = (o_h * stride) as isize + off_h;
                                let out_row = &mut out_c[o_d * oh * ow + o_h * ow..][..ow];
                                let in_row =
                                    &in_c[i_d as usize * h * w + i_h as usize * w..][..w];
                                if stride == 1 {
                                    let src_lo = (wlo as isize + off_w) as usize;
                                    let src = &in_row[src_lo..src_lo + (whi - wlo)];
                                    for (o, i) in out_row[wlo..whi].iter_mut().zip(src) {
                                        *o = *o + wgt * *i;
                                    }
                                } else {
                                    for o_w in wlo..whi {
                                        let i_w = (o_w * stride) as isize + off_w;
                                        out_row[o_w] =
                                            out_row[o_w] + wgt * in_row[i_w as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let bias_v = b[co];
        for v in out_c.iter_mut() {
            *v = *v + bias_v;
        }
    });
    Tensor::new(
        &[dims.c_out, od, oh, ow],
        out,
    )
}

/// Gradients of `conv3d` w.r.t. (input, kernel, bias) given upstream
/// `grad_out`. The input gradient is skipped when `need_input` is false.
#[allow(clippy::type_complexity)]
#[inline]
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    T::conv3d_bwd(input, kernel, grad_out, stride, padding, need_input)
}

#[allow(clippy::type_complexity)]
pub(super) fn conv3d_backward_body<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let bias = Tensor::zeros(&[kernel.shape()[0]]);
    let dims = conv_dims(input, kernel, &bias, stride, padding)?;
    let [d, h, w] = dims.in_sp;
    let [od, oh, ow] = dims.out_sp;
    if grad_out.shape() != [dims.c_out, od, oh, ow] {
        return Err(Error::shape(format!(
            "conv3d grad_out shape {:?} does not match output shape {:?}",
            grad_out.shape(),
            [dims.c_out, od, oh, ow]
        )));
    }
    let (in_sp, out_sp) = (d * h * w, od * oh * ow);
    let k = dims.k;
    let p = padding as isize;
    let in_data = input.data();
    let ker = kernel.data();
    let go = grad_out.data();

    // bias: plain spatial sums per output channel
    let mut gb = vec![T::zero(); dims.c_out];
    gb.par_iter_mut().enumerate().for_each(|(co, slot)| {
        let mut acc = T::zero();
        for &v in &go[co * out_sp..(co + 1) * out_sp] {
            acc = acc + v;
        }
        *slot = acc;
    });

    // kernel: correlate input against grad_out per (co, ci, offset)
    let fast3 = stride == 1 && k == 3 && w >= 2;
    let kvol = k * k * k;
    let mut gk = vec![T::zero(); dims.c_out * dims.c_in * kvol];
    gk.par_chunks_mut(dims.c_in * kvol)
        .enumerate()
        .for_each(|(co, gk_co)| {
            let go_c = &go[co * out_sp..(co + 1) * out_sp];
            if fast3 {
                for ci in 0..dims.c_in {
                    let in_c = &in_data[ci * in_sp..(ci + 1) * in_sp];
                    for kd in 0..3usize {
                        let off_d = kd as isize - 1;
                        let (dlo, dhi) = axis_range(od, d, 1, off_d);
                        for kh in 0..3usize {
                            let off_h = kh as isize - 1;
                            let (hlo, hhi) = axis_range(oh, h, 1, off_h);
                            let mut acc = (T::zero(), T::zero(), T::zero());
                            for o_d in dlo..dhi {
                                let plane = (o_d as isize + off_d) as usize * h * w;
                                for o_h in hlo..hhi {
                                    let in_row =
                                        &in_c[plane + (o_h as isize + off_h) as usize * w..][..w];
                                    let go_row = &go_c[(o_d * oh + o_h) * ow..][..ow];
                                    let (d0, d1, d2) = row_dots3(go_row, in_row);
                                    acc = (acc.0 + d0, acc.1 + d1, acc.2 + d2);
                                }
                            }
                            let t = ci * kvol + (kd * 3 + kh) * 3;
                            gk_co[t] = acc.0;
                            gk_co[t + 1] = acc.1;
                            gk_co[t + 2] = acc.2;
                        }
                    }
                }
                return;
            }
            for ci in 0..dims.c_in {
                let in_c = &in_data[ci * in_sp..(ci + 1) * in_sp];
                for kd in 0..k {
                    let off_d = kd as isize - p;
                    let (dlo, dhi) = axis_range(od, d, stride, off_d);
                    for kh in 0..k {
                        let off_h = kh as isize - p;
                        let (hlo, hhi) = axis_range(oh, h, stride, off_h);
                        for kw in 0..k {
                            let off_w = kw as isize - p;
                            let (wlo, whi) = axis_range(ow, w, stride, off_w);
                            let mut acc = T::zero();
                            for o_d in dlo..dhi {
                                let i_d = (o_d * stride) as isize + off_d;
                                for o_h in hlo..hhi {
                                    let i_h = (o_h * stride) as isize + off_h;
                                    let go_row = &go_c[o_d * oh * ow + o_h * ow..][..ow];
                                    let in_row =
                                        &in_c[i_d as usize * h * w + i_h as usize * w..][..w];
                                    if stride == 1 {
                                        let src_lo = (wlo as isize + off_w) as usize;
                                        let src = &in_row[src_lo..src_lo + (whi - wlo)];
                                        for (g, i) in go_row[wlo..whi].iter().zip(src) {
                                            acc = acc + *g * *i;
                                        }
                                    } else {
                                        for o_w in wlo..whi {
                                            let i_w = (o_w * stride) as isize + off_w;
                                            acc = acc + go_row[o_w] * in_row[i_w as usize];
                                        }
                                    }
                                }
                            }
                            gk_co[ci * kvol + (kd * k + kh) * k + kw] = acc;
                        }
                    }
                }
            }
        });

    // input: scatter grad_out back through the kernel, one input channel per task
    let gi = if need_input {
        let mut gi = vec![T::zero(); dims.c_in * in_sp];
        if fast3 {
            // Gather form of the scatter below: each input row collects
            // grad_out taps through the spatially flipped kernel. Input
            // channels go in blocks so the grad_out rows are read once per
            // several accumulators; same block widths as the forward pass.
            let bw = if T::DTYPE == Dtype::F32 { 4 } else { 2 };
            gi.par_chunks_mut(bw * in_sp).enumerate().for_each(|(blk, gi_blk)| {
                let ci = bw * blk;
                let bs = gi_blk.len() / in_sp;
                let mut accs = [
                    vec![T::zero(); w],
                    vec![T::zero(); w],
                    vec![T::zero(); w],
                    vec![T::zero(); w],
                ];
                for i_d in 0..d {
                    for i_h in 0..h {
                        for a in accs.iter_mut().take(bs) {
                            for v in a.iter_mut() {
                                *v = T::zero();
                            }
                        }
                        let interior = i_h >= 1 && i_h + 1 < oh;
                        for co in 0..dims.c_out {
                            let go_c = &go[co * out_sp..(co + 1) * out_sp];
                            let kers: [&[T]; 4] = std::array::from_fn(|j| {
                                &ker[(co * dims.c_in + ci + j.min(bs - 1)) * kvol..][..kvol]
                            });
                            for kd in 0..3usize {
                                let o_d = i_d as isize + 1 - kd as isize;
                                if o_d < 0 || o_d >= od as isize {
                                    continue;
                                }
                                let plane = o_d as usize * oh * ow;
                                if interior {
                                    // kh and kw both flip in the gather form,
                                    // so the in-plane slab is fully reversed.
                                    let mut wfs = [[T::zero(); 9]; 4];
                                    for (j, wf) in wfs.iter_mut().enumerate().take(bs) {
                                        let slab = &kers[j][kd * 9..kd * 9 + 9];
                                        for (s, slot) in wf.iter_mut().enumerate() {
                                            *slot = slab[8 - s];
                                        }
                                    }
                                    let base = plane + (i_h - 1) * ow;
                                    let rows = &go_c[base..base + 3 * ow];
                                    let (r0, r1, r2) =
                                        (&rows[..ow], &rows[ow..2 * ow], &rows[2 * ow..]);
                                    let ws: [&[T]; 4] =
                                        std::array::from_fn(|j| &wfs[j.min(bs - 1)][..]);
                                    let [a0, a1, a2, a3] = &mut accs;
                                    match bs {
                                        4 => stencil33_add4([a0, a1, a2, a3], r0, r1, r2, ws),
                                        3 => {
                                            stencil33_add2(a0, a1, r0, r1, r2, ws[0], ws[1]);
                                            stencil33_add(a2, r0, r1, r2, ws[2]);
                                        }
                                        2 => stencil33_add2(a0, a1, r0, r1, r2, ws[0], ws[1]),
                                        _ => stencil33_add(a0, r0, r1, r2, ws[0]),
                                    }
                                    continue;
                                }
                                for kh in 0..3usize {
                                    let o_h = i_h as isize + 1 - kh as isize;
                                    if o_h < 0 || o_h >= oh as isize {
                                        continue;
                                    }
                                    let go_row = &go_c[plane + o_h as usize * ow..][..ow];
                                    let t = (kd * 3 + kh) * 3;
                                    let ws: [(T, T, T); 4] = std::array::from_fn(|j| {
                                        let kc = kers[j];
                                        (kc[t + 2], kc[t + 1], kc[t])
                                    });
                                    let [a0, a1, a2, a3] = &mut accs;
                                    match bs {
                                        4 => stencil3_add4([a0, a1, a2, a3], go_row, ws),
                                        3 => {
                                            stencil3_add2(a0, a1, go_row, ws[0], ws[1]);
                                            stencil3_add(a2, go_row, ws[2].0, ws[2].1, ws[2].2);
                                        }
                                        2 => stencil3_add2(a0, a1, go_row, ws[0], ws[1]),
                                        _ => stencil3_add(a0, go_row, ws[0].0, ws[0].1, ws[0].2),
                                    }
                                }
                            }
                        }
                        let at = (i_d * h + i_h) * w;
                        for (j, a) in accs.iter().take(bs).enumerate() {
                            gi_blk[j * in_sp + at..j * in_sp + at + w].copy_from_slice(a);
                        }
                    }
                }
            });
            return Ok((
                Some(Tensor::new(input.shape(), gi)?),
                Tensor::new(kernel.shape(), gk)?,
                Tensor::new(&[dims.c_out], gb)?,
            ));
        }
        gi.par_chunks_mut(in_sp).enumerate().for_each(|(ci, gi_c)| {
            for co in 0..dims.c_out {
                let go_c = &go[co * out_sp..(co + 1) * out_sp];
                let ker_c = &ker[(co * dims.c_in + ci) * kvol..];
                for kd in 0..k {
                    let off_d = kd as isize - p;
                    let (dlo, dhi) = axis_range(od, d, stride, off_d);
                    for kh in 0..k {
                        let off_h = kh as isize - p;
                        let (hlo, hhi) = axis_range(oh, h, stride, off_h);
                        for kw in 0..k {
                            let wgt = ker_c[(kd * k + kh) * k + kw];
                            let off_w = kw as isize - p;
                            let (wlo, whi) = axis_range(ow, w, stride, off_w);
                            if wlo >= whi {
                                continue;
                            }
                            for o_d in dlo..dhi {
                                let i_d = (o_d * stride) as isize + off_d;
                                for o_h in hlo..hhi {
                                    let i_h = (o_h * stride) as isize + off_h;
                                    let go_row = &go_c[o_d * oh * ow + o_h * ow..][..ow];
                                    let gi_row = &mut gi_c
                                        [i_d as usize * h * w + i_h as usize * w..][..w];
                                    if stride == 1 {
                                        let dst_lo = (wlo as isize + off_w) as usize;
                                        let dst = &mut gi_row[dst_lo..dst_lo + (whi - wlo)];
                                        for (gi_v, g) in dst.iter_mut().zip(&go_row[wlo..whi]) {
                                            *gi_v = *gi_v + wgt * *g;
                                        }
                                    } else {
                                        for o_w in wlo..whi {
                                            let i_w = (o_w * stride) as isize + off_w;
                                            gi_row[i_w as usize] =
                                                gi_row[i_w as usize] + wgt * go_row[o_w];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };

    Ok((
        gi,
        Tensor::new(kernel.shape(), gk)?,
        Tensor::new(&[dims.c_out], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// GELU
// ---------------------------------------------------------------------------

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn normal_cdf(x: f64) -> f64 {
    // erfc keeps the far negative tail accurate where 1 + erf would cancel
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub(crate) fn gelu_derivative_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Elementwise `x * CDF(x)` with the exact standard-normal CDF.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64(gelu_scalar(v.to_f64())))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| T::from_f64(gelu_derivative_scalar(v.to_f64())) * g)
        .collect();
    Tensor::new(x.shape(), data).expect("gelu_backward preserves shape")
}

// ---------------------------------------------------------------------------
// Nearest-neighbour upsampling
// ---------------------------------------------------------------------------

/// Replicate every voxel of `[C,D,H,W]` into a 2x2x2 block.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "upsample expects rank 4 [C,D,H,W], got {:?}",
            x.shape()
        )));
    }
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); c * d2 * h2 * w2];
    for cc in 0..c {
        for dd in 0..d2 {
            for hh in 0..h2 {
                let src_row = &src[((cc * d + dd / 2) * h + hh / 2) * w..][..w];
                let out_row = &mut out[((cc * d2 + dd) * h2 + hh) * w2..][..w2];
                for ww in 0..w2 {
                    out_row[ww] = src_row[ww / 2];
                }
            }
        }
    }
    Tensor::new(&[c, d2, h2, w2], out)
}

/// Each source voxel collects the sum of its 2x2x2 block of upstream gradient.
pub fn upsample_nearest2x_backward<T: Scalar>(
    in_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    if grad_out.shape() != [c, 2 * d, 2 * h, 2 * w] {
        return Err(Error::shape(format!(
            "upsample backward: grad shape {:?} does not match doubled {in_shape:?}",
            grad_out.shape()
        )));
    }
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let go = grad_out.data();
    let mut gi = vec![T::zero(); c * d * h * w];
    for cc in 0..c {
        for dd in 0..d2 {
            for hh in 0..h2 {
                let go_row = &go[((cc * d2 + dd) * h2 + hh) * w2..][..w2];
                let gi_row = &mut gi[((cc * d + dd / 2) * h + hh / 2) * w..][..w];
                for ww in 0..w2 {
                    gi_row[ww / 2] = gi_row[ww / 2] + go_row[ww];
                }
            }
        }
    }
    Tensor::new(in_shape, gi)
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

/// Stack `a` and `b` along the channel axis; spatial shapes must agree.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 4 || b.rank() != 4 || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape(format!(
            "concat_channels spatial mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::new(shape, data)
}

/// Split a concatenated tensor back at channel `c_split`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, c_split: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.rank() != 4 || c_split > x.shape()[0] {
        return Err(Error::shape(format!(
            "split_channels at {c_split} on {:?}",
            x.shape()
        )));
    }
    let sp: usize = x.shape()[1..].iter().product();
    let (da, db) = x.data().split_at(c_split * sp);
    let mut sa = x.shape().to_vec();
    sa[0] = c_split;
    let mut sb = x.shape().to_vec();
    sb[0] = x.shape()[0] - c_split;
    Ok((Tensor::new(sa, da.to_vec())?, Tensor::new(sb, db.to_vec())?))
}

// ---------------------------------------------------------------------------
// Weighted mean over a batch
// ---------------------------------------------------------------------------

/// `sum_i w_i * x_i / sum_i w_i`, accumulated in ascending index order.
pub fn reduce_mean_batch<T: Scalar>(xs: &[Tensor<T>], weights: &[f64]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::invalid("reduce_mean_batch on empty tensor list"));
    }
    if xs.len() != weights.len() {
        return Err(Error::invalid(format!(
            "reduce_mean_batch: {} tensors but {} weights",
            xs.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid(format!(
            "reduce_mean_batch weights must be finite and non-negative, got {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid(
            "reduce_mean_batch requires at least one positive weight",
        ));
    }
    let shape = xs[0].shape().to_vec();
    for x in &xs[1..] {
        if x.shape() != shape {
            return Err(Error::shape(format!(
                "reduce_mean_batch shapes differ: {:?} vs {:?}",
                shape,
                x.shape()
            )));
        }
    }
    let mut acc = vec![T::zero(); xs[0].numel()];
    for (x, &w) in xs.iter().zip(weights) {
        let wt = T::from_f64(w);
        for (a, &v) in acc.iter_mut().zip(x.data()) {
            *a = *a + wt * v;
        }
    }
    let inv = T::from_f64(1.0 / total);
    for a in acc.iter_mut() {
        *a = *a * inv;
    }
    Tensor::new(shape, acc)
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

fn zip_same_shape<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    name: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{name}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn add_elem<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape(a, b, "add", |x, y| x + y)
}

pub fn sub_elem<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape(a, b, "sub", |x, y| x - y)
}

pub fn mul_elem<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape(a, b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = T::from_f64(factor);
    x.map(|v| v * f)
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    acc
}

// ---------------------------------------------------------------------------
// Forward intensity differences (three axis channels)
// ---------------------------------------------------------------------------

/// Forward difference along depth/height/width of a single-channel volume.
/// Channel `a` of the output holds the axis-`a` difference; the far boundary
/// slice is zero.
pub fn intensity_diff<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "intensity_diff expects [1,D,H,W], got {:?}",
            x.shape()
        )));
    }
    let (d, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let src = x.data();
    let sp = d * h * w;
    let idx = |dd: usize, hh: usize, ww: usize| (dd * h + hh) * w + ww;
    let mut out = vec![T::zero(); 3 * sp];
    for dd in 0..d {
        for hh in 0..h {
            for ww in 0..w {
                let i = idx(dd, hh, ww);
                if dd + 1 < d {
                    out[i] = src[idx(dd + 1, hh, ww)] - src[i];
                }
                if hh + 1 < h {
                    out[sp + i] = src[idx(dd, hh + 1, ww)] - src[i];
                }
                if ww + 1 < w {
                    out[2 * sp + i] = src[i + 1] - src[i];
                }
            }
        }
    }
    Tensor::new(&[3, d, h, w], out)
}

/// Transpose of [`intensity_diff`]: scatter each axis difference back to its
/// two source voxels.
pub fn intensity_diff_backward<T: Scalar>(
    in_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (d, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
    if grad_out.shape() != [3, d, h, w] {
        return Err(Error::shape(format!(
            "intensity_diff backward grad shape {:?} vs input {in_shape:?}",
            grad_out.shape()
        )));
    }
    let sp = d * h * w;
    let go = grad_out.data();
    let idx = |dd: usize, hh: usize, ww: usize| (dd * h + hh) * w + ww;
    let mut gi = vec![T::zero(); sp];
    for dd in 0..d {
        for hh in 0..h {
            for ww in 0..w {
                let i = idx(dd, hh, ww);
                if dd + 1 < d {
                    let g = go[i];
                    gi[idx(dd + 1, hh, ww)] = gi[idx(dd + 1, hh, ww)] + g;
                    gi[i] = gi[i] - g;
                }
                if hh + 1 < h {
                    let g = go[sp + i];
                    gi[idx(dd, hh + 1, ww)] = gi[idx(dd, hh + 1, ww)] + g;
                    gi[i] = gi[i] - g;
                }
                if ww + 1 < w {
                    let g = go[2 * sp + i];
                    gi[i + 1] = gi[i + 1] + g;
                    gi[i] = gi[i] - g;
                }
            }
        }
    }
    Tensor::new(in_shape, gi)
}

// ---------------------------------------------------------------------------
// Smooth-L1 style losses (mean over all elements)
// ---------------------------------------------------------------------------

#[inline]
fn smooth_l1_elem<T: Scalar>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::from_f64(0.5) * d * d
    } else {
        a - T::from_f64(0.5)
    }
}

#[inline]
fn smooth_l1_deriv<T: Scalar>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

#[inline]
fn cubic_l1_elem<T: Scalar>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        a * a * a / T::from_f64(3.0)
    } else {
        a - T::from_f64(2.0 / 3.0)
    }
}

#[inline]
fn cubic_l1_deriv<T: Scalar>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        d * a
    } else {
        d.signum()
    }
}

fn mean_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    name: &str,
    elem: impl Fn(T) -> T,
) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "{name}: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        acc = acc + elem(p - t);
    }
    Ok(acc / T::from_f64(pred.numel() as f64))
}

fn mean_loss_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    upstream: T,
    deriv: impl Fn(T) -> T,
) -> Tensor<T> {
    let inv_n = T::from_f64(1.0 / pred.numel() as f64);
    let data: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| deriv(p - t) * inv_n * upstream)
        .collect();
    Tensor::new(pred.shape(), data).expect("loss grad preserves shape")
}

/// Standard smooth-L1: `0.5 d^2` below the unit knee, `|d| - 0.5` beyond.
pub fn smooth_l1_mean<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    mean_loss(pred, target, "smooth_l1", smooth_l1_elem)
}

pub fn smooth_l1_mean_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    mean_loss_grad(pred, target, upstream, smooth_l1_deriv)
}

/// Cubic-inner variant: `|d|^3 / 3` below the unit knee, `|d| - 2/3` beyond.
/// Matches smooth-L1 in value and slope at the knee but down-weights small
/// residuals harder.
pub fn cubic_l1_mean<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    mean_loss(pred, target, "cubic_l1", cubic_l1_elem)
}

pub fn cubic_l1_mean_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    mean_loss_grad(pred, target, upstream, cubic_l1_deriv)
}

/// Per-element loss values, exposed for the loss-shape checks.
pub fn smooth_l1_voxel(d: f64) -> f64 {
    smooth_l1_elem(d)
}

pub fn cubic_l1_voxel(d: f64) -> f64 {
    cubic_l1_elem(d)
}

pub fn smooth_l1_voxel_deriv(d: f64) -> f64 {
    smooth_l1_deriv(d)
}

pub fn cubic_l1_voxel_deriv(d: f64) -> f64 {
    cubic_l1_deriv(d)
}
