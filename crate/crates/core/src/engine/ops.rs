//! Numeric kernels behind the tape primitives: broadcasting, reductions,
//! softmax, and im2col-based convolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::tensor::{strides, Real};
use crate::error::{Error, Result};

// ── Broadcasting ─────────────────────────────────────────────────────

/// Shape of the result of a trailing-dimension broadcast, or an error if the
/// shapes are incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Per-output-dimension strides into an input that broadcasts to `out`.
/// Broadcast dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let pad = out.len() - shape.len();
    let mut r = vec![0usize; out.len()];
    for d in 0..out.len() {
        if d >= pad && shape[d - pad] != 1 {
            r[d] = s[d - pad];
        }
    }
    r
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, walking in row-major order.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for o in 0..numel {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
}

pub fn binary_forward(
    a_shape: &[usize],
    a: &[Real],
    b_shape: &[usize],
    b: &[Real],
    f: impl Fn(Real, Real) -> Real,
) -> Result<(Vec<usize>, Vec<Real>)> {
    let out_shape = broadcast_shapes(a_shape, b_shape)?;
    if a_shape == b_shape {
        let data = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out_shape, data));
    }
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let mut data = vec![0.0; out_shape.iter().product()];
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
        data[o] = f(a[ia], b[ib]);
    });
    Ok((out_shape, data))
}

/// Accumulates per-output contributions back onto the two broadcast inputs.
/// `fa`/`fb` map (output grad, a value, b value) to each input's contribution;
/// pass `None` to skip an input that does not require gradients.
#[allow(clippy::too_many_arguments)]
pub fn binary_backward(
    a_shape: &[usize],
    a: &[Real],
    b_shape: &[usize],
    b: &[Real],
    out_shape: &[usize],
    g: &[Real],
    fa: Option<(&mut [Real], &dyn Fn(Real, Real, Real) -> Real)>,
    fb: Option<(&mut [Real], &dyn Fn(Real, Real, Real) -> Real)>,
) {
    if a_shape == b_shape {
        if let Some((ga, f)) = fa {
            for i in 0..g.len() {
                ga[i] += f(g[i], a[i], b[i]);
            }
        }
        if let Some((gb, f)) = fb {
            for i in 0..g.len() {
                gb[i] += f(g[i], a[i], b[i]);
            }
        }
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    match (fa, fb) {
        (Some((ga, da)), Some((gb, db))) => {
            for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                ga[ia] += da(g[o], a[ia], b[ib]);
                gb[ib] += db(g[o], a[ia], b[ib]);
            });
        }
        (Some((ga, da)), None) => {
            for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                ga[ia] += da(g[o], a[ia], b[ib]);
            });
        }
        (None, Some((gb, db))) => {
            for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                gb[ib] += db(g[o], a[ia], b[ib]);
            });
        }
        (None, None) => {}
    }
}

// ── Reductions ───────────────────────────────────────────────────────

/// Validates reduction axes and returns them sorted.
pub fn check_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::Invalid("reduction over an empty axis list".into()));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Invalid(format!("duplicate reduction axis {}", pair[0])));
        }
    }
    if let Some(&a) = sorted.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::Invalid(format!(
            "axis {a} out of range for rank {}",
            shape.len()
        )));
    }
    Ok(sorted)
}

/// Output shape after removing the (sorted) reduced axes.
pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &e)| e)
        .collect()
}

/// For every input element, the linear index of the output cell it reduces
/// into, presented as a stride table over input dimensions.
fn reduce_strides(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape = reduced_shape(shape, axes);
    let out_strides = strides(&out_shape);
    let mut r = vec![0usize; shape.len()];
    let mut kept = 0;
    for d in 0..shape.len() {
        if !axes.contains(&d) {
            r[d] = out_strides[kept];
            kept += 1;
        }
    }
    r
}

/// Walks the input in row-major order calling `f(input_index, output_index)`.
pub fn for_each_reduce(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let rs = reduce_strides(shape, axes);
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for i in 0..numel {
        f(i, o);
        for d in (0..rank).rev() {
            idx[d] += 1;
            o += rs[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            o -= rs[d] * shape[d];
        }
    }
}

pub fn sum_forward(shape: &[usize], data: &[Real], axes: &[usize]) -> (Vec<usize>, Vec<Real>) {
    let out_shape = reduced_shape(shape, axes);
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_reduce(shape, axes, |i, o| out[o] += data[i]);
    (out_shape, out)
}

/// Max-reduction, recording the winning input index per output cell. Ties go
/// to the lowest linear index.
pub fn max_forward(
    shape: &[usize],
    data: &[Real],
    axes: &[usize],
) -> (Vec<usize>, Vec<Real>, Vec<usize>) {
    let out_shape = reduced_shape(shape, axes);
    let n: usize = out_shape.iter().product();
    let mut out = vec![Real::neg_infinity(); n];
    let mut arg = vec![usize::MAX; n];
    for_each_reduce(shape, axes, |i, o| {
        if data[i] > out[o] {
            out[o] = data[i];
            arg[o] = i;
        }
    });
    (out_shape, out, arg)
}

// ── Softmax over a full 2-D grid ─────────────────────────────────────

/// Numerically stable softmax over every entry of an H×W map.
pub fn softmax2d_forward(data: &[Real]) -> Vec<Real> {
    let m = data.iter().copied().fold(Real::neg_infinity(), Real::max);
    let mut out: Vec<Real> = data.iter().map(|&v| (v - m).exp()).collect();
    let z: Real = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

pub fn softmax2d_backward(y: &[Real], g: &[Real], gx: &mut [Real]) {
    let dot: Real = y.iter().zip(g).map(|(&yi, &gi)| yi * gi).sum();
    for i in 0..y.len() {
        gx[i] += y[i] * (g[i] - dot);
    }
}

// ── Convolution (NHWC input, [kh, kw, cin, cout] kernel) ─────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn infer(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d input must be [N,H,W,Cin], got {input_shape:?}"
            )));
        }
        if kernel_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be [kh,kw,Cin,Cout], got {kernel_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be >= 1".into()));
        }
        let (n, h, w, cin) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (kh, kw, kcin, cout) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kcin != cin {
            return Err(Error::Shape(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvDims {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn cols_per_row(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// out[k,n] += aᵀ[k,m] * b[m,n], with `a` stored as [m,k].
fn matmul_tn_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * bᵀ[k,n], with `b` stored as [n,k].
fn matmul_nt_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (j, c) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *c += acc;
        }
    }
}

fn im2col(input: &[Real], d: &ConvDims) -> Vec<Real> {
    let q = d.cols_per_row();
    let mut cols = vec![0.0; d.rows() * q];
    let row_len = d.kw * d.cin;
    for n in 0..d.n {
        let img = &input[n * d.h * d.w * d.cin..];
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let r = (n * d.ho + oy) * d.wo + ox;
                let dst = &mut cols[r * q..(r + 1) * q];
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let ix0 = (ox * d.stride) as isize - d.padding as isize;
                    // clip the kw window to the valid input columns
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = d.kw.min((d.w as isize - ix0).max(0) as usize);
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let src_base = (iy as usize * d.w + (ix0 + kx_lo as isize) as usize) * d.cin;
                    let src = &img[src_base..src_base + (kx_hi - kx_lo) * d.cin];
                    let dst_base = ky * row_len + kx_lo * d.cin;
                    dst[dst_base..dst_base + src.len()].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Cross-correlation forward pass. Returns the output plus the im2col matrix,
/// which the backward pass reuses.
pub fn conv2d_forward(input: &[Real], kernel: &[Real], d: &ConvDims) -> (Vec<Real>, Vec<Real>) {
    let cols = im2col(input, d);
    let mut out = vec![0.0; d.rows() * d.cout];
    matmul_acc(&cols, kernel, d.rows(), d.cols_per_row(), d.cout, &mut out);
    (out, cols)
}

/// Gradient w.r.t. the kernel: colsᵀ · g_out.
pub fn conv2d_backward_kernel(g_out: &[Real], cols: &[Real], d: &ConvDims, g_kernel: &mut [Real]) {
    matmul_tn_acc(cols, g_out, d.rows(), d.cols_per_row(), d.cout, g_kernel);
}

/// Gradient w.r.t. the input: (g_out · kernelᵀ) scattered back (col2im).
pub fn conv2d_backward_input(g_out: &[Real], kernel: &[Real], d: &ConvDims, g_input: &mut [Real]) {
    let q = d.cols_per_row();
    let mut g_cols = vec![0.0; d.rows() * q];
    matmul_nt_acc(g_out, kernel, d.rows(), d.cout, q, &mut g_cols);
    let row_len = d.kw * d.cin;
    for n in 0..d.n {
        let img_base = n * d.h * d.w * d.cin;
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let r = (n * d.ho + oy) * d.wo + ox;
                let src = &g_cols[r * q..(r + 1) * q];
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let ix0 = (ox * d.stride) as isize - d.padding as isize;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = d.kw.min((d.w as isize - ix0).max(0) as usize);
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let dst_base =
                        img_base + (iy as usize * d.w + (ix0 + kx_lo as isize) as usize) * d.cin;
                    let src_base = ky * row_len + kx_lo * d.cin;
                    let len = (kx_hi - kx_lo) * d.cin;
                    for t in 0..len {
                        g_input[dst_base + t] += src[src_base + t];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[2, 1], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[], &[4, 2]).unwrap(), vec![4, 2]);
        assert!(broadcast_shapes(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn binary_broadcast_matches_manual() {
        // [2,2] + [2] row-wise
        let (shape, data) = binary_forward(
            &[2, 2],
            &[1.0, 2.0, 3.0, 4.0],
            &[2],
            &[10.0, 20.0],
            |a, b| a + b,
        )
        .unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(data, vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn reduce_sum_axes() {
        // shape [2,3], sum over axis 0
        let (shape, out) = sum_forward(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0]);
        assert_eq!(shape, vec![3]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
        let (shape, out) = sum_forward(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0, 1]);
        assert!(shape.is_empty());
        assert_eq!(out, vec![21.0]);
    }

    #[test]
    fn max_tie_takes_lowest_index() {
        let (_, out, arg) = max_forward(&[4], &[3.0, 7.0, 7.0, 1.0], &[0]);
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn softmax_distributes() {
        let y = softmax2d_forward(&[0.0, 0.0, 0.0, 0.0]);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn conv_all_ones_3x3() {
        let d = ConvDims::infer(&[1, 3, 3, 1], &[3, 3, 1, 1], 1, 0).unwrap();
        let (out, _) = conv2d_forward(&[1.0; 9], &[1.0; 9], &d);
        assert_eq!(out, vec![9.0]);
    }
}
