//! Dense kernels over "bundles": a primal activation plus any number of
//! tangent copies that share the same weights.
//!
//! A bundle of `c` channels, `j` blocks and `h x w` pixels is stored
//! channel-major as `[c][j][h][w]`, so every linear layer is a single matrix
//! product over the `(j, h, w)` columns. Block 0 is the primal value and
//! blocks `1..j` are tangents.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub channels: usize,
    pub blocks: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn cols(&self) -> usize {
        self.blocks * self.plane()
    }

    pub fn len(&self) -> usize {
        self.channels * self.cols()
    }
}

/// Writes the 3x3 zero-padded patch matrix of `input`, shape `(c*9, j*h*w)`.
fn im2col(input: &[f64], d: Dims, col: &mut Vec<f64>) {
    let (h, w) = (d.height, d.width);
    let cols = d.cols();
    col.clear();
    col.resize(d.channels * 9 * cols, 0.0);
    for c in 0..d.channels {
        for a in 0..3 {
            for b in 0..3 {
                let row = &mut col[((c * 9) + a * 3 + b) * cols..][..cols];
                for j in 0..d.blocks {
                    let src = &input[(c * d.blocks + j) * h * w..][..h * w];
                    let dst = &mut row[j * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y as isize + a as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        let drow = &mut dst[y * w..][..w];
                        match b {
                            0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                            1 => drow.copy_from_slice(srow),
                            _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix back onto `grad`.
fn col2im_acc(col: &[f64], d: Dims, grad: &mut [f64]) {
    let (h, w) = (d.height, d.width);
    let cols = d.cols();
    for c in 0..d.channels {
        for a in 0..3 {
            for b in 0..3 {
                let row = &col[((c * 9) + a * 3 + b) * cols..][..cols];
                for j in 0..d.blocks {
                    let src = &row[j * h * w..][..h * w];
                    let dst = &mut grad[(c * d.blocks + j) * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y as isize + a as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[y * w..][..w];
                        let drow = &mut dst[sy as usize * w..][..w];
                        let (s, t) = match b {
                            0 => (&srow[1..], &mut drow[..w - 1]),
                            1 => (srow, drow),
                            _ => (&srow[..w - 1], &mut drow[1..]),
                        };
                        for (t, s) in t.iter_mut().zip(s) {
                            *t += s;
                        }
                    }
                }
            }
        }
    }
}

/// Scratch buffers reused across convolution calls.
#[derive(Default)]
pub(crate) struct Workspace {
    col: Vec<f64>,
    gcol: Vec<f64>,
}

/// 3x3 same-padded convolution. `kernel` is `[cout][cin][3][3]`; the bias is
/// added to block 0 only (tangents of an affine map carry no offset).
pub(crate) fn conv3x3(
    input: &[f64],
    d: Dims,
    kernel: &[f64],
    bias: &[f64],
    cout: usize,
    ws: &mut Workspace,
) -> Vec<f64> {
    im2col(input, d, &mut ws.col);
    let cols = d.cols();
    let mut out = vec![0.0; cout * cols];
    for (co, &b) in bias.iter().enumerate() {
        out[co * cols..][..d.plane()].fill(b);
    }
    let k = ArrayView2::from_shape((cout, d.channels * 9), kernel).unwrap();
    let x = ArrayView2::from_shape((d.channels * 9, cols), &ws.col[..]).unwrap();
    let mut y = ArrayViewMut2::from_shape((cout, cols), &mut out[..]).unwrap();
    general_mat_mul(1.0, &k, &x, 1.0, &mut y);
    out
}

/// Reverse pass of [`conv3x3`]. `input` is the layer input used in the
/// forward pass; returns the input gradient and accumulates kernel and bias
/// gradients. When `need_input_grad` is false the returned vector is empty.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    d: Dims,
    kernel: &[f64],
    grad_out: &[f64],
    cout: usize,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
    ws: &mut Workspace,
) -> Vec<f64> {
    let cols = d.cols();
    im2col(input, d, &mut ws.col);
    let go = ArrayView2::from_shape((cout, cols), grad_out).unwrap();
    {
        let x = ArrayView2::from_shape((d.channels * 9, cols), &ws.col[..]).unwrap();
        let mut gk = ArrayViewMut2::from_shape((cout, d.channels * 9), grad_kernel).unwrap();
        general_mat_mul(1.0, &go, &x.t(), 1.0, &mut gk);
    }
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[co * cols..][..d.plane()].iter().sum::<f64>();
    }
    if !need_input_grad {
        return Vec::new();
    }
    ws.gcol.clear();
    ws.gcol.resize(d.channels * 9 * cols, 0.0);
    {
        let k = ArrayView2::from_shape((cout, d.channels * 9), kernel).unwrap();
        let mut gx = ArrayViewMut2::from_shape((d.channels * 9, cols), &mut ws.gcol[..]).unwrap();
        general_mat_mul(1.0, &k.t(), &go, 0.0, &mut gx);
    }
    let mut grad_in = vec![0.0; d.len()];
    col2im_acc(&ws.gcol, d, &mut grad_in);
    grad_in
}

/// Nearest-neighbour 2x upsampling of every plane.
pub(crate) fn upsample2(input: &[f64], d: Dims) -> Vec<f64> {
    let (h, w) = (d.height, d.width);
    let w2 = 2 * w;
    let mut out = vec![0.0; d.len() * 4];
    for (src, dst) in input
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(4 * h * w))
    {
        for y in 0..h {
            let srow = &src[y * w..][..w];
            let top = &mut dst[2 * y * w2..][..w2];
            for (x, &v) in srow.iter().enumerate() {
                top[2 * x] = v;
                top[2 * x + 1] = v;
            }
            let (head, tail) = dst.split_at_mut((2 * y + 1) * w2);
            tail[..w2].copy_from_slice(&head[2 * y * w2..][..w2]);
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block. `d` describes the coarse grid.
pub(crate) fn upsample2_adjoint(grad: &[f64], d: Dims) -> Vec<f64> {
    let (h, w) = (d.height, d.width);
    let w2 = 2 * w;
    let mut out = vec![0.0; d.len()];
    for (src, dst) in grad
        .chunks_exact(4 * h * w)
        .zip(out.chunks_exact_mut(h * w))
    {
        for y in 0..h {
            let r0 = &src[2 * y * w2..][..w2];
            let r1 = &src[(2 * y + 1) * w2..][..w2];
            for x in 0..w {
                dst[y * w + x] = r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
        }
    }
    out
}
