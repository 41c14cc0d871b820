//! Per-sample and batched kernels shared by the forward pass, backprop and LRP.
//!
//! Layout is always row-major `[N, C, H, W]` (or `[N, F]` for dense data).
//! Convolutions go through im2col and a dense GEMM.

/// `C = alpha * A * B + beta * C` with arbitrary strides.
///
/// `a` is `m x k`, `b` is `k x n` and `c` is `m x n`; strides are given as
/// `(row_stride, col_stride)` in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    debug_assert!(c.len() > (m - 1) * c_strides.0 + (n - 1) * c_strides.1);
    // SAFETY: the debug assertions above spell out the bounds every caller
    // in this module upholds; matrixmultiply reads/writes only inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Rows of the im2col matrix: `Cin * K * K`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_pixels()
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of an im2col matrix back onto an image (adjoint of `im2col`).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.out_pixels();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            line[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of one sample. `weight` is `[Cout, Cin*K*K]`.
pub(crate) fn conv_forward_sample(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    cols: &mut Vec<f64>,
    out: &mut [f64],
) {
    let kk = g.patch_len();
    let p = g.out_pixels();
    cols.resize(kk * p, 0.0);
    im2col(input, g, cols);
    gemm(
        g.out_c,
        kk,
        p,
        1.0,
        weight,
        (kk, 1),
        cols,
        (p, 1),
        0.0,
        out,
        (p, 1),
    );
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * p..(co + 1) * p] {
                *v += bv;
            }
        }
    }
}

/// Gradient w.r.t. the input of a convolution (a transposed convolution).
pub(crate) fn conv_backward_data_sample(
    grad_out: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    cols: &mut Vec<f64>,
    grad_in: &mut [f64],
) {
    let kk = g.patch_len();
    let p = g.out_pixels();
    cols.resize(kk * p, 0.0);
    // dcols = W^T * dY
    gemm(
        kk,
        g.out_c,
        p,
        1.0,
        weight,
        (1, kk),
        grad_out,
        (p, 1),
        0.0,
        cols,
        (p, 1),
    );
    grad_in.fill(0.0);
    col2im(cols, g, grad_in);
}

/// Accumulates `dW += dY * cols^T` and `db += rowsum(dY)` for one sample.
pub(crate) fn conv_backward_params_sample(
    input: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    cols: &mut Vec<f64>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let kk = g.patch_len();
    let p = g.out_pixels();
    cols.resize(kk * p, 0.0);
    im2col(input, g, cols);
    gemm(
        g.out_c,
        p,
        kk,
        1.0,
        grad_out,
        (p, 1),
        cols,
        (1, p),
        1.0,
        grad_w,
        (kk, 1),
    );
    for (co, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[co * p..(co + 1) * p].iter().sum::<f64>();
    }
}

/// `Y[N, out] = X[N, in] * W^T + b` with `W` stored as `[out, in]`.
pub(crate) fn dense_forward(
    x: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    y: &mut [f64],
) {
    gemm(
        n,
        inputs,
        outputs,
        1.0,
        x,
        (inputs, 1),
        weight,
        (1, inputs),
        0.0,
        y,
        (outputs, 1),
    );
    if let Some(b) = bias {
        for row in y.chunks_mut(outputs) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

/// `dX[N, in] = dY[N, out] * W`.
pub(crate) fn dense_backward_data(
    grad_y: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    weight: &[f64],
    grad_x: &mut [f64],
) {
    gemm(
        n,
        outputs,
        inputs,
        1.0,
        grad_y,
        (outputs, 1),
        weight,
        (inputs, 1),
        0.0,
        grad_x,
        (inputs, 1),
    );
}

pub(crate) fn dense_backward_params(
    x: &[f64],
    grad_y: &[f64],
    n: usize,
    inputs: usize,
    outputs: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    gemm(
        outputs,
        n,
        inputs,
        1.0,
        grad_y,
        (1, outputs),
        x,
        (inputs, 1),
        1.0,
        grad_w,
        (inputs, 1),
    );
    for row in grad_y.chunks(outputs) {
        for (gb, g) in grad_b.iter_mut().zip(row) {
            *gb += g;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Option<Self> {
        if kernel == 0 || stride == 0 || in_h < kernel || in_w < kernel {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_h * self.out_w
    }
}

/// Max pooling of one sample; `argmax` receives the flat input index of each
/// winner. Ties keep the lowest flat index.
pub(crate) fn maxpool_sample(input: &[f64], g: &PoolGeom, out: &mut [f64], argmax: &mut [usize]) {
    for c in 0..g.channels {
        let base = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_idx = base + oy * g.stride * g.in_w + ox * g.stride;
                let mut best = input[best_idx];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let idx = base + (oy * g.stride + ky) * g.in_w + ox * g.stride + kx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * g.out_h + oy) * g.out_w + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

pub(crate) fn avgpool_sample(input: &[f64], g: &PoolGeom, out: &mut [f64]) {
    let scale = 1.0 / (g.kernel * g.kernel) as f64;
    for c in 0..g.channels {
        let base = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        acc += input[base + (oy * g.stride + ky) * g.in_w + ox * g.stride + kx];
                    }
                }
                out[(c * g.out_h + oy) * g.out_w + ox] = acc * scale;
            }
        }
    }
}

/// Adjoint of `avgpool_sample`; accumulates into `grad_in`.
pub(crate) fn avgpool_backward_sample(grad_out: &[f64], g: &PoolGeom, grad_in: &mut [f64]) {
    let scale = 1.0 / (g.kernel * g.kernel) as f64;
    for c in 0..g.channels {
        let base = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gv = grad_out[(c * g.out_h + oy) * g.out_w + ox] * scale;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        grad_in[base + (oy * g.stride + ky) * g.in_w + ox * g.stride + kx] += gv;
                    }
                }
            }
        }
    }
}
