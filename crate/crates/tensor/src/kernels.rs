//! Raw slice kernels shared by the tape's forward and backward passes.
//!
//! Images are single-sample `C×H×W`, feature maps for attention are `H×W×C`.

use crate::scalar::Scalar;

/// Geometry of a strided, zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output side length of a convolution, or `None` when the kernel does not fit.
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unrolls every receptive field into a column: result is `(C·k·k) × (out_h·out_w)`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.rows() * p];
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `C×H×W` buffer, accumulating.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let p = g.positions();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            plane[iy as usize * g.width + ix as usize] =
                                plane[iy as usize * g.width + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward: `weight` is `O×C×k×k`, output is `O×out_h×out_w`.
pub(crate) fn conv2d<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let (rows, p) = (g.rows(), g.positions());
    let mut out = vec![T::zero(); out_ch * p];
    T::gemm(out_ch, rows, p, weight, rows as isize, 1, &cols, p as isize, 1, T::zero(), &mut out, p as isize, 1);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, p);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    out_ch: usize,
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let cols = im2col(x, g);
    let (rows, p) = (g.rows(), g.positions());
    let mut dw = vec![T::zero(); out_ch * rows];
    // dW = dOut · colsᵀ
    T::gemm(out_ch, p, rows, dout, p as isize, 1, &cols, 1, p as isize, T::zero(), &mut dw, rows as isize, 1);
    let mut dx = Vec::new();
    if need_input {
        let mut dcols = vec![T::zero(); rows * p];
        // dCols = Wᵀ · dOut
        T::gemm(rows, out_ch, p, weight, 1, rows as isize, dout, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
        dx = vec![T::zero(); g.channels * g.height * g.width];
        col2im(&dcols, g, &mut dx);
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: channel_sums(dout, out_ch, p),
    }
}

/// Transposed convolution forward. `weight` is `Cin×O×k×k`; `g` describes the
/// *adjoint* convolution, i.e. `g.channels = O`, `g.height × g.width` is the
/// output size and `g.out_h × g.out_w` the input size.
pub(crate) fn conv_transpose2d<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    in_ch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, p) = (g.rows(), g.positions());
    let mut cols = vec![T::zero(); rows * p];
    // cols = Wᵀ · x, W viewed as Cin × (O·k·k)
    T::gemm(rows, in_ch, p, weight, 1, rows as isize, x, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.channels * plane];
    col2im(&cols, g, &mut out);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, plane);
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    in_ch: usize,
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (rows, p) = (g.rows(), g.positions());
    let dcols = im2col(dout, g);
    let mut dw = vec![T::zero(); in_ch * rows];
    // dW = x · dColsᵀ
    T::gemm(in_ch, p, rows, x, p as isize, 1, &dcols, 1, p as isize, T::zero(), &mut dw, rows as isize, 1);
    let mut dx = Vec::new();
    if need_input {
        dx = vec![T::zero(); in_ch * p];
        T::gemm(in_ch, rows, p, weight, rows as isize, 1, &dcols, p as isize, 1, T::zero(), &mut dx, p as isize, 1);
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: channel_sums(dout, g.channels, g.height * g.width),
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn channel_sums<T: Scalar>(x: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| x[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}

/// Mirror index without repeating the edge (PyTorch `ReflectionPad2d`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Neighborhood gather for local attention: `H×W×C` → `HW×w²×C`, zero padded.
pub(crate) fn unfold_hwc<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, win: usize) -> Vec<T> {
    let half = (win / 2) as isize;
    let k = win * win;
    let mut out = vec![T::zero(); h * w * k * c];
    for r in 0..h {
        for col in 0..w {
            let i = r * w + col;
            for dr in 0..win {
                let nr = r as isize + dr as isize - half;
                if nr < 0 || nr >= h as isize {
                    continue;
                }
                for dc in 0..win {
                    let nc = col as isize + dc as isize - half;
                    if nc < 0 || nc >= w as isize {
                        continue;
                    }
                    let src = (nr as usize * w + nc as usize) * c;
                    let dst = (i * k + dr * win + dc) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn unfold_hwc_backward<T: Scalar>(dout: &[T], h: usize, w: usize, c: usize, win: usize) -> Vec<T> {
    let half = (win / 2) as isize;
    let k = win * win;
    let mut dx = vec![T::zero(); h * w * c];
    for r in 0..h {
        for col in 0..w {
            let i = r * w + col;
            for dr in 0..win {
                let nr = r as isize + dr as isize - half;
                if nr < 0 || nr >= h as isize {
                    continue;
                }
                for dc in 0..win {
                    let nc = col as isize + dc as isize - half;
                    if nc < 0 || nc >= w as isize {
                        continue;
                    }
                    let dst = (nr as usize * w + nc as usize) * c;
                    let src = (i * k + dr * win + dc) * c;
                    for ch in 0..c {
                        dx[dst + ch] = dx[dst + ch] + dout[src + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}
