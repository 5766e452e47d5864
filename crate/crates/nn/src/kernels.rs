//! Dense kernels behind the graph ops: row-major sgemm and the im2col/col2im
//! pair shared by convolution and transposed convolution.

/// Geometry of a 2-D sliding window over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (height + 2 * pad).checked_sub(kernel)?;
        let span_w = (width + 2 * pad).checked_sub(kernel)?;
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    /// Rows of the column matrix (C·k·k).
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix (output positions).
    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is m×k and
/// `op(b)` is k×n. `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `image` (C×H×W) into `col` ((C·k·k)×(out_h·out_w)); padding reads as zero.
pub fn im2col(image: &[f32], win: &Window, col: &mut [f32]) {
    let plane = win.height * win.width;
    let cols = win.cols();
    debug_assert_eq!(col.len(), win.rows() * cols);
    let k = win.kernel;
    for c in 0..win.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..win.out_h {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let out = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    if iy < 0 || iy >= win.height as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * win.width..(iy as usize + 1) * win.width];
                    if win.stride == 1 {
                        // contiguous run of valid ix values
                        let shift = kj as isize - win.pad as isize;
                        let lo = (-shift).clamp(0, win.out_w as isize) as usize;
                        let hi = (win.width as isize - shift).clamp(0, win.out_w as isize) as usize;
                        out[..lo].fill(0.0);
                        if hi > lo {
                            let s = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&line[s..s + (hi - lo)]);
                        }
                        out[hi.max(lo)..].fill(0.0);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                            *o = if ix < 0 || ix >= win.width as isize { 0.0 } else { line[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back onto `image`.
pub fn col2im(col: &[f32], win: &Window, image: &mut [f32]) {
    let plane = win.height * win.width;
    let cols = win.cols();
    debug_assert_eq!(col.len(), win.rows() * cols);
    let k = win.kernel;
    for c in 0..win.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..win.out_h {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * win.width..(iy as usize + 1) * win.width];
                    let vals = &src[oy * win.out_w..(oy + 1) * win.out_w];
                    for (ox, &v) in vals.iter().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        if ix >= 0 && (ix as usize) < win.width {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
