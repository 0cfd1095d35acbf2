//! Low-level loops behind the graph ops: GEMM, im2col and pooling.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub fn rows(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a @ b + beta * c` with `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    let a_extent = if m * k == 0 {
        0
    } else {
        ((m - 1) as isize * la.rs + (k - 1) as isize * la.cs) as usize + 1
    };
    let b_extent = if k * n == 0 {
        0
    } else {
        ((k - 1) as isize * lb.rs + (n - 1) as isize * lb.cs) as usize + 1
    };
    assert!(a.len() >= a_extent && b.len() >= b_extent);
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1;
        let ow = (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1;
        (oh, ow)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn fits(&self) -> bool {
        self.height + 2 * self.padding.0 >= self.kernel.0
            && self.width + 2 * self.padding.1 >= self.kernel.1
            && self.stride.0 > 0
            && self.stride.1 > 0
    }

    /// Output columns `ow` whose input column `ow * sw + kw - pw` is in range.
    fn valid_cols(&self, kw: usize, ow_count: usize) -> std::ops::Range<usize> {
        let (sw, pw, w) = (self.stride.1, self.padding.1, self.width);
        let lo = if kw >= pw { 0 } else { (pw - kw).div_ceil(sw) };
        // ow * sw + kw - pw <= w - 1
        let hi = if w + pw >= kw + 1 {
            ((w - 1 + pw - kw) / sw + 1).min(ow_count)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Unfolds one image `[C, H, W]` into `col` of shape `[C*KH*KW, OH*OW]`.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f32], col: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let p = oh * ow;
    col[..g.col_rows() * p].fill(0.0);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let cols = g.valid_cols(kj, ow);
                for y in 0..oh {
                    let iy = (y * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out = &mut dst[y * ow..(y + 1) * ow];
                    if sw == 1 {
                        let off = cols.start + kj - pw;
                        out[cols.clone()].copy_from_slice(&src[off..off + cols.len()]);
                    } else {
                        for x in cols.clone() {
                            out[x] = src[x * sw + kj - pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `image`.
pub(crate) fn col2im(g: &ConvGeometry, col: &[f32], image: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let cols = g.valid_cols(kj, ow);
                for y in 0..oh {
                    let iy = (y * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let inp = &src[y * ow..(y + 1) * ow];
                    for x in cols.clone() {
                        dst[x * sw + kj - pw] += inp[x];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1;
        let ow = (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1;
        (oh, ow)
    }
}

/// Max pooling over one plane; records the flat input index of each maximum.
pub(crate) fn max_pool_plane(
    g: &PoolGeometry,
    plane: &[f32],
    base_index: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let (oh, ow) = g.out_hw();
    for y in 0..oh {
        let y0 = (y * g.stride.0) as isize - g.padding.0 as isize;
        for x in 0..ow {
            let x0 = (x * g.stride.1) as isize - g.padding.1 as isize;
            let mut best = f32::NEG_INFINITY;
            let mut best_idx = usize::MAX;
            for dy in 0..g.kernel.0 as isize {
                let iy = y0 + dy;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for dx in 0..g.kernel.1 as isize {
                    let ix = x0 + dx;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let idx = iy as usize * g.width + ix as usize;
                    let v = plane[idx];
                    if v > best || best_idx == usize::MAX {
                        best = v;
                        best_idx = idx;
                    }
                }
            }
            out[y * ow + x] = best;
            argmax[y * ow + x] = (base_index + best_idx) as u32;
        }
    }
}
