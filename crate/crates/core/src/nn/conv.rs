//! im2col convolution kernels on single `[c, h, w]` samples.

use super::tensor::{mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix (`in_c·k·k`).
    pub fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_range(g, kx, ow, g.in_w);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize || lo >= hi {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    out_row[..lo].fill(F::zero());
                    out_row[hi..].fill(F::zero());
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (o, ox) in out_row[lo..hi].iter_mut().zip(0..) {
                            *o = src[ix0 + ox * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` is in range.
fn valid_range(g: &ConvGeom, kx: usize, ow: usize, in_w: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(ow);
    // largest ox with ox·stride + kx − pad ≤ in_w − 1
    let limit = in_w + g.pad;
    let hi = if limit <= kx { 0 } else { ((limit - kx - 1) / g.stride + 1).min(ow) };
    (lo, hi.max(lo))
}

/// Scatter-adds a column-matrix gradient back into `dx`.
pub fn col2im<F: Real>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_range(g, kx, ow, g.in_w);
                row += 1;
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in src_row.iter().enumerate() {
                            dst[ix0 + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = w · cols(x) + b` for one sample. `w` is `[out_c, in_c·k·k]`.
pub fn forward_sample<F: Real>(g: &ConvGeom, x: &[F], w: &[F], b: Option<&[F]>, cols: &mut Vec<F>, y: &mut [F]) {
    let plane = g.out_plane();
    let patch = g.patch();
    let col: &[F] = if g.is_pointwise() {
        x
    } else {
        cols.resize(patch * plane, F::zero());
        im2col(g, x, cols);
        cols
    };
    mat::mm(g.out_c, patch, plane, w, col, F::zero(), y);
    if let Some(b) = b {
        for (oc, &bias) in b.iter().enumerate() {
            for v in &mut y[oc * plane..(oc + 1) * plane] {
                *v += bias;
            }
        }
    }
}

/// Accumulates weight/bias gradients and writes the input gradient for one sample.
#[allow(clippy::too_many_arguments)]
pub fn backward_sample<F: Real>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
    dx: Option<&mut [F]>,
    cols: &mut Vec<F>,
    dcols: &mut Vec<F>,
) {
    let plane = g.out_plane();
    let patch = g.patch();
    if let Some(db) = db {
        for (oc, acc) in db.iter_mut().enumerate() {
            *acc += dy[oc * plane..(oc + 1) * plane].iter().copied().sum::<F>();
        }
    }
    if let Some(dw) = dw {
        let col: &[F] = if g.is_pointwise() {
            x
        } else {
            cols.resize(patch * plane, F::zero());
            im2col(g, x, cols);
            cols
        };
        // dw += dy(out_c × plane) · colᵀ(plane × patch)
        mat::mm_bt(g.out_c, plane, patch, dy, col, F::one(), dw);
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            // dx += wᵀ · dy
            mat::mm_at(patch, g.out_c, plane, w, dy, F::one(), dx);
        } else {
            dcols.resize(patch * plane, F::zero());
            mat::mm_at(patch, g.out_c, plane, w, dy, F::zero(), dcols);
            col2im(g, dcols, dx);
        }
    }
}
