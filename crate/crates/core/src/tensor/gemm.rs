use super::Float;

/// Safe row-major matrix product, see [`Float::gemm_raw`].
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    T::gemm_raw(m, k, n, a, trans_a, b, trans_b, c, accumulate)
}

/// Geometry of a 2-D cross-correlation over one `[C,H,W]` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the sample already is its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad`
/// lies inside `[0, width)`.
#[inline]
fn valid_cols(w: &Window, kx: usize) -> (usize, usize) {
    let lo = if w.pad > kx { (w.pad - kx).div_ceil(w.stride) } else { 0 };
    let reach = w.width - 1 + w.pad;
    let hi = if reach < kx { 0 } else { ((reach - kx) / w.stride + 1).min(w.out_w) };
    (lo.min(hi), hi)
}

/// Unfolds one sample into a `[C·kh·kw, out_h·out_w]` matrix (zero padding).
#[cfg(test)]
pub(crate) fn im2col<T: Float>(x: &[T], w: &Window, cols: &mut [T]) {
    im2col_band(x, w, 0, w.out_h, cols)
}

/// [`im2col`] restricted to output rows `[oy0, oy1)`: `cols` is
/// `[C·kh·kw, (oy1 − oy0)·out_w]`.
pub(crate) fn im2col_band<T: Float>(x: &[T], w: &Window, oy0: usize, oy1: usize, cols: &mut [T]) {
    let ow = w.out_w;
    let band = (oy1 - oy0) * ow;
    let mut row = 0;
    for c in 0..w.channels {
        let plane = &x[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ky in 0..w.kh {
            for kx in 0..w.kw {
                let (lo, hi) = valid_cols(w, kx);
                let dst = &mut cols[row * band..(row + 1) * band];
                for oy in oy0..oy1 {
                    let iy = (oy * w.stride + ky) as isize - w.pad as isize;
                    let line = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= w.height as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w.width..(iy as usize + 1) * w.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = lo * w.stride + kx - w.pad;
                    if w.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(w.stride)) {
                            *v = s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[C,H,W]` sample.
#[cfg(test)]
pub(crate) fn col2im<T: Float>(cols: &[T], w: &Window, x: &mut [T]) {
    col2im_band(cols, w, 0, w.out_h, x)
}

/// Adjoint of [`im2col_band`].
pub(crate) fn col2im_band<T: Float>(cols: &[T], w: &Window, oy0: usize, oy1: usize, x: &mut [T]) {
    let ow = w.out_w;
    let band = (oy1 - oy0) * ow;
    let mut row = 0;
    for c in 0..w.channels {
        let plane = &mut x[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ky in 0..w.kh {
            for kx in 0..w.kw {
                let (lo, hi) = valid_cols(w, kx);
                let src = &cols[row * band..(row + 1) * band];
                row += 1;
                if lo == hi {
                    continue;
                }
                let start = lo * w.stride + kx - w.pad;
                for oy in oy0..oy1 {
                    let iy = (oy * w.stride + ky) as isize - w.pad as isize;
                    if iy < 0 || iy >= w.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w.width..(iy as usize + 1) * w.width];
                    let r = oy - oy0;
                    let line = &src[r * ow + lo..r * ow + hi];
                    if w.stride == 1 {
                        for (d, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(w.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output rows per band so a band's column matrix stays cache-resident.
pub(crate) fn band_rows(w: &Window) -> usize {
    const TARGET: usize = 64 * 1024;
    (TARGET / (w.col_rows() * w.out_w).max(1)).clamp(1, w.out_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    proptest! {
        #[test]
        fn col2im_is_adjoint_of_im2col(
            channels in 1usize..3,
            height in 1usize..9,
            width in 1usize..9,
            k in 1usize..4,
            stride in 1usize..3,
            pad in 0usize..3,
            seed in 0u64..1000,
        ) {
            let (hp, wp) = (height + 2 * pad, width + 2 * pad);
            proptest::prop_assume!(hp >= k && wp >= k);
            let w = Window {
                channels, height, width, kh: k, kw: k, stride, pad,
                out_h: (hp - k) / stride + 1,
                out_w: (wp - k) / stride + 1,
            };
            let val = |i: usize| (((i as u64 * 2654435761 + seed) % 1000) as f64) / 500.0 - 1.0;
            let x: Vec<f64> = (0..channels * height * width).map(val).collect();
            let c: Vec<f64> = (0..w.col_rows() * w.col_cols()).map(|i| val(i + 7919)).collect();
            let mut cols = vec![0.0; c.len()];
            im2col(&x, &w, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &w, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn bands_tile_the_full_matrix(
            channels in 1usize..3,
            size in 3usize..10,
            stride in 1usize..3,
            band in 1usize..4,
        ) {
            let w = Window {
                channels, height: size, width: size, kh: 3, kw: 3, stride, pad: 1,
                out_h: (size - 1) / stride + 1,
                out_w: (size - 1) / stride + 1,
            };
            let x: Vec<f64> = (0..channels * size * size).map(|i| i as f64).collect();
            let mut full = vec![0.0; w.col_rows() * w.col_cols()];
            im2col(&x, &w, &mut full);
            let mut oy0 = 0;
            while oy0 < w.out_h {
                let oy1 = (oy0 + band).min(w.out_h);
                let n = (oy1 - oy0) * w.out_w;
                let mut part = vec![f64::NAN; w.col_rows() * n];
                im2col_band(&x, &w, oy0, oy1, &mut part);
                for r in 0..w.col_rows() {
                    let want = &full[r * w.col_cols() + oy0 * w.out_w..][..n];
                    prop_assert!(part[r * n..(r + 1) * n] == *want);
                }
                oy0 = oy1;
            }
        }
    }
}
