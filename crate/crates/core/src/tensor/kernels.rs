//! Inner loops shared by the tape ops: strided matrix products and the
//! im2col/col2im transforms behind both convolution flavours.

/// Row and column stride of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major `rows × cols` matrix.
    pub const fn rm(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub const fn rm_t(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), for an `m×k` by `k×n`
/// product. Single-threaded, so results are bit-reproducible on one machine.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    c: &mut [f32],
    sc: Strides,
    accumulate: bool,
) {
    assert!(a.len() >= extent(m, k, sa), "gemm: lhs too short");
    assert!(b.len() >= extent(k, n, sb), "gemm: rhs too short");
    assert!(c.len() >= extent(m, n, sc), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

/// Geometry of a 2-D sliding window over a `channels × height × width` image.
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
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
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

    /// Rows of the column matrix: `channels · kernel²`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: one per window position.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds `img` into `cols` (`col_rows × col_cols`, row-major). Out-of-image
/// taps read as zero.
pub(crate) fn im2col(img: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (k, p) = (g.kernel, g.col_cols());
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters `cols` back onto `img`, summing overlaps.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let (k, p) = (g.kernel, g.col_cols());
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_and_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Strides::rm(k), &b, Strides::rm(n), &mut c, Strides::rm(n), false);
        assert_eq!(c, naive(m, k, n, &a, &b));

        // (aᵀ)ᵀ · b via a stored transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for t in 0..k {
                at[t * m + i] = a[i * k + t];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, Strides::rm_t(m), &b, Strides::rm(n), &mut c2, Strides::rm(n), true);
        let expect: Vec<f32> = naive(m, k, n, &a, &b).iter().map(|v| v + 1.0).collect();
        assert_eq!(c2, expect);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f32> = (0..g.image_len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f32 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn geometry() {
        let g = ConvGeom::new(1, 28, 28, 5, 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (24, 24));
        let g = ConvGeom::new(1, 28, 28, 4, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (14, 14));
        assert!(ConvGeom::new(1, 2, 2, 5, 1, 0).is_none());
    }
}
