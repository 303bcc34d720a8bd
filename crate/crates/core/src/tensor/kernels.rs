//! Raw slice kernels behind the tape operators. Shapes are validated by the
//! callers; these functions only index.

use super::Element;

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..(c + 1) * LANES];
        let xb = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub fn matmul_bt_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub fn matmul_at_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != T::zero() {
                axpy(av, br, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation over an `N x C x H x W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output positions across the whole batch.
    pub fn positions(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds the input into a `(C*kh*kw) x (N*Ho*Wo)` column matrix.
pub fn im2col<T: Element>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.positions();
    let plane = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.patch() * np];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &input[(n * g.c + ci) * g.h * g.w..(n * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * plane + oy * g.wo;
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back into input layout (adjoint of [`im2col`]).
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let np = g.positions();
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let dst_off = (n * g.c + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * plane + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = dst_off + iy as usize * g.w + ix as usize;
                                out[d] = out[d] + src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Reorders `F x (N*P)` into `N x F x P`.
pub fn fnp_to_nfp<T: Element>(src: &[T], n: usize, f: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for fi in 0..f {
        for ni in 0..n {
            let s = fi * n * p + ni * p;
            let d = (ni * f + fi) * p;
            out[d..d + p].copy_from_slice(&src[s..s + p]);
        }
    }
    out
}

/// Reorders `N x F x P` into `F x (N*P)`.
pub fn nfp_to_fnp<T: Element>(src: &[T], n: usize, f: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for fi in 0..f {
            let s = (ni * f + fi) * p;
            let d = fi * n * p + ni * p;
            out[d..d + p].copy_from_slice(&src[s..s + p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_sequential_sum_on_integers() {
        let a: Vec<f64> = (0..21).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..21).map(|i| (i % 5) as f64).collect();
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), expect);
    }

    #[test]
    fn transposed_products_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [7.0f64, 8., 9., 10., 11., 12.];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58., 64., 139., 154.]);

        let bt = [7.0f64, 9., 11., 8., 10., 12.];
        let mut c2 = [0.0; 4];
        matmul_bt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c2, c);

        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let mut c3 = [0.0; 4];
        matmul_at_acc(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c3, c);
    }

    #[test]
    fn reorder_round_trip() {
        let src: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let a = fnp_to_nfp(&src, 2, 3, 4);
        assert_eq!(nfp_to_fnp(&a, 2, 3, 4), src);
    }
}
