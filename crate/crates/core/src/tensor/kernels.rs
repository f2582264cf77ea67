//! Raw buffer kernels shared by the forward and backward passes.

use super::Scalar;

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, b, &mut c);
    c
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `k×n`.
pub(crate) fn mm_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let at = transpose(a, m, k);
    mm(&at, b, k, m, n)
}

/// `a · bᵀ` for `a[m×n]`, `b[k×n]`, giving `m×k`.
pub(crate) fn mm_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let bt = transpose(b, k, n);
    mm(a, &bt, m, n, k)
}

/// Copies columns `[c0, c0 + width)` of a `rows×cols` matrix.
pub(crate) fn columns<T: Scalar>(a: &[T], rows: usize, cols: usize, c0: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&a[r * cols + c0..r * cols + c0 + width]);
    }
    out
}

pub(crate) fn add_columns<T: Scalar>(
    dst: &mut [T],
    rows: usize,
    cols: usize,
    c0: usize,
    width: usize,
    src: &[T],
) {
    for r in 0..rows {
        let d = &mut dst[r * cols + c0..r * cols + c0 + width];
        for (x, &s) in d.iter_mut().zip(&src[r * width..(r + 1) * width]) {
            *x = *x + s;
        }
    }
}

/// Border rule for 3×3 neighborhood extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Out-of-range taps read zero (convolution padding).
    Zero,
    /// Out-of-range taps read the nearest edge pixel.
    Clamp,
}

#[inline]
fn tap(i: usize, off: usize, n: usize, border: Border) -> Option<usize> {
    let j = i as isize + off as isize - 1;
    if j >= 0 && (j as usize) < n {
        Some(j as usize)
    } else {
        match border {
            Border::Zero => None,
            Border::Clamp => Some(j.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// `[h, w, c] -> [h·w, 9·c]`, tap order (ky, kx, channel).
pub(crate) fn unfold3x3<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, border: Border) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * 9 * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut out[(y * w + xx) * 9 * c..(y * w + xx + 1) * 9 * c];
            for ky in 0..3 {
                let Some(sy) = tap(y, ky, h, border) else { continue };
                for kx in 0..3 {
                    let Some(sx) = tap(xx, kx, w, border) else { continue };
                    let src = &x[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold3x3`].
pub(crate) fn fold3x3<T: Scalar>(g: &[T], h: usize, w: usize, c: usize, border: Border) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &g[(y * w + xx) * 9 * c..(y * w + xx + 1) * 9 * c];
            for ky in 0..3 {
                let Some(sy) = tap(y, ky, h, border) else { continue };
                for kx in 0..3 {
                    let Some(sx) = tap(xx, kx, w, border) else { continue };
                    let dst = &mut out[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(&row[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
    out
}

/// Per-head `Kₙᵀ·Qₙ` for `k, q: [t, heads·d]`, accumulated in double precision.
/// Returns `heads·d·d` values, head-major.
pub fn attention_summary_f64<T: Scalar>(k: &[T], q: &[T], t: usize, heads: usize, d: usize) -> Vec<f64> {
    let c = heads * d;
    let mut out = vec![0.0f64; heads * d * d];
    for row in 0..t {
        let kr = &k[row * c..(row + 1) * c];
        let qr = &q[row * c..(row + 1) * c];
        for n in 0..heads {
            let s = &mut out[n * d * d..(n + 1) * d * d];
            for i in 0..d {
                let ki = kr[n * d + i].to_f64_lossy();
                let dst = &mut s[i * d..(i + 1) * d];
                for (j, slot) in dst.iter_mut().enumerate() {
                    *slot += ki * qr[n * d + j].to_f64_lossy();
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..8).map(|v| (v * v) as f64 * 0.5).collect(); // 2×4
        let atb = mm_at_b(&a, &b, 2, 3, 4);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|m| a[m * 3 + i] * b[m * 4 + j]).sum();
                assert_eq!(atb[i * 4 + j], want);
            }
        }
        let c: Vec<f64> = (0..12).map(|v| v as f64 * 0.25).collect(); // 4×3
        let abt = mm_a_bt(&a, &c, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * c[j * 3 + p]).sum();
                assert_eq!(abt[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        // <unfold(x), g> == <x, fold(g)>
        let (h, w, c) = (3, 4, 2);
        let x: Vec<f64> = (0..h * w * c).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let g: Vec<f64> = (0..h * w * 9 * c).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        for border in [Border::Zero, Border::Clamp] {
            let u = unfold3x3(&x, h, w, c, border);
            let f = fold3x3(&g, h, w, c, border);
            let lhs: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&f).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn clamp_border_replicates_edges() {
        let x = [1.0f64, 2.0];
        let u = unfold3x3(&x, 1, 2, 1, Border::Clamp);
        assert_eq!(&u[..9], &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        let z = unfold3x3(&x, 1, 2, 1, Border::Zero);
        assert_eq!(&z[..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
    }
}
