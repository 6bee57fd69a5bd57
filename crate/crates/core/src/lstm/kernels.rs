//! Inner loops of the LSTM passes. Every implementation performs the same
//! per-element multiplies and adds in the same order, so results are
//! bit-identical whichever one runs.

/// Dot product with four independent accumulators; fixed summation order.
#[inline(always)]
pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline(always)]
pub(super) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(super) trait Kernels {
    /// [`dot`] of one row against four vectors.
    fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4];
    /// `y += (a0 x0 + a1 x1) + (a2 x2 + a3 x3)`.
    fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]);
}

pub(super) struct Portable;

impl Kernels for Portable {
    #[inline(always)]
    fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
        b.map(|v| dot(a, &v[..a.len()]))
    }

    #[inline(always)]
    fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
        let n = y.len();
        let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
        for j in 0..n {
            y[j] += (a[0] * x0[j] + a[1] * x1[j]) + (a[2] * x2[j] + a[3] * x3[j]);
        }
    }
}

/// Four-lane vectors, one lane per accumulator of [`dot`]. Only used from
/// functions compiled with AVX2 after runtime detection.
#[cfg(target_arch = "x86_64")]
pub(super) struct Avx2;

#[cfg(target_arch = "x86_64")]
impl Kernels for Avx2 {
    #[inline(always)]
    fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
        // SAFETY: only instantiated inside AVX2-enabled functions.
        unsafe { avx2::dot4(a, b) }
    }

    #[inline(always)]
    fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
        // SAFETY: as above.
        unsafe { avx2::axpy4(a, x, y) }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    #[inline]
    #[target_feature(enable = "avx2")]
    pub(super) fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
        let len = a.len();
        assert!(b.iter().all(|v| v.len() >= len));
        let n = len / 4 * 4;
        let mut acc = [_mm256_setzero_pd(); 4];
        let mut k = 0;
        while k < n {
            // SAFETY: k + 4 <= n <= len of every slice.
            unsafe {
                let x = _mm256_loadu_pd(a.as_ptr().add(k));
                for (acc, v) in acc.iter_mut().zip(&b) {
                    *acc = _mm256_add_pd(*acc, _mm256_mul_pd(x, _mm256_loadu_pd(v.as_ptr().add(k))));
                }
            }
            k += 4;
        }
        let mut out = [0.0; 4];
        for ((o, acc), v) in out.iter_mut().zip(&acc).zip(&b) {
            let mut l = [0.0f64; 4];
            // SAFETY: `l` holds four f64.
            unsafe { _mm256_storeu_pd(l.as_mut_ptr(), *acc) };
            let mut tail = 0.0;
            for j in n..len {
                tail += a[j] * v[j];
            }
            *o = (l[0] + l[1]) + (l[2] + l[3]) + tail;
        }
        out
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    pub(super) fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
        let len = y.len();
        assert!(x.iter().all(|v| v.len() >= len));
        let n = len / 4 * 4;
        let s = a.map(|v| _mm256_set1_pd(v));
        let mut j = 0;
        while j < n {
            // SAFETY: j + 4 <= n <= len of every slice.
            unsafe {
                let p = |q: usize| _mm256_mul_pd(s[q], _mm256_loadu_pd(x[q].as_ptr().add(j)));
                let sum = _mm256_add_pd(_mm256_add_pd(p(0), p(1)), _mm256_add_pd(p(2), p(3)));
                let yp = y.as_mut_ptr().add(j);
                _mm256_storeu_pd(yp, _mm256_add_pd(_mm256_loadu_pd(yp), sum));
            }
            j += 4;
        }
        for j in n..len {
            y[j] += (a[0] * x[0][j] + a[1] * x[1][j]) + (a[2] * x[2][j] + a[3] * x[3][j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vectors(n: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..5)
            .map(|q| (0..n).map(|j| ((j as f64 + 1.3) * (q as f64 + seed as f64 + 0.7)).sin()).collect())
            .collect()
    }

    #[test]
    fn portable_dot4_matches_dot() {
        for n in [1, 3, 4, 7, 64] {
            let v = vectors(n, 1);
            let got = Portable::dot4(&v[0], [&v[1], &v[2], &v[3], &v[4]]);
            for q in 0..4 {
                assert_eq!(got[q], dot(&v[0], &v[q + 1]));
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn avx2_matches_portable_bitwise() {
        if !std::is_x86_feature_detected!("avx2") {
            return;
        }
        for n in [1, 3, 4, 7, 64, 66] {
            let v = vectors(n, 2);
            let b = [&v[1][..], &v[2][..], &v[3][..], &v[4][..]];
            assert_eq!(Avx2::dot4(&v[0], b), Portable::dot4(&v[0], b));
            let a = [0.3, -1.7, 2.2, 0.01];
            let (mut y1, mut y2) = (v[0].clone(), v[0].clone());
            Avx2::axpy4(a, b, &mut y1);
            Portable::axpy4(a, b, &mut y2);
            assert_eq!(y1, y2);
        }
    }
}
