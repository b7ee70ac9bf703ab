//! Inner loops shared by the convolution and matmul ops.

use super::tensor::Real;

/// Valid index range `l` such that `l + off` stays inside `0..len`.
#[inline]
fn shifted_range(len: usize, off: isize) -> Option<(usize, usize)> {
    if off.unsigned_abs() >= len {
        return None;
    }
    if off >= 0 {
        Some((0, len - off as usize))
    } else {
        Some(((-off) as usize, len))
    }
}

/// `dst[l] += w * src[l + off]` wherever both indices are in range.
#[inline]
pub fn axpy_shifted<T: Real>(dst: &mut [T], src: &[T], off: isize, w: T) {
    let Some((lo, hi)) = shifted_range(dst.len(), off) else {
        return;
    };
    let s = (lo as isize + off) as usize;
    let src = &src[s..s + (hi - lo)];
    dst[lo..hi]
        .iter_mut()
        .zip(src)
        .for_each(|(d, &x)| *d += w * x);
}

/// `sum_l a[l] * b[l + off]`.
#[inline]
pub fn dot_shifted<T: Real>(a: &[T], b: &[T], off: isize) -> T {
    let Some((lo, hi)) = shifted_range(a.len(), off) else {
        return T::zero();
    };
    let s = (lo as isize + off) as usize;
    dot(&a[lo..hi], &b[s..s + (hi - lo)])
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_ops_match_naive() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..13).map(|i| (i as f64).sin()).collect();
        for off in -14isize..=14 {
            let naive: f64 = (0..13)
                .filter_map(|l| {
                    let j = l as isize + off;
                    (0..13).contains(&j).then(|| a[l] * b[j as usize])
                })
                .sum();
            assert!((dot_shifted(&a, &b, off) - naive).abs() < 1e-12);

            let mut dst = vec![0.0; 13];
            axpy_shifted(&mut dst, &b, off, 2.0);
            for l in 0..13 {
                let j = l as isize + off;
                let want = if (0..13).contains(&j) {
                    2.0 * b[j as usize]
                } else {
                    0.0
                };
                assert_eq!(dst[l], want);
            }
        }
    }
}
