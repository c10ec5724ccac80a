//! Raw numeric kernels shared by the forward and backward passes.
//!
//! Everything here is single-threaded with a fixed accumulation order, so
//! results are bit-reproducible within one build.

use super::scalar::Scalar;

/// C[m,n] += A[m,k] * B[k,n], all row-major.
pub fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Plain i-k-j order: the j loop auto-vectorizes, and per output element
    // the contributions arrive in ascending k order, matching what a naive
    // nested-loop reference produces term for term.
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (B stored row-major as [n,k]).
pub fn matmul_abt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]  (A stored row-major as [k,m]).
pub fn matmul_atb_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
}

/// Unpacks one sample of a [C,H,W] image into a [C*kh*kw, oh*ow] patch
/// matrix with zero padding. `cols` must be zero-filled by the caller when
/// padding can leave untouched entries; this routine overwrites every slot.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    cols: &mut [T],
    img: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    debug_assert_eq!(cols.len(), channels * kh * kw * oh * ow);
    debug_assert_eq!(img.len(), channels * h * w);
    let hw = oh * ow;
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col`]: folds a patch-matrix gradient back
/// onto the image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Scalar>(
    img_grad: &mut [T],
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let hw = oh * ow;
    for c in 0..channels {
        let plane = &mut img_grad[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// The four corner indices and weights of one bilinear tap. Corners that
/// fall outside the image are reported as `None` (zero padding).
#[inline]
pub fn bilinear_taps<T: Scalar>(
    x: T,
    y: T,
    w: usize,
    h: usize,
) -> [(Option<(usize, usize)>, T); 4] {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f.as_f64() as isize;
    let y0 = y0f.as_f64() as isize;
    let one = T::one();
    let inside = |xx: isize, yy: isize| -> Option<(usize, usize)> {
        if xx >= 0 && (xx as usize) < w && yy >= 0 && (yy as usize) < h {
            Some((xx as usize, yy as usize))
        } else {
            None
        }
    };
    [
        (inside(x0, y0), (one - fx) * (one - fy)),
        (inside(x0 + 1, y0), fx * (one - fy)),
        (inside(x0, y0 + 1), (one - fx) * fy),
        (inside(x0 + 1, y0 + 1), fx * fy),
    ]
}
