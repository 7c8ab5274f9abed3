//! Raw forward/backward kernels on contiguous `[c, h, w]` buffers.

use super::Scalar;

/// `c = a @ b + beta * c`. `a` is `m x k` (stored `k x m` when `a_t`),
/// `b` is `k x n` (stored `n x k` when `b_t`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above.
    unsafe { T::gemm(m, k, n, a.as_ptr(), a_t, b.as_ptr(), b_t, beta, c.as_mut_ptr()) }
}

/// `out[i][j] = sum_p a[i][p] * b[j][p]` for row-major `a: [m, k]` and
/// `b: [n, k]`. Beats the packed gemm when `k` is long and `m`, `n` small,
/// where packing the transposed operand dominates.
pub fn dot_rows<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], out: &mut [T]) {
    const L: usize = 16;
    assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    for j in 0..n {
        let br = &b[j * k..(j + 1) * k];
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            let mut acc = [T::zero(); L];
            let mut ac = ar.chunks_exact(L);
            let mut bc = br.chunks_exact(L);
            for (x, y) in (&mut ac).zip(&mut bc) {
                for l in 0..L {
                    acc[l] = acc[l] + x[l] * y[l];
                }
            }
            let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
            for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
                total = total + x * y;
            }
            out[i * n + j] = total;
        }
    }
}

/// Unfold a zero-padded `ks x ks` neighbourhood (stride 1, same padding) into
/// a `[c * ks * ks, h * w]` matrix.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, ks: usize) -> Vec<T> {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * ks * ks * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (ci * ks + ky) * ks + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let sx0 = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[src_row + sx0..src_row + sx0 + len]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, ks: usize, dx: &mut [T]) {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (ci * ks + ky) * ks + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx_off = kx as isize - pad;
                let x_lo = (-dx_off).max(0) as usize;
                let x_hi = (w as isize - dx_off).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = sy as usize * w;
                    let sx0 = (x_lo as isize + dx_off) as usize;
                    for (i, &g) in src[y * w + x_lo..y * w + x_hi].iter().enumerate() {
                        plane[dst_row + sx0 + i] = plane[dst_row + sx0 + i] + g;
                    }
                }
            }
        }
    }
}

pub fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Derivative of `silu` given the input and its sigmoid.
pub fn silu_grad<T: Scalar>(v: T, sig: T) -> T {
    sig * (T::one() + v * (T::one() - sig))
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization statistics: returns `(xhat, rstd per group)`.
pub fn group_norm_stats<T: Scalar>(
    x: &[T],
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>) {
    let per = c / groups * hw;
    let eps = T::lit(GROUP_NORM_EPS);
    let n = T::lit(per as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(groups);
    for g in 0..groups {
        let seg = &x[g * per..(g + 1) * per];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat[g * per..(g + 1) * per].iter_mut().zip(seg) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (xhat, rstds)
}

/// Gradient of group normalization w.r.t. its input, given the gradient
/// w.r.t. the normalized values `xhat`.
pub fn group_norm_backward<T: Scalar>(
    dxhat: &[T],
    xhat: &[T],
    rstd: &[T],
    c: usize,
    hw: usize,
    groups: usize,
) -> Vec<T> {
    let per = c / groups * hw;
    let n = T::lit(per as f64);
    let mut dx = vec![T::zero(); dxhat.len()];
    for g in 0..groups {
        let r = g * per..(g + 1) * per;
        let dh = &dxhat[r.clone()];
        let xh = &xhat[r.clone()];
        let sum_dh: T = dh.iter().copied().sum();
        let sum_dh_xh: T = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let k = rstd[g] / n;
        for ((o, &d), &h) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o = k * (n * d - sum_dh - h * sum_dh_xh);
        }
    }
    dx
}

/// 2x2 average pooling.
pub fn avg_pool2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let src = &x[ci * h * w..];
        let dst = &mut out[ci * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = dy[ci * oh * ow + y * ow + xx] * quarter;
                let i = ci * h * w + 2 * y * w + 2 * xx;
                dx[i] = g;
                dx[i + 1] = g;
                dx[i + w] = g;
                dx[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ci * oh * ow + y * ow + xx] = x[ci * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = ci * h * w + (y / 2) * w + xx / 2;
                dx[i] = dx[i] + dy[ci * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], co: usize, ks: usize) -> Vec<f64> {
        let pad = (ks / 2) as isize;
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..ks as isize {
                            for kx in 0..ks as isize {
                                let sy = y + ky - pad;
                                let sx = xx + kx - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((o * c + ci) * ks + ky as usize) * ks + kx as usize;
                                acc += wt[wi] * x[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[o * h * w + y as usize * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (c, h, w, co, ks) = (2, 5, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..co * c * ks * ks).map(|i| ((i * 3) % 5) as f64 * 0.1 - 0.2).collect();
        let col = im2col(&x, c, h, w, ks);
        let mut out = vec![0.0; co * h * w];
        gemm(co, c * ks * ks, h * w, &wt, false, &col, false, 0.0, &mut out);
        let want = naive_conv(&x, c, h, w, &wt, co, ks);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, ks) = (2, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64).sin()).collect();
        let col = im2col(&x, c, h, w, ks);
        let g: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, c, h, w, ks, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn gemm_against_naive<T: Scalar>(tol: f64) {
        let shapes = [
            (4, 2, 216),
            (8, 4, 216),
            (8, 16, 216),
            (3, 5, 7),
            (1, 1, 1),
            (16, 144, 4096),
            (64, 576, 256),
            (32, 27, 64),
        ];
        for &(m, k, n) in &shapes {
            for (a_t, b_t) in [(false, false), (false, true), (true, false), (true, true)] {
                let a: Vec<T> = (0..m * k).map(|i| T::lit(((i * 7) % 11) as f64 * 0.25 - 1.25)).collect();
                let b: Vec<T> = (0..k * n).map(|i| T::lit(((i * 3) % 13) as f64 * 0.125 - 0.75)).collect();
                let mut c = vec![T::one(); m * n];
                gemm(m, k, n, &a, a_t, &b, b_t, T::lit(0.5), &mut c);
                for i in 0..m {
                    for j in 0..n {
                        let mut want = 0.5;
                        for p in 0..k {
                            let av = if a_t { a[p * m + i] } else { a[i * k + p] };
                            let bv = if b_t { b[j * k + p] } else { b[p * n + j] };
                            want += av.as_f64() * bv.as_f64();
                        }
                        let got = c[i * n + j].as_f64();
                        assert!((got - want).abs() <= tol * want.abs().max(1.0), "{m}x{k}x{n} {a_t}/{b_t}: {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_matches_naive_product() {
        gemm_against_naive::<f64>(1e-12);
        gemm_against_naive::<f32>(1e-5);
    }

    #[test]
    fn dot_rows_matches_naive() {
        let (m, n, k) = (3, 5, 37);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..n * k).map(|i| ((i * 3) % 13) as f64 * 0.5).collect();
        let mut out = vec![0.0; m * n];
        dot_rows(m, n, k, &a, &b, &mut out);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
                assert_eq!(out[i * n + j], want);
            }
        }
    }

    #[test]
    fn transposed_gemm_layouts() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let at = [1.0, 3.0, 2.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let bt = [5.0, 7.0, 6.0, 8.0];
        let want = [19.0, 22.0, 43.0, 50.0];
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = [0.0f64; 4];
                gemm(2, 2, 2, aa, a_t, bb, b_t, 0.0, &mut c);
                assert_eq!(c, want);
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_quarter() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64).collect();
        let y = avg_pool2(&x, 2, 4, 4);
        assert_eq!(y[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let up = upsample2(&y, 2, 2, 2);
        assert_eq!(up.len(), x.len());
        let back = avg_pool2_backward(&y, 2, 4, 4);
        for (u, b) in up.iter().zip(&back) {
            assert_eq!(*b, u * 0.25);
        }
    }
}
