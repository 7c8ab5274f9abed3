use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of tensors. Training runs in `f32`, gradient
/// checks in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = a' @ b' + beta * c` on dense row-major buffers, where `a'` is `a`
    /// (`[m, k]`) or, with `a_t`, the transpose of `a` stored as `[k, m]`;
    /// likewise `b'` is `[k, n]`. `c` is `[m, n]`.
    ///
    /// # Safety
    /// Buffers must hold at least the stated number of elements.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(m: usize, k: usize, n: usize, a: *const Self, a_t: bool, b: *const Self, b_t: bool, beta: Self, c: *mut Self);

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

/// `(row stride, col stride)` of a dense row-major operand of logical shape
/// `[r, c]`, optionally stored transposed.
fn strides(r: usize, c: usize, t: bool) -> (isize, isize) {
    if t {
        (1, r as isize)
    } else {
        (c as isize, 1)
    }
}

#[cfg(feature = "openblas")]
mod blas {
    use std::sync::Once;

    pub const ROW_MAJOR: i32 = 101;
    pub const NO_TRANS: i32 = 111;
    pub const TRANS: i32 = 112;

    #[link(name = "openblas")]
    extern "C" {
        pub fn cblas_sgemm(
            order: i32, ta: i32, tb: i32, m: i32, n: i32, k: i32, alpha: f32, a: *const f32, lda: i32,
            b: *const f32, ldb: i32, beta: f32, c: *mut f32, ldc: i32,
        );
        fn openblas_set_num_threads(n: i32);
    }

    /// Batch items already run on the rayon pool; BLAS stays single-threaded.
    pub fn init() {
        static ONCE: Once = Once::new();
        // SAFETY: plain FFI call without pointer arguments.
        ONCE.call_once(|| unsafe { openblas_set_num_threads(1) });
    }

    /// `(transpose flag, leading dimension)` for a logical `[r, c]` operand.
    pub fn op(r: usize, c: usize, t: bool) -> (i32, i32) {
        if t {
            (TRANS, r.max(1) as i32)
        } else {
            (NO_TRANS, c.max(1) as i32)
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $mm:path, $blas:expr) => {
        impl Scalar for $t {
            unsafe fn gemm(m: usize, k: usize, n: usize, a: *const $t, a_t: bool, b: *const $t, b_t: bool, beta: $t, c: *mut $t) {
                #[cfg(feature = "openblas")]
                {
                    let call: Option<BlasGemm<$t>> = $blas;
                    if let (Some(f), true) = (call, k > 0) {
                        blas::init();
                        let (ta, lda) = blas::op(m, k, a_t);
                        let (tb, ldb) = blas::op(k, n, b_t);
                        f(blas::ROW_MAJOR, ta, tb, m as i32, n as i32, k as i32, 1.0, a, lda, b, ldb, beta, c, n.max(1) as i32);
                        return;
                    }
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                $mm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1)
            }
        }
    };
}

#[cfg(feature = "openblas")]
type BlasGemm<T> =
    unsafe extern "C" fn(i32, i32, i32, i32, i32, i32, T, *const T, i32, *const T, i32, T, *mut T, i32);

// The f64 path stays on matrixmultiply: some OpenBLAS builds return wrong
// dgemm results for small operands, and f64 only serves gradient checks.
impl_scalar!(f32, matrixmultiply::sgemm, Some(blas::cblas_sgemm));
impl_scalar!(f64, matrixmultiply::dgemm, None);
