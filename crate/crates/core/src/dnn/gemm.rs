//! Row-major GEMM front-end: `C = alpha·op(A)·op(B) + beta·C`.
//!
//! With the default `openblas` feature this loads the system CBLAS at first
//! use; the `pure-rust` feature swaps in `matrixmultiply` so the crate
//! builds without any system library. Both paths share the row-major
//! convention: `lda`/`ldb`/`ldc` are the distances between consecutive rows
//! of the *stored* matrices, and `transpose` flags reinterpret the stored
//! matrix as its transpose.

// The wrappers keep the BLAS argument list verbatim so they can be checked
// against any CBLAS man page; bundling the dimensions into a struct would
// only add translation errors.
#![allow(clippy::too_many_arguments)]

#[cfg(feature = "openblas")]
mod backend {
    use std::ffi::{c_char, c_int, c_void, CStr};
    use std::sync::OnceLock;

    const ROW_MAJOR: i32 = 101;
    const NO_TRANS: i32 = 111;
    const TRANS: i32 = 112;
    const RTLD_NOW: c_int = 2;

    extern "C" {
        fn dlopen(filename: *const c_char, flags: c_int) -> *mut c_void;
        fn dlsym(handle: *mut c_void, symbol: *const c_char) -> *mut c_void;
    }

    type SgemmFn = unsafe extern "C" fn(
        i32, i32, i32, i32, i32, i32, f32, *const f32, i32, *const f32, i32, f32, *mut f32, i32,
    );
    type DgemmFn = unsafe extern "C" fn(
        i32, i32, i32, i32, i32, i32, f64, *const f64, i32, *const f64, i32, f64, *mut f64, i32,
    );

    struct Cblas {
        sgemm: SgemmFn,
        dgemm: DgemmFn,
    }

    static CBLAS: OnceLock<Cblas> = OnceLock::new();

    /// Pick the kernel family explicitly on CPUs the library may not know.
    ///
    /// Distro OpenBLAS builds dispatch on a core table frozen at their
    /// release; on CPUs newer than that table the dispatcher silently falls
    /// back to a generic SSE kernel (observed: AVX-512 server cores pinned
    /// to the Prescott path, ~3.5× slower). `OPENBLAS_CORETYPE` overrides
    /// the probe, but only if it is set before the library's constructor
    /// runs — which is why the library is loaded lazily here instead of
    /// being linked at build time. A value already present in the
    /// environment is always respected.
    fn choose_core_type() {
        #[cfg(target_arch = "x86_64")]
        if std::env::var_os("OPENBLAS_CORETYPE").is_none()
            && std::arch::is_x86_feature_detected!("avx512f")
        {
            std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
        }
    }

    fn load() -> Cblas {
        choose_core_type();
        let handle = [c"libopenblas.so.0", c"libopenblas.so"]
            .iter()
            .map(|name| unsafe { dlopen(name.as_ptr(), RTLD_NOW) })
            .find(|h| !h.is_null())
            .unwrap_or_else(|| {
                panic!(
                    "cannot load libopenblas; install the OpenBLAS runtime or build with \
                     --no-default-features --features pure-rust"
                )
            });
        let sym = |name: &CStr| {
            let p = unsafe { dlsym(handle, name.as_ptr()) };
            assert!(!p.is_null(), "libopenblas lacks symbol {name:?}");
            p
        };
        // Safety: the symbols come from the library that defines them with
        // exactly these CBLAS / OpenBLAS signatures.
        unsafe {
            // Pin the BLAS to one thread: the callers parallelize across
            // samples, and a fixed reduction order keeps results
            // bit-reproducible regardless of the host's core count.
            let set_threads: unsafe extern "C" fn(i32) =
                std::mem::transmute(sym(c"openblas_set_num_threads"));
            set_threads(1);
            Cblas {
                sgemm: std::mem::transmute::<*mut c_void, SgemmFn>(sym(c"cblas_sgemm")),
                dgemm: std::mem::transmute::<*mut c_void, DgemmFn>(sym(c"cblas_dgemm")),
            }
        }
    }

    fn cblas() -> &'static Cblas {
        CBLAS.get_or_init(load)
    }

    fn flag(t: bool) -> i32 {
        if t {
            TRANS
        } else {
            NO_TRANS
        }
    }

    pub fn sgemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: f32,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        beta: f32,
        c: &mut [f32],
        ldc: usize,
    ) {
        let f = cblas().sgemm;
        // Safety: the wrapper in `super` has validated that every slice
        // covers the region the given dimensions and strides address.
        unsafe {
            f(
                ROW_MAJOR,
                flag(ta),
                flag(tb),
                m as i32,
                n as i32,
                k as i32,
                alpha,
                a.as_ptr(),
                lda as i32,
                b.as_ptr(),
                ldb as i32,
                beta,
                c.as_mut_ptr(),
                ldc as i32,
            );
        }
    }

    pub fn dgemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: f64,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        beta: f64,
        c: &mut [f64],
        ldc: usize,
    ) {
        let f = cblas().dgemm;
        // Safety: see sgemm.
        unsafe {
            f(
                ROW_MAJOR,
                flag(ta),
                flag(tb),
                m as i32,
                n as i32,
                k as i32,
                alpha,
                a.as_ptr(),
                lda as i32,
                b.as_ptr(),
                ldb as i32,
                beta,
                c.as_mut_ptr(),
                ldc as i32,
            );
        }
    }
}

#[cfg(all(feature = "pure-rust", not(feature = "openblas")))]
mod backend {
    /// Map (transpose flag, row stride) to matrixmultiply's (row, col)
    /// stride pair for the logical operand.
    fn strides(t: bool, ld: usize) -> (isize, isize) {
        if t {
            (1, ld as isize)
        } else {
            (ld as isize, 1)
        }
    }

    pub fn sgemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: f32,
        a: &[f32],
        lda: usize,
        b: &[f32],
        ldb: usize,
        beta: f32,
        c: &mut [f32],
        ldc: usize,
    ) {
        let (rsa, csa) = strides(ta, lda);
        let (rsb, csb) = strides(tb, ldb);
        // Safety: the wrapper in `super` has validated slice coverage.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                ldc as isize,
                1,
            );
        }
    }

    pub fn dgemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: f64,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        beta: f64,
        c: &mut [f64],
        ldc: usize,
    ) {
        let (rsa, csa) = strides(ta, lda);
        let (rsb, csb) = strides(tb, ldb);
        // Safety: the wrapper in `super` has validated slice coverage.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                ldc as isize,
                1,
            );
        }
    }
}

#[cfg(not(any(feature = "openblas", feature = "pure-rust")))]
compile_error!("enable either the `openblas` or the `pure-rust` feature for a GEMM backend");

/// Smallest slice length that a (rows×cols, ld) operand may address.
fn required_len(t: bool, rows: usize, cols: usize, ld: usize) -> usize {
    let (r, c) = if t { (cols, rows) } else { (rows, cols) };
    if r == 0 || c == 0 {
        0
    } else {
        (r - 1) * ld + c
    }
}

macro_rules! checked_gemm {
    ($name:ident, $ty:ty, $backend:path) => {
        /// Row-major `C = alpha·op(A)·op(B) + beta·C` with `op(A): m×k`,
        /// `op(B): k×n`, `C: m×n`.
        #[allow(clippy::too_many_arguments)]
        pub(crate) fn $name(
            ta: bool,
            tb: bool,
            m: usize,
            n: usize,
            k: usize,
            alpha: $ty,
            a: &[$ty],
            lda: usize,
            b: &[$ty],
            ldb: usize,
            beta: $ty,
            c: &mut [$ty],
            ldc: usize,
        ) {
            if m == 0 || n == 0 {
                return;
            }
            assert!(a.len() >= required_len(ta, m, k, lda), "GEMM operand A too short");
            assert!(b.len() >= required_len(tb, k, n, ldb), "GEMM operand B too short");
            assert!(c.len() >= required_len(false, m, n, ldc), "GEMM output C too short");
            if k == 0 {
                // BLAS would leave C untouched for beta=1; make the k=0 case
                // behave like an empty sum regardless of backend.
                for row in 0..m {
                    for v in &mut c[row * ldc..row * ldc + n] {
                        *v *= beta;
                    }
                }
                return;
            }
            $backend(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
        }
    };
}

checked_gemm!(sgemm, f32, backend::sgemm);
checked_gemm!(dgemm, f64, backend::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook triple loop to check the backend against.
    fn naive(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
    ) -> Vec<f64> {
        let at = |i: usize, j: usize| if ta { a[j * lda + i] } else { a[i * lda + j] };
        let bt = |i: usize, j: usize| if tb { b[j * ldb + i] } else { b[i * ldb + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_combinations() {
        let m = 4;
        let n = 7;
        let k = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let lda = if ta { m } else { k };
            let ldb = if tb { k } else { n };
            let want = naive(ta, tb, m, n, k, &a, lda, &b, ldb);
            let mut got = vec![0.0; m * n];
            dgemm(ta, tb, m, n, k, 1.0, &a, lda, &b, ldb, 0.0, &mut got, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "ta={ta} tb={tb}");
            }

            let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let mut gotf = vec![0.0f32; m * n];
            sgemm(ta, tb, m, n, k, 1.0, &af, lda, &bf, ldb, 0.0, &mut gotf, n);
            for (g, w) in gotf.iter().zip(&want) {
                assert!((f64::from(*g) - w).abs() < 1e-5, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn gemm_respects_alpha_beta_and_strided_output() {
        // C is a 2×2 window inside a wider 2×4 buffer (ldc = 4).
        let a = [1.0f64, 2.0, 3.0, 4.0]; // 2×2
        let b = [5.0f64, 6.0, 7.0, 8.0]; // 2×2
        let mut c = vec![10.0f64; 8];
        dgemm(false, false, 2, 2, 2, 2.0, &a, 2, &b, 2, 1.0, &mut c, 4);
        // A·B = [[19,22],[43,50]]; C = 2·that + 10.
        assert_eq!(&c[..4], &[48.0, 54.0, 10.0, 10.0]);
        assert_eq!(&c[4..], &[96.0, 110.0, 10.0, 10.0]);
    }
}
