//! Safe row-major wrappers over `matrixmultiply`'s strided kernels.
//!
//! The kernels are single-threaded and use a fixed accumulation order, so
//! results are bit-reproducible across runs.

macro_rules! gemm_wrapper {
    ($name:ident, $t:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(crate) fn $name(
            m: usize,
            k: usize,
            n: usize,
            alpha: $t,
            a: &[$t],
            trans_a: bool,
            b: &[$t],
            trans_b: bool,
            beta: $t,
            c: &mut [$t],
        ) {
            assert_eq!(a.len(), m * k, "gemm: lhs length");
            assert_eq!(b.len(), k * n, "gemm: rhs length");
            assert_eq!(c.len(), m * n, "gemm: output length");
            if m == 0 || n == 0 {
                return;
            }
            let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            // SAFETY: lengths are checked above, and the strides describe an
            // in-bounds m x k, k x n and m x n view of each buffer.
            unsafe {
                $kernel(
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
                    n as isize,
                    1,
                );
            }
        }
    };
}

gemm_wrapper!(sgemm, f32, matrixmultiply::sgemm);
gemm_wrapper!(dgemm, f64, matrixmultiply::dgemm);
