//! Thin safe wrapper over the `matrixmultiply` dgemm kernel for row-major buffers.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k`, `op(b)` is `k×n` and `c` is `m×n`.
///
/// `a` is stored row-major as `m×k`, or as `k×m` when `trans_a` is set; likewise `b`
/// is `k×n`, or `n×k` when `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    assert_eq!(c.len(), m * n, "gemm: output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are asserted above and the strides describe
    // exactly those buffers; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
