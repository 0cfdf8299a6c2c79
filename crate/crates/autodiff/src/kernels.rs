//! Raw slice kernels shared by the forward and backward passes.

/// `c = alpha * op(a) @ op(b) + beta * c` on row-major buffers.
///
/// `a` is logically `m x k` and `b` is `k x n`; `trans_a`/`trans_b` say the
/// buffers hold the transposes instead.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three buffers, whose lengths are checked above.
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

/// Sum whose result depends only on the multiset of values, not their order.
pub(crate) fn order_free_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// Calls `f(target_offset, source_offset)` for every element of a broadcast
/// from `source` (right-aligned, extents equal or 1) to `target`.
pub(crate) fn for_each_broadcast(
    source: &[usize],
    target: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let rank = target.len();
    let lead = rank - source.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..source.len()).rev() {
        if source[d] != 1 {
            strides[d + lead] = acc;
        }
        acc *= source[d];
    }
    let total: usize = target.iter().product();
    if rank == 0 {
        f(0, 0);
        return;
    }
    // Innermost axis handled as a run; outer axes by an odometer.
    let inner = target[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut index = vec![0usize; rank - 1];
    let mut src_base = 0usize;
    let mut t = 0usize;
    while t < total {
        for i in 0..inner {
            f(t + i, src_base + i * inner_stride);
        }
        t += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            index[d] += 1;
            src_base += strides[d];
            if index[d] < target[d] {
                break;
            }
            src_base -= strides[d] * target[d];
            index[d] = 0;
        }
    }
}
