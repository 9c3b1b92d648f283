//! Bounds-checked matrix multiply over strided slices.
//!
//! Parallel execution splits the rows of the output only; every output
//! element is reduced over `k` by a single kernel call in the same order
//! whether or not the split happens.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::Scalar;

static SERIAL: AtomicBool = AtomicBool::new(false);

/// Forces every kernel onto the calling thread.
pub fn set_deterministic(on: bool) {
    SERIAL.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    SERIAL.load(Ordering::SeqCst)
}

/// True when kernels may fan out across the rayon pool.
pub(crate) fn parallel_enabled() -> bool {
    !is_deterministic() && rayon::current_num_threads() > 1
}

const PAR_MIN_FLOPS: usize = 1 << 18;

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `C = A * B + beta * C` where `C` is row-major `m x n` and `A`, `B`
/// are addressed through `(row stride, col stride)` pairs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(max_index(m, k, rsa, csa) < a.len(), "gemm lhs out of bounds");
    assert!(max_index(k, n, rsb, csb) < b.len(), "gemm rhs out of bounds");

    let run = |rows: usize, a_off: usize, c_chunk: &mut [T]| unsafe {
        T::gemm_raw(
            rows,
            k,
            n,
            T::one(),
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c_chunk.as_mut_ptr(),
            n as isize,
            1,
        )
    };

    let threads = rayon::current_num_threads();
    if parallel_enabled() && m >= 2 && m * k * n >= PAR_MIN_FLOPS {
        let rows_per = m.div_ceil(threads * 2).max(1);
        c[..m * n]
            .par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(i, chunk)| {
                let rows = chunk.len() / n;
                run(rows, i * rows_per * rsa, chunk);
            });
    } else {
        run(m, 0, &mut c[..m * n]);
    }
}
