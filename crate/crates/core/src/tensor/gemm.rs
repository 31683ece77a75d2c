//! Matrix-multiply entry points used by the convolution and dense layers.
//!
//! The inner kernel is `matrixmultiply`'s packed blocked GEMM. Large products
//! are split over fixed-size row blocks and run on the rayon pool; the block
//! partition does not depend on the thread count and each output element is
//! produced by exactly one kernel call with a fixed reduction order, so
//! results are bit-identical for any `--threads` setting.

use super::Element;
use rayon::prelude::*;

/// Rows of C per parallel block. Fixed so partitioning (and therefore
/// numerics) is independent of the pool size.
const BLOCK_M: usize = 96;

/// Minimum multiply-add count before spawning parallel blocks.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Clone, Copy)]
struct ConstPtr<E>(*const E);
unsafe impl<E> Send for ConstPtr<E> {}
unsafe impl<E> Sync for ConstPtr<E> {}

/// C(m,n) = A(m,k) * B(k,n) [+ C when `accumulate`], all row-major.
pub fn gemm_nn<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    b: &[E],
    c: &mut [E],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, c, accumulate);
}

/// C(m,n) = A(m,k) * B^T where `bt` is stored row-major as (n,k).
pub fn gemm_nt<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    bt: &[E],
    c: &mut [E],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(m, k, n, a, k as isize, 1, bt, 1, k as isize, c, accumulate);
}

/// C(m,n) = A^T * B where `at` is stored row-major as (k,m), B as (k,n).
pub fn gemm_tn<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    at: &[E],
    b: &[E],
    c: &mut [E],
    accumulate: bool,
) {
    debug_assert_eq!(at.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(m, k, n, at, 1, m as isize, b, n as isize, 1, c, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    rsa: isize,
    csa: isize,
    b: &[E],
    rsb: isize,
    csb: isize,
    c: &mut [E],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { E::ONE } else { E::ZERO };
    if k == 0 {
        if !accumulate {
            c.fill(E::ZERO);
        }
        return;
    }

    let nblocks = m.div_ceil(BLOCK_M);
    let parallel = m * k * n >= PAR_THRESHOLD && nblocks > 1 && rayon::current_num_threads() > 1;
    if !parallel {
        unsafe {
            E::gemm_kernel(
                m,
                k,
                n,
                E::ONE,
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
        return;
    }

    let a_ptr = ConstPtr(a.as_ptr());
    let b_ptr = ConstPtr(b.as_ptr());
    c.par_chunks_mut(BLOCK_M * n).enumerate().for_each(|(bi, c_block)| {
        let i0 = bi * BLOCK_M;
        let rows = c_block.len() / n;
        // Row offset into A for this block: row stride may be 1 (transposed
        // view), so offset by i0 * rsa elements.
        let a_off = unsafe { a_ptr.0.offset(i0 as isize * rsa) };
        unsafe {
            E::gemm_kernel(
                rows,
                k,
                n,
                E::ONE,
                a_off,
                rsa,
                csa,
                b_ptr.0,
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Reference triple-loop multiply. Test oracle; never used on hot paths.
pub fn gemm_naive<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = E::ZERO;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.normal() as f32).collect()
    }

    #[test]
    fn matches_naive() {
        let mut rng = Rng::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 4), (17, 33, 9), (64, 128, 50), (200, 96, 101)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let mut c = vec![0.0f32; m * n];
            let mut c_ref = vec![0.0f32; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c, false);
            gemm_naive(m, k, n, &a, &b, &mut c_ref);
            for (x, y) in c.iter().zip(&c_ref) {
                assert!((x - y).abs() < 1e-3, "{x} vs {y} at ({m},{k},{n})");
            }
        }
    }

    #[test]
    fn transposed_variants() {
        let mut rng = Rng::new(12);
        let (m, k, n) = (13, 21, 8);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut c_ref = vec![0.0f32; m * n];
        gemm_naive(m, k, n, &a, &b, &mut c_ref);

        // B^T stored as (n, k)
        let mut bt = vec![0.0f32; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0f32; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c, false);
        for (x, y) in c.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-4);
        }

        // A^T stored as (k, m)
        let mut at = vec![0.0f32; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0f32; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c2, false);
        for (x, y) in c2.iter().zip(&c_ref) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn accumulate_adds() {
        let a = vec![1.0f32, 2.0];
        let b = vec![3.0f32, 4.0];
        let mut c = vec![10.0f32];
        gemm_nn(1, 2, 1, &a, &b, &mut c, true);
        assert_eq!(c[0], 21.0);
        gemm_nn(1, 2, 1, &a, &b, &mut c, false);
        assert_eq!(c[0], 11.0);
    }

    #[test]
    fn parallel_partition_is_bit_identical() {
        let mut rng = Rng::new(13);
        let (m, k, n) = (400, 300, 200);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut c1 = vec![0.0f32; m * n];
        let mut c2 = vec![0.0f32; m * n];
        crate::with_threads(1, || gemm_nn(m, k, n, &a, &b, &mut c1, false));
        crate::with_threads(2, || gemm_nn(m, k, n, &a, &b, &mut c2, false));
        assert_eq!(c1, c2);
    }
}
