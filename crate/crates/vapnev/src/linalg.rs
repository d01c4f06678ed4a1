//! Small dense matrix kernels behind the tensor ops.
//!
//! Every output element is accumulated serially inside a single task, so
//! results are bitwise identical whatever the thread count. Parallelism only
//! splits *independent* output rows across threads.

use rayon::prelude::*;
use std::sync::OnceLock;

use crate::scalar::Scalar;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Cap internal parallelism. First call wins; defaults to the rayon global
/// pool if never called. `1` forces fully serial kernels. Results do not
/// depend on the thread count either way.
pub fn set_threads(n: usize) {
    let n = n.max(1);
    if THREADS.set(n).is_ok() && n > 1 {
        // Best effort: sizes the global pool if nothing built it yet.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn threads() -> usize {
    *THREADS.get_or_init(|| rayon::current_num_threads())
}

fn parallel() -> bool {
    threads() > 1
}

// Rows below this are not worth a rayon dispatch.
const PAR_MIN_ROWS: usize = 8;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [E], i: usize| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    };
    if parallel() && m >= PAR_MIN_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn gemm_at_b<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    // serial over m so each c row accumulates in a fixed order
    let rows = |c: &mut [E], p0: usize, p1: usize| {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for p in p0..p1 {
                let apv = arow[p];
                if apv == E::zero() {
                    continue;
                }
                let crow = &mut c[(p - p0) * n..(p - p0 + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += apv * bv;
                }
            }
        }
    };
    if parallel() && k >= PAR_MIN_ROWS {
        let chunk = (k + threads() - 1) / threads();
        c.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, cc)| {
                let p0 = ci * chunk;
                let p1 = (p0 + chunk).min(k);
                rows(cc, p0, p1);
            });
    } else {
        rows(c, 0, k);
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T
pub fn gemm_a_bt<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let row = |ci: &mut [E], i: usize| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, cv) in ci.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if parallel() && m >= PAR_MIN_ROWS {
        c.par_chunks_mut(k).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(k).enumerate() {
            row(ci, i);
        }
    }
}
