// Copyright 2026 The EKD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use super::Scalar;
use crate::par;

/// Output rows handed to one worker. Fixed so results do not depend on the
/// number of threads.
const ROW_BLOCK: usize = 64;

/// `c (=|+=) op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
/// With `accumulate` the product is added to the existing contents of `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs buffer");
    assert_eq!(b.len(), k * n, "rhs buffer");
    assert_eq!(c.len(), m * n, "output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { F::one() } else { F::zero() };
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    par::for_each_chunk_mut(c, ROW_BLOCK * n, |block, c_rows| {
        let r0 = block * ROW_BLOCK;
        let rows = c_rows.len() / n;
        // SAFETY: the views stay inside `a`, `b` and this chunk of `c`; the
        // chunks are disjoint and `a`/`b` are only read.
        unsafe {
            let a_block = (a_ptr as *const F).offset(r0 as isize * rsa);
            F::gemm_raw(
                rows,
                k,
                n,
                a_block,
                rsa,
                csa,
                b_ptr as *const F,
                rsb,
                csb,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Triple-loop reference product of row-major `a[m,k]` and `b[k,n]`.
pub fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_transpose_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (70, 9, 130), (130, 4, 3)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive_matmul(m, k, n, &a, &b);
            let at = transpose(m, k, &a);
            let bt = transpose(k, n, &b);
            for (aa, a_t) in [(&a, false), (&at, true)] {
                for (bb, b_t) in [(&b, false), (&bt, true)] {
                    let mut c = vec![0.0; m * n];
                    gemm(m, k, n, aa, a_t, bb, b_t, &mut c, false);
                    for (x, y) in c.iter().zip(&want) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn accumulate_adds() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = vec![10.0];
        gemm(1, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c, vec![21.0]);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (300, 37, 41);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0f32; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c1, false);
        par::set_sequential(true);
        let mut c2 = vec![0.0f32; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c2, false);
        par::set_sequential(false);
        assert_eq!(c1, c2);
    }
}
