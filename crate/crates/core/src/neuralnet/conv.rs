//! Convolution primitives: patch gather/scatter and the matrix products they
//! feed.
//!
//! Every convolution variant in this crate — strided forward pass, transposed
//! forward pass, and both backward passes — reduces to rearranging 3×3
//! stride-2 patches into a column matrix ([`im2col`] and its exact adjoint
//! [`col2im`]) plus one dense matrix product. Keeping a single gather/scatter
//! pair shared by all four paths keeps the gradient code the literal adjoint
//! of the forward code.

/// Spatial output length of a stride-2 same-padded 3×3 convolution.
pub(crate) fn out_len(n: usize) -> usize {
    n.div_ceil(2)
}

/// Zero rows/cols added before the first input row/col. Total padding is
/// `(out−1)·2 + 3 − n`; the leading share is the floor half, so the extra
/// cell of an odd total sits at the bottom/right.
pub(crate) fn pad_begin(n: usize) -> usize {
    ((out_len(n) - 1) * 2 + 3).saturating_sub(n) / 2
}

/// Gathers the 3×3 stride-2 patches of a (ch × h × w) map into a
/// (ch·9) × (oh·ow) column matrix. Row index is (channel, ki, kj); column
/// index is the output position. Out-of-range taps read as zero;
/// `pad_h`/`pad_w` shift the patch origin up/left.
pub(crate) fn im2col(
    input: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), ch * h * w);
    let positions = oh * ow;
    let mut cols = vec![0.0; ch * 9 * positions];
    for c in 0..ch {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &mut cols[(c * 9 + ki * 3 + kj) * positions..][..positions];
                for oi in 0..oh {
                    let si = (oi * 2 + ki) as isize - pad_h as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    let dst = &mut row[oi * ow..][..ow];
                    for oj in 0..ow {
                        let sj = (oj * 2 + kj) as isize - pad_w as isize;
                        if sj >= 0 && (sj as usize) < w {
                            dst[oj] = src[sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Exact adjoint of [`im2col`] with the same geometry: scatters a
/// (ch·9) × (oh·ow) column matrix back onto a (ch × h × w) map, accumulating
/// where patches overlap and dropping taps that fell on padding.
pub(crate) fn col2im(
    cols: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_h: usize,
    pad_w: usize,
) -> Vec<f64> {
    let positions = oh * ow;
    debug_assert_eq!(cols.len(), ch * 9 * positions);
    let mut out = vec![0.0; ch * h * w];
    for c in 0..ch {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &cols[(c * 9 + ki * 3 + kj) * positions..][..positions];
                for oi in 0..oh {
                    let si = (oi * 2 + ki) as isize - pad_h as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..][..w];
                    let src = &row[oi * ow..][..ow];
                    for oj in 0..ow {
                        let sj = (oj * 2 + kj) as isize - pad_w as isize;
                        if sj >= 0 && (sj as usize) < w {
                            dst[sj as usize] += src[oj];
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline(always)]
fn axpy1(row: &mut [f64], coeff: f64, b: &[f64]) {
    for (r, &bj) in row.iter_mut().zip(b) {
        *r += coeff * bj;
    }
}

/// C[m×n] = A[m×k] · B[k×n]. Same four-row advance as [`matmul_atb`], with
/// the coefficients gathered from A's rows.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let mut i = 0;
    let mut rest = c.as_mut_slice();
    while i + 4 <= m {
        let (r0, tail) = rest.split_at_mut(n);
        let (r1, tail) = tail.split_at_mut(n);
        let (r2, tail) = tail.split_at_mut(n);
        let (r3, tail) = tail.split_at_mut(n);
        for kk in 0..k {
            let co = [
                a[i * k + kk],
                a[(i + 1) * k + kk],
                a[(i + 2) * k + kk],
                a[(i + 3) * k + kk],
            ];
            let brow = &b[kk * n..][..n];
            for j in 0..n {
                let bj = brow[j];
                r0[j] += co[0] * bj;
                r1[j] += co[1] * bj;
                r2[j] += co[2] * bj;
                r3[j] += co[3] * bj;
            }
        }
        rest = tail;
        i += 4;
    }
    for (offset, row) in rest.chunks_exact_mut(n).enumerate() {
        let ii = i + offset;
        for kk in 0..k {
            axpy1(row, a[ii * k + kk], &b[kk * n..][..n]);
        }
    }
    c
}

/// Dot product over eight independent accumulator lanes, so the reduction
/// vectorizes without reassociating a single serial chain. The lane split is
/// fixed by `p` alone, keeping results bit-stable across runs.
#[inline(always)]
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = n / LANES;
    for t in 0..chunks {
        let base = t * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = 0.0;
    for t in chunks * LANES..n {
        tail += a[t] * b[t];
    }
    let sum01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let sum23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (sum01 + sum23) + tail
}

/// Four simultaneous [`dot8`]-style products sharing one pass over `a`.
#[inline(always)]
fn dot8x4(a: &[f64], b0: &[f64], b1: &[f64], b2: &[f64], b3: &[f64]) -> [f64; 4] {
    const LANES: usize = 8;
    let p = a.len();
    let chunks = p / LANES;
    let mut acc0 = [0.0f64; LANES];
    let mut acc1 = [0.0f64; LANES];
    let mut acc2 = [0.0f64; LANES];
    let mut acc3 = [0.0f64; LANES];
    for t in 0..chunks {
        let base = t * LANES;
        let av = &a[base..base + LANES];
        let b0v = &b0[base..base + LANES];
        let b1v = &b1[base..base + LANES];
        let b2v = &b2[base..base + LANES];
        let b3v = &b3[base..base + LANES];
        for l in 0..LANES {
            acc0[l] += av[l] * b0v[l];
            acc1[l] += av[l] * b1v[l];
            acc2[l] += av[l] * b2v[l];
            acc3[l] += av[l] * b3v[l];
        }
    }
    let mut tail = [0.0f64; 4];
    for t in chunks * LANES..p {
        tail[0] += a[t] * b0[t];
        tail[1] += a[t] * b1[t];
        tail[2] += a[t] * b2[t];
        tail[3] += a[t] * b3[t];
    }
    let fold = |acc: [f64; LANES], tail: f64| {
        let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
        (s01 + s23) + tail
    };
    [
        fold(acc0, tail[0]),
        fold(acc1, tail[1]),
        fold(acc2, tail[2]),
        fold(acc3, tail[3]),
    ]
}

/// C[m×n] = A[m×p] · B[n×p]ᵀ (rows of A dotted with rows of B).
pub(crate) fn matmul_abt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * p..][..p];
        let crow = &mut c[i * n..][..n];
        let mut j = 0;
        while j + 4 <= n {
            let vals = dot8x4(
                arow,
                &b[j * p..][..p],
                &b[(j + 1) * p..][..p],
                &b[(j + 2) * p..][..p],
                &b[(j + 3) * p..][..p],
            );
            crow[j..j + 4].copy_from_slice(&vals);
            j += 4;
        }
        while j < n {
            crow[j] = dot8(arow, &b[j * p..][..p]);
            j += 1;
        }
    }
    c
}

/// C[m×n] = A[k×m]ᵀ · B[k×n]. Four C rows advance together so each B row is
/// fetched once per quad; the four coefficients sit contiguously in A.
pub(crate) fn matmul_atb(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let mut i = 0;
    let mut rest = c.as_mut_slice();
    while i + 4 <= m {
        let (r0, tail) = rest.split_at_mut(n);
        let (r1, tail) = tail.split_at_mut(n);
        let (r2, tail) = tail.split_at_mut(n);
        let (r3, tail) = tail.split_at_mut(n);
        for kk in 0..k {
            let co = &a[kk * m + i..][..4];
            let brow = &b[kk * n..][..n];
            for j in 0..n {
                let bj = brow[j];
                r0[j] += co[0] * bj;
                r1[j] += co[1] * bj;
                r2[j] += co[2] * bj;
                r3[j] += co[3] * bj;
            }
        }
        rest = tail;
        i += 4;
    }
    for (offset, row) in rest.chunks_exact_mut(n).enumerate() {
        let ii = i + offset;
        for kk in 0..k {
            axpy1(row, a[kk * m + ii], &b[kk * n..][..n]);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn halving_chain_for_standard_day() {
        let sizes: Vec<usize> = std::iter::successors(Some(288), |&n| (n > 9).then(|| out_len(n)))
            .collect();
        assert_eq!(sizes, vec![288, 144, 72, 36, 18, 9]);
    }

    #[test]
    fn padding_splits_leading_share_floor() {
        assert_eq!(pad_begin(2), 0);
        assert_eq!(pad_begin(288), 0);
        assert_eq!(pad_begin(9), 1);
        assert_eq!(pad_begin(1), 1);
    }

    #[test]
    fn gather_of_two_by_two_ones_sums_to_four() {
        let input = vec![1.0; 4];
        let cols = im2col(&input, 1, 2, 2, 1, 1, 0, 0);
        assert_eq!(cols.len(), 9);
        assert_eq!(cols.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn gather_centers_one_by_one_input() {
        let cols = im2col(&[3.0], 1, 1, 1, 1, 1, 1, 1);
        let mut expected = vec![0.0; 9];
        expected[4] = 3.0;
        assert_eq!(cols, expected);
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        // ⟨im2col(x), c⟩ = ⟨x, col2im(c)⟩ for every x and c, which pins the
        // scatter to be the exact transpose of the gather.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ch, h, w) in &[(1usize, 5usize, 5usize), (2, 4, 6), (3, 7, 3), (1, 1, 1)] {
            let (oh, ow) = (out_len(h), out_len(w));
            let (ph, pw) = (pad_begin(h), pad_begin(w));
            let x: Vec<f64> = (0..ch * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..ch * 9 * oh * ow)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let gathered = im2col(&x, ch, h, w, oh, ow, ph, pw);
            let scattered = col2im(&c, ch, h, w, oh, ow, ph, pw);
            let lhs: f64 = gathered.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&scattered).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
                "adjoint identity broke for ({ch},{h},{w}): {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    #[ignore]
    fn bench_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut make = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-1.0f64..1.0)).collect()
        };
        let reps = 2000;

        // Shapes of the 72-input model's second encoder layer (16ch 36×36 → 32ch 18×18).
        let (m, k, n) = (32, 144, 324);
        let a = make(m * k);
        let b = make(k * n);
        let t = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += matmul(&a, &b, m, k, n)[0];
        }
        println!(
            "matmul {m}x{k}x{n}: {:.1} GFLOP/s (sink {sink})",
            (2.0 * (m * k * n * reps) as f64) / t.elapsed().as_secs_f64() / 1e9
        );

        let a2 = make(m * n);
        let b2 = make(k * n);
        let t = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += matmul_abt(&a2, &b2, m, k, n)[0];
        }
        println!(
            "matmul_abt {m}x{k} p={n}: {:.1} GFLOP/s (sink {sink})",
            (2.0 * (m * k * n * reps) as f64) / t.elapsed().as_secs_f64() / 1e9
        );

        let a3 = make(m * k);
        let b3 = make(m * n);
        let t = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += matmul_atb(&a3, &b3, m, k, n)[0];
        }
        println!(
            "matmul_atb k={m} {k}x{n}: {:.1} GFLOP/s (sink {sink})",
            (2.0 * (m * k * n * reps) as f64) / t.elapsed().as_secs_f64() / 1e9
        );

        let x = make(16 * 36 * 36);
        let t = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += im2col(&x, 16, 36, 36, 18, 18, 0, 0)[7];
        }
        println!(
            "im2col 16x36x36: {:.2} ms (sink {sink})",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );

        let cols = make(16 * 9 * 18 * 18);
        let t = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += col2im(&cols, 16, 36, 36, 18, 18, 0, 0)[7];
        }
        println!(
            "col2im 16x36x36: {:.2} ms (sink {sink})",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn products_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (4, 6, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let expected = naive_matmul(&a, &b, m, k, n);
        let close = |x: &[f64], y: &[f64]| {
            x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-12)
        };
        assert!(close(&matmul(&a, &b, m, k, n), &expected));

        // A·Bᵀ with B stored transposed: rebuild bt[n×k] from b.
        let mut bt = vec![0.0; n * k];
        for t in 0..k {
            for j in 0..n {
                bt[j * k + t] = b[t * n + j];
            }
        }
        assert!(close(&matmul_abt(&a, &bt, m, n, k), &expected));

        // Aᵀ·B with A stored transposed: rebuild at[k×m] from a.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for t in 0..k {
                at[t * m + i] = a[i * k + t];
            }
        }
        assert!(close(&matmul_atb(&at, &b, k, m, n), &expected));
    }
}
