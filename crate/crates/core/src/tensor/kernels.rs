//! Raw row-major kernels shared by the forward ops and their adjoints.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored as its
/// transpose in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // the strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
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

/// Unfolds `[cin, h, w]` into `[cin·s·s, h·w]` with zero padding `(s-1)/2`.
pub(crate) fn im2col(x: &[f32], cin: usize, h: usize, w: usize, s: usize) -> Vec<f32> {
    let p = (s / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0f32; cin * s * s * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..s {
            for kx in 0..s {
                let row = &mut col[((c * s + ky) * s + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[xx] = src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds `[cin·s·s, h·w]` back, summing overlaps.
pub(crate) fn col2im(col: &[f32], cin: usize, h: usize, w: usize, s: usize) -> Vec<f32> {
    let p = (s / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0f32; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..s {
            for kx in 0..s {
                let row = &col[((c * s + ky) * s + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[(xx as isize + dx) as usize] += src[xx];
                    }
                }
            }
        }
    }
    x
}
