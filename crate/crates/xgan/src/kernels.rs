//! Dense compute kernels: matrix products, im2col/col2im, and the batched
//! conv / transposed-conv / linear primitives built from them.
//!
//! Every kernel parallelizes over independent output rows or samples while
//! keeping each reduction a fixed sequential loop, so results are bitwise
//! identical across thread counts and identical to the sequential fallback
//! (`seq` module / building without the `parallel` feature).

use crate::scalar::Scalar;

const MIN_TASK_ELEMS: usize = 4096;

#[inline]
fn run_rows<S: Send>(
    parallel: bool,
    out: &mut [S],
    row_len: usize,
    f: impl Fn(usize, &mut [S]) + Send + Sync,
) {
    if out.is_empty() || row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            let min_rows = (MIN_TASK_ELEMS / row_len).max(1);
            out.par_chunks_mut(row_len)
                .with_min_len(min_rows)
                .enumerate()
                .for_each(|(i, r)| f(i, r));
            return;
        }
    }
    let _ = parallel;
    for (i, r) in out.chunks_mut(row_len).enumerate() {
        f(i, r);
    }
}

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

// ---------------------------------------------------------------------------
// Matrix products. All matrices are row-major flat slices.
// ---------------------------------------------------------------------------

/// C[M,N] = A[M,K] * B[K,N]
fn mm_ab_inner<S: Scalar>(parallel: bool, a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    run_rows(parallel, c, n, |i, row| {
        row.fill(S::ZERO);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            axpy(aik, &b[kk * n..(kk + 1) * n], row);
        }
    });
}

/// C[M,N] = A[M,K] * B[N,K]^T
fn mm_abt_inner<S: Scalar>(parallel: bool, a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    run_rows(parallel, c, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

/// C[M,N] = A[K,M]^T * B[K,N]
fn mm_atb_inner<S: Scalar>(parallel: bool, a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    run_rows(parallel, c, n, |i, row| {
        row.fill(S::ZERO);
        for kk in 0..k {
            axpy(a[kk * m + i], &b[kk * n..(kk + 1) * n], row);
        }
    });
}

macro_rules! dispatch {
    ($(#[$doc:meta])* $name:ident($($arg:ident: $ty:ty),*) => $inner:ident) => {
        $(#[$doc])*
        pub fn $name<S: Scalar>($($arg: $ty),*) {
            $inner(cfg!(feature = "parallel"), $($arg),*)
        }
    };
}

dispatch!(
    /// C[M,N] = A[M,K] * B[K,N]
    mm_ab(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) => mm_ab_inner);
dispatch!(
    /// C[M,N] = A[M,K] * B[N,K]^T
    mm_abt(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) => mm_abt_inner);
dispatch!(
    /// C[M,N] = A[K,M]^T * B[K,N]
    mm_atb(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) => mm_atb_inner);

/// Forced-sequential variants of every kernel, for the fallback path and for
/// benchmarking the parallel speedup.
pub mod seq {
    use super::*;

    pub fn mm_ab<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        mm_ab_inner(false, a, b, c, m, k, n)
    }
    pub fn mm_abt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        mm_abt_inner(false, a, b, c, m, k, n)
    }
    pub fn mm_atb<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        mm_atb_inner(false, a, b, c, m, k, n)
    }
    pub fn conv_forward_batch<S: Scalar>(
        x: &[S],
        w: &[S],
        b: &[S],
        g: &ConvGeom,
        n: usize,
        y: &mut [S],
        xcol: &mut [S],
    ) {
        conv_forward_inner(false, x, w, b, g, n, y, xcol)
    }
    pub fn deconv_forward_batch<S: Scalar>(x: &[S], w: &[S], b: &[S], g: &ConvGeom, n: usize, y: &mut [S]) {
        deconv_forward_inner(false, x, w, b, g, n, y)
    }
}

// ---------------------------------------------------------------------------
// Convolution geometry and patch gathering.
// ---------------------------------------------------------------------------

/// Geometry of a strided convolution between a "big" C_in x H x W grid and a
/// "small" C_out x H_out x W_out grid. A transposed convolution uses the same
/// geometry with the roles of input and output swapped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize) -> ConvGeom {
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            in_c,
            out_c,
            k,
            stride,
            pad,
            h_in: h,
            w_in: w,
            h_out,
            w_out,
        }
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.h_in * self.w_in
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.h_out * self.w_out
    }
}

/// Gathers k x k patches of `x` ([C,H,W]) into `col` ([P, C*k*k]), rows in
/// (h_out, w_out) order. Out-of-bounds taps read as zero.
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(col.len(), g.positions() * g.patch_len());
    let (h, w, k) = (g.h_in, g.w_in, g.k);
    let mut row_start = 0;
    for oh in 0..g.h_out {
        for ow in 0..g.w_out {
            let ih0 = (oh * g.stride) as isize - g.pad as isize;
            let iw0 = (ow * g.stride) as isize - g.pad as isize;
            let row = &mut col[row_start..row_start + g.patch_len()];
            let mut idx = 0;
            for c in 0..g.in_c {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for ki in 0..k {
                    let ih = ih0 + ki as isize;
                    for kj in 0..k {
                        let iw = iw0 + kj as isize;
                        row[idx] = if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                            plane[ih as usize * w + iw as usize]
                        } else {
                            S::ZERO
                        };
                        idx += 1;
                    }
                }
            }
            row_start += g.patch_len();
        }
    }
}

/// Adjoint of [im2col]: scatter-adds `col` rows back into `x`.
pub fn col2im_add<S: Scalar>(col: &[S], g: &ConvGeom, x: &mut [S]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(col.len(), g.positions() * g.patch_len());
    let (h, w, k) = (g.h_in, g.w_in, g.k);
    let mut row_start = 0;
    for oh in 0..g.h_out {
        for ow in 0..g.w_out {
            let ih0 = (oh * g.stride) as isize - g.pad as isize;
            let iw0 = (ow * g.stride) as isize - g.pad as isize;
            let row = &col[row_start..row_start + g.patch_len()];
            let mut idx = 0;
            for c in 0..g.in_c {
                let plane_off = c * h * w;
                for ki in 0..k {
                    let ih = ih0 + ki as isize;
                    for kj in 0..k {
                        let iw = iw0 + kj as isize;
                        if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                            x[plane_off + ih as usize * w + iw as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
            row_start += g.patch_len();
        }
    }
}

// ---------------------------------------------------------------------------
// Batched layer primitives. Activation functions are applied by the caller.
// ---------------------------------------------------------------------------

/// y[n, Co, P] = W[Co, CK] * patches(x[n]) + b. Caches the patch matrices in
/// `xcol` ([N, P, CK]) for the backward pass.
fn conv_forward_inner<S: Scalar>(
    parallel: bool,
    x: &[S],
    w: &[S],
    b: &[S],
    g: &ConvGeom,
    n: usize,
    y: &mut [S],
    xcol: &mut [S],
) {
    let (p, ck) = (g.positions(), g.patch_len());
    debug_assert_eq!(x.len(), n * g.in_len());
    debug_assert_eq!(w.len(), g.out_c * ck);
    debug_assert_eq!(y.len(), n * g.out_c * p);
    debug_assert_eq!(xcol.len(), n * p * ck);

    // Phase 1: patch gather, sample-parallel into disjoint xcol slices.
    run_rows(parallel, xcol, p * ck, |i, col_i| {
        im2col(&x[i * g.in_len()..(i + 1) * g.in_len()], g, col_i);
    });
    // Phase 2: per-sample product, sample-parallel into disjoint y slices.
    let xcol_ref: &[S] = xcol;
    run_rows(parallel, y, g.out_c * p, |i, y_i| {
        let col_i = &xcol_ref[i * p * ck..(i + 1) * p * ck];
        mm_abt_inner(false, w, col_i, y_i, g.out_c, ck, p);
        for (co, y_plane) in y_i.chunks_mut(p).enumerate() {
            let bias = b[co];
            for v in y_plane {
                *v += bias;
            }
        }
    });
}

dispatch!(
    /// Batched conv forward; fills `y` ([N,Co,Ho,Wo]) and the `xcol` cache.
    conv_forward_batch(x: &[S], w: &[S], b: &[S], g: &ConvGeom, n: usize, y: &mut [S], xcol: &mut [S])
        => conv_forward_inner);

/// Gradients of a batched conv. `dz` is the gradient at the pre-activation
/// output ([N,Co,P]); `xcol` is the forward cache. Accumulates into
/// `dw`/`db`, and writes `dx` ([N,Ci,H,W]) when requested.
pub fn conv_backward_batch<S: Scalar>(
    xcol: &[S],
    w: &[S],
    dz: &[S],
    g: &ConvGeom,
    n: usize,
    dw: &mut [S],
    db: &mut [S],
    dx: Option<&mut [S]>,
) {
    let parallel = cfg!(feature = "parallel");
    let (p, ck) = (g.positions(), g.patch_len());
    debug_assert_eq!(dz.len(), n * g.out_c * p);
    debug_assert_eq!(dw.len(), g.out_c * ck);
    debug_assert_eq!(db.len(), g.out_c);

    // dw[co,:] += sum over samples and positions of dz[n,co,p] * xcol[n,p,:],
    // in fixed (n, p) order per row.
    run_rows(parallel, dw, ck, |co, dw_row| {
        for i in 0..n {
            let dz_plane = &dz[(i * g.out_c + co) * p..(i * g.out_c + co + 1) * p];
            let col_i = &xcol[i * p * ck..(i + 1) * p * ck];
            for (pp, &coeff) in dz_plane.iter().enumerate() {
                axpy(coeff, &col_i[pp * ck..(pp + 1) * ck], dw_row);
            }
        }
    });
    run_rows(parallel, db, 1, |co, db_co| {
        let mut acc = S::ZERO;
        for i in 0..n {
            let dz_plane = &dz[(i * g.out_c + co) * p..(i * g.out_c + co + 1) * p];
            for &v in dz_plane {
                acc += v;
            }
        }
        db_co[0] += acc;
    });
    if let Some(dx) = dx {
        debug_assert_eq!(dx.len(), n * g.in_len());
        run_rows(parallel, dx, g.in_len(), |i, dx_i| {
            let mut dcol = vec![S::ZERO; p * ck];
            let dz_i = &dz[i * g.out_c * p..(i + 1) * g.out_c * p];
            // dcol[P,CK] = dz_i[Co,P]^T * W[Co,CK]
            mm_atb_inner(false, dz_i, w, &mut dcol, p, g.out_c, ck);
            dx_i.fill(S::ZERO);
            col2im_add(&dcol, g, dx_i);
        });
    }
}

/// Transposed-conv forward: upsamples x ([N,Ci,Hs,Ws]) to y ([N,Co,Hb,Wb])
/// using the adjoint of the conv described by `g`, whose "input" side is the
/// big output grid (in_c = Co, h_in = Hb) and whose output side is the small
/// input grid (out_c = Ci, h_out = Hs). Weights are [Ci, Co*k*k].
fn deconv_forward_inner<S: Scalar>(parallel: bool, x: &[S], w: &[S], b: &[S], g: &ConvGeom, n: usize, y: &mut [S]) {
    let (p, ck) = (g.positions(), g.patch_len()); // p = small positions, ck = Co*k*k
    let small_c = g.out_c; // = Ci of the transposed layer
    debug_assert_eq!(x.len(), n * small_c * p);
    debug_assert_eq!(w.len(), small_c * ck);
    debug_assert_eq!(y.len(), n * g.in_len());
    run_rows(parallel, y, g.in_len(), |i, y_i| {
        let x_i = &x[i * small_c * p..(i + 1) * small_c * p];
        // col[P, CK] = x_i[Ci, P]^T * W[Ci, CK]
        let mut col = vec![S::ZERO; p * ck];
        mm_atb_inner(false, x_i, w, &mut col, p, small_c, ck);
        y_i.fill(S::ZERO);
        col2im_add(&col, g, y_i);
        for (c, plane) in y_i.chunks_mut(g.h_in * g.w_in).enumerate() {
            let bias = b[c];
            for v in plane {
                *v += bias;
            }
        }
    });
}

dispatch!(
    /// Batched transposed-conv forward (see [ConvGeom] role note).
    deconv_forward_batch(x: &[S], w: &[S], b: &[S], g: &ConvGeom, n: usize, y: &mut [S])
        => deconv_forward_inner);

/// Gradients of the transposed conv. `dz` is the gradient at the big output
/// ([N,Co,Hb,Wb]), `x` the small forward input.
pub fn deconv_backward_batch<S: Scalar>(
    x: &[S],
    w: &[S],
    dz: &[S],
    g: &ConvGeom,
    n: usize,
    dw: &mut [S],
    db: &mut [S],
    dx: Option<&mut [S]>,
    dzcol_scratch: &mut [S],
) {
    let parallel = cfg!(feature = "parallel");
    let (p, ck) = (g.positions(), g.patch_len());
    let small_c = g.out_c;
    debug_assert_eq!(dz.len(), n * g.in_len());
    debug_assert_eq!(dzcol_scratch.len(), n * p * ck);
    debug_assert_eq!(dw.len(), small_c * ck);
    debug_assert_eq!(db.len(), g.in_c);

    run_rows(parallel, dzcol_scratch, p * ck, |i, col_i| {
        im2col(&dz[i * g.in_len()..(i + 1) * g.in_len()], g, col_i);
    });
    let dzcol: &[S] = dzcol_scratch;

    // dw[ci,:] += sum over (n, p) of x[n,ci,p] * dzcol[n,p,:]
    run_rows(parallel, dw, ck, |ci, dw_row| {
        for i in 0..n {
            let x_plane = &x[(i * small_c + ci) * p..(i * small_c + ci + 1) * p];
            let col_i = &dzcol[i * p * ck..(i + 1) * p * ck];
            for (pp, &coeff) in x_plane.iter().enumerate() {
                axpy(coeff, &col_i[pp * ck..(pp + 1) * ck], dw_row);
            }
        }
    });
    run_rows(parallel, db, 1, |co, db_co| {
        let plane = g.h_in * g.w_in;
        let mut acc = S::ZERO;
        for i in 0..n {
            let z_plane = &dz[(i * g.in_c + co) * plane..(i * g.in_c + co + 1) * plane];
            for &v in z_plane {
                acc += v;
            }
        }
        db_co[0] += acc;
    });
    if let Some(dx) = dx {
        debug_assert_eq!(dx.len(), n * small_c * p);
        run_rows(parallel, dx, small_c * p, |i, dx_i| {
            let col_i = &dzcol[i * p * ck..(i + 1) * p * ck];
            // dx_i[Ci, P] = W[Ci, CK] * col_i[P, CK]^T
            mm_abt_inner(false, w, col_i, dx_i, small_c, ck, p);
        });
    }
}

/// y[N,Out] = x[N,In] * W[Out,In]^T + b
pub fn linear_forward_batch<S: Scalar>(x: &[S], w: &[S], b: &[S], n: usize, d_in: usize, d_out: usize, y: &mut [S]) {
    let parallel = cfg!(feature = "parallel");
    debug_assert_eq!(x.len(), n * d_in);
    debug_assert_eq!(w.len(), d_out * d_in);
    debug_assert_eq!(y.len(), n * d_out);
    run_rows(parallel, y, d_out, |i, row| {
        let x_i = &x[i * d_in..(i + 1) * d_in];
        for (o, yo) in row.iter_mut().enumerate() {
            *yo = b[o] + dot(&w[o * d_in..(o + 1) * d_in], x_i);
        }
    });
}

/// Gradients of the batched linear map; accumulates dw/db, writes dx on request.
pub fn linear_backward_batch<S: Scalar>(
    x: &[S],
    w: &[S],
    dz: &[S],
    n: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [S],
    db: &mut [S],
    dx: Option<&mut [S]>,
) {
    let parallel = cfg!(feature = "parallel");
    run_rows(parallel, dw, d_in, |o, dw_row| {
        for i in 0..n {
            axpy(dz[i * d_out + o], &x[i * d_in..(i + 1) * d_in], dw_row);
        }
    });
    run_rows(parallel, db, 1, |o, db_o| {
        let mut acc = S::ZERO;
        for i in 0..n {
            acc += dz[i * d_out + o];
        }
        db_o[0] += acc;
    });
    if let Some(dx) = dx {
        run_rows(parallel, dx, d_in, |i, dx_i| {
            dx_i.fill(S::ZERO);
            let dz_i = &dz[i * d_out..(i + 1) * d_out];
            for (o, &coeff) in dz_i.iter().enumerate() {
                axpy(coeff, &w[o * d_in..(o + 1) * d_in], dx_i);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.normal()).collect()
    }

    fn mm_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = Rng::seed_from(1);
        let (m, k, n) = (7, 5, 9);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let expect = mm_naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        mm_ab(&a, &b, &mut c, m, k, n);
        assert_eq!(c, expect);

        // A * B^T where B is stored transposed.
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_abt(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c2.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // A^T * B where A is stored transposed.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut c3 = vec![0.0; m * n];
        mm_atb(&at, &b, &mut c3, m, k, n);
        assert_eq!(c3, expect);
    }

    #[test]
    fn parallel_and_sequential_are_bitwise_identical() {
        let mut rng = Rng::seed_from(2);
        let (m, k, n) = (33, 57, 41);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut c_par = vec![0.0; m * n];
        let mut c_seq = vec![0.0; m * n];
        mm_ab(&a, &b, &mut c_par, m, k, n);
        seq::mm_ab(&a, &b, &mut c_seq, m, k, n);
        assert_eq!(c_par, c_seq);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let g = ConvGeom::conv(3, 5, 4, 2, 1, 8, 8);
        let mut rng = Rng::seed_from(3);
        let x = rand_vec(&mut rng, g.in_len());
        let c = rand_vec(&mut rng, g.positions() * g.patch_len());
        let mut col = vec![0.0; c.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_halves_spatial_dims_with_k4_s2_p1() {
        let g = ConvGeom::conv(3, 8, 4, 2, 1, 64, 64);
        assert_eq!((g.h_out, g.w_out), (32, 32));
    }

    #[test]
    fn conv_forward_matches_direct_convolution() {
        let g = ConvGeom::conv(2, 3, 4, 2, 1, 6, 6);
        let n = 2;
        let mut rng = Rng::seed_from(4);
        let x = rand_vec(&mut rng, n * g.in_len());
        let w = rand_vec(&mut rng, g.out_c * g.patch_len());
        let b = rand_vec(&mut rng, g.out_c);
        let mut y = vec![0.0; n * g.out_len()];
        let mut xcol = vec![0.0; n * g.positions() * g.patch_len()];
        conv_forward_batch(&x, &w, &b, &g, n, &mut y, &mut xcol);

        // direct quadruple loop
        for i in 0..n {
            for co in 0..g.out_c {
                for oh in 0..g.h_out {
                    for ow in 0..g.w_out {
                        let mut acc = b[co];
                        for ci in 0..g.in_c {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                    if ih >= 0 && (ih as usize) < g.h_in && iw >= 0 && (iw as usize) < g.w_in {
                                        let xv = x[((i * g.in_c + ci) * g.h_in + ih as usize) * g.w_in + iw as usize];
                                        let wv = w[co * g.patch_len() + (ci * g.k + ki) * g.k + kj];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        let got = y[((i * g.out_c + co) * g.h_out + oh) * g.w_out + ow];
                        assert!((got - acc).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> when deconv uses the same weights
        // and zero bias: the transposed conv is exactly the adjoint map.
        let g = ConvGeom::conv(3, 2, 4, 2, 1, 8, 8); // big side: 3ch 8x8, small side: 2ch 4x4
        let n = 1;
        let mut rng = Rng::seed_from(5);
        let x_big = rand_vec(&mut rng, g.in_len());
        let w = rand_vec(&mut rng, g.out_c * g.patch_len());
        let y_small = rand_vec(&mut rng, g.out_len());

        let zeros_small = vec![0.0; g.out_c];
        let zeros_big = vec![0.0; g.in_c];

        let mut conv_out = vec![0.0; g.out_len()];
        let mut xcol = vec![0.0; g.positions() * g.patch_len()];
        conv_forward_batch(&x_big, &w, &zeros_small, &g, n, &mut conv_out, &mut xcol);
        let lhs: f64 = conv_out.iter().zip(y_small.iter()).map(|(a, b)| a * b).sum();

        // deconv with weights [Ci_small, Co_big*k*k] = same layout as w here
        let mut deconv_out = vec![0.0; g.in_len()];
        deconv_forward_batch(&y_small, &w, &zeros_big, &g, n, &mut deconv_out);
        let rhs: f64 = x_big.iter().zip(deconv_out.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn linear_forward_matches_naive() {
        let (n, d_in, d_out) = (3, 5, 4);
        let mut rng = Rng::seed_from(6);
        let x = rand_vec(&mut rng, n * d_in);
        let w = rand_vec(&mut rng, d_out * d_in);
        let b = rand_vec(&mut rng, d_out);
        let mut y = vec![0.0; n * d_out];
        linear_forward_batch(&x, &w, &b, n, d_in, d_out, &mut y);
        for i in 0..n {
            for o in 0..d_out {
                let mut acc = b[o];
                for j in 0..d_in {
                    acc += x[i * d_in + j] * w[o * d_in + j];
                }
                assert!((y[i * d_out + o] - acc).abs() < 1e-12);
            }
        }
    }
}
