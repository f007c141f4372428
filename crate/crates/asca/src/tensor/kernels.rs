//! Raw slice kernels behind the tape ops.
//!
//! Summation order is fixed (ascending k / batch-sequential accumulation) so
//! results are bitwise reproducible across runs and thread counts, and so the
//! f64 path matches a naive nested-loop oracle exactly.

use super::Scalar;
use rayon::prelude::*;

const PAR_MATMUL_WORK: usize = 1 << 18;

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(S::zero());
    matmul_acc(a, b, m, k, n, c);
}

/// C[m,n] += A[m,k] * B[k,n]. Row-parallel, k-ascending accumulation per cell.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    let row = |c_row: &mut [S], a_row: &[S]| {
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v = *c_v + a_ip * b_v;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_WORK && m >= 2 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(c_row, a_row);
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T (dot products over the shared k axis).
pub fn matmul_abt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let row = |c_row: &mut [S], a_row: &[S]| {
        for (j, c_v) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *c_v = *c_v + acc;
        }
    };
    if m * k * n >= PAR_MATMUL_WORK && m >= 2 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(c_row, a_row);
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n].
pub fn matmul_atb_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row.iter()) {
                *c_v = *c_v + a_pi * b_v;
            }
        }
    }
}

/// Geometry of one conv2d call, shared by forward and backward.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn ch_per_group(&self) -> usize {
        self.in_ch / self.groups
    }
    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }
}

/// Unfold one image's channel block into a [cg*kh*kw, oh*ow] matrix.
/// Rows run channel-major then kh then kw, matching the weight layout.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let n = oh * ow;
    let mut r = 0;
    for c in 0..g.ch_per_group() {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[r * n..(r + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let row_dst = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        row_dst.fill(S::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in row_dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-add the inverse of im2col.
fn col2im_acc<S: Scalar>(col: &[S], g: &ConvGeom, x: &mut [S]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let n = oh * ow;
    let mut r = 0;
    for c in 0..g.ch_per_group() {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[r * n..(r + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Cross-correlation with zero padding. Output layout [b, out_ch, oh, ow].
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let in_img = g.in_ch * g.in_h * g.in_w;
    let out_img = g.out_ch * g.out_h * g.out_w;
    let mut y = vec![S::zero(); g.batch * out_img];

    let run_image = |xi: &[S], yi: &mut [S]| {
        if g.ch_per_group() == 1 && g.out_per_group() == 1 {
            depthwise_forward_image(xi, w, g, yi);
            return;
        }
        let n = g.out_h * g.out_w;
        let ckk = g.ch_per_group() * g.kh * g.kw;
        let mut col = vec![S::zero(); ckk * n];
        for grp in 0..g.groups {
            let xg = &xi[grp * g.ch_per_group() * g.in_h * g.in_w
                ..(grp + 1) * g.ch_per_group() * g.in_h * g.in_w];
            im2col(xg, g, &mut col);
            let wg = &w[grp * g.out_per_group() * ckk..(grp + 1) * g.out_per_group() * ckk];
            let yg = &mut yi[grp * g.out_per_group() * n..(grp + 1) * g.out_per_group() * n];
            matmul_kernel(wg, &col, g.out_per_group(), ckk, n, yg);
        }
    };

    if g.batch >= 2 {
        y.par_chunks_mut(out_img)
            .zip(x.par_chunks(in_img))
            .for_each(|(yi, xi)| run_image(xi, yi));
    } else {
        run_image(x, &mut y);
    }
    y
}

fn depthwise_forward_image<S: Scalar>(xi: &[S], w: &[S], g: &ConvGeom, yi: &mut [S]) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let xp = &xi[c * plane_in..(c + 1) * plane_in];
        let kp = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let yp = &mut yi[c * plane_out..(c + 1) * plane_out];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = S::zero();
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        acc = acc + xp[iy as usize * g.in_w + ix as usize] * kp[ky * g.kw + kx];
                    }
                }
                yp[oy * g.out_w + ox] = acc;
            }
        }
    }
}

/// Gradients of conv2d: (d_x, d_w) given upstream d_y.
pub fn conv2d_backward<S: Scalar>(x: &[S], w: &[S], d_y: &[S], g: &ConvGeom) -> (Vec<S>, Vec<S>) {
    let in_img = g.in_ch * g.in_h * g.in_w;
    let out_img = g.out_ch * g.out_h * g.out_w;
    let n = g.out_h * g.out_w;
    let ckk = g.ch_per_group() * g.kh * g.kw;

    // d_x: images are independent, parallel over the batch.
    let mut d_x = vec![S::zero(); g.batch * in_img];
    let dx_image = |dxi: &mut [S], (xi_idx, dyi): (usize, &[S])| {
        let _ = xi_idx;
        let mut dcol = vec![S::zero(); ckk * n];
        for grp in 0..g.groups {
            let wg = &w[grp * g.out_per_group() * ckk..(grp + 1) * g.out_per_group() * ckk];
            let dyg = &dyi[grp * g.out_per_group() * n..(grp + 1) * g.out_per_group() * n];
            dcol.fill(S::zero());
            matmul_atb_acc(wg, dyg, ckk, g.out_per_group(), n, &mut dcol);
            let dxg = &mut dxi[grp * g.ch_per_group() * g.in_h * g.in_w
                ..(grp + 1) * g.ch_per_group() * g.in_h * g.in_w];
            col2im_acc(&dcol, g, dxg);
        }
    };
    if g.batch >= 2 {
        d_x.par_chunks_mut(in_img)
            .zip(d_y.par_chunks(out_img).enumerate().collect::<Vec<_>>())
            .for_each(|(dxi, pair)| dx_image(dxi, pair));
    } else {
        dx_image(&mut d_x, (0, d_y));
    }

    // d_w: accumulate over the batch in index order.
    let mut d_w = vec![S::zero(); w.len()];
    let mut col = vec![S::zero(); ckk * n];
    for b in 0..g.batch {
        let xi = &x[b * in_img..(b + 1) * in_img];
        let dyi = &d_y[b * out_img..(b + 1) * out_img];
        for grp in 0..g.groups {
            let xg = &xi[grp * g.ch_per_group() * g.in_h * g.in_w
                ..(grp + 1) * g.ch_per_group() * g.in_h * g.in_w];
            im2col(xg, g, &mut col);
            let dyg = &dyi[grp * g.out_per_group() * n..(grp + 1) * g.out_per_group() * n];
            let dwg =
                &mut d_w[grp * g.out_per_group() * ckk..(grp + 1) * g.out_per_group() * ckk];
            matmul_abt_acc(dyg, &col, g.out_per_group(), n, ckk, dwg);
        }
    }

    (d_x, d_w)
}
