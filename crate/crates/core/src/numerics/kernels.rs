//! Forward and backward kernels shared by the eager ops and the tape.

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

pub fn conv_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
) -> Result<ConvGeom> {
    let (batch, cin, h, wd) = x.dims4()?;
    let (cout, wcin, k, k2) = w
        .dims4()
        .map_err(|_| Error::shape("conv2d", x.shape(), w.shape()))?;
    if wcin != cin || k != k2 {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    if k % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d", w.shape(), b.shape()));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::invalid("conv2d", "kernel larger than padded input"));
    }
    Ok(ConvGeom {
        batch,
        cin,
        h,
        w: wd,
        cout,
        k,
        pad,
        oh: h + 2 * pad - k + 1,
        ow: wd + 2 * pad - k + 1,
    })
}

/// Range of output columns `ox` whose input column `ox + kj - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow);
    (lo, hi.max(lo))
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let ohw = g.out_hw();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if hi > lo {
                        let start = lo + kj - g.pad;
                        seg[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let ohw = g.out_hw();
    for ci in 0..g.cin {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kj);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let start = lo + kj - g.pad;
                    let dst = &mut plane[iy as usize * g.w + start..iy as usize * g.w + start + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * g.ow + lo..oy * g.ow + hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, b, pad)?;
    let (patch, ohw) = (g.patch(), g.out_hw());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * ohw;
    let mut out = vec![T::zero(); g.batch * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * ohw]
    };
    for bi in 0..g.batch {
        let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[bi * out_per..(bi + 1) * out_per];
        for (co, chunk) in ob.chunks_mut(ohw).enumerate() {
            chunk.fill(b.data()[co]);
        }
        T::gemm(
            g.cout,
            patch,
            ohw,
            T::one(),
            w.data(),
            (patch as isize, 1),
            src,
            (ohw as isize, 1),
            T::one(),
            ob,
            (ohw as isize, 1),
        );
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.oh, g.ow], out))
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    pad: usize,
    gout: &Tensor<T>,
    need_x: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x, w, b, pad)?;
    if gout.shape() != [g.batch, g.cout, g.oh, g.ow] {
        return Err(Error::shape("conv2d_backward", gout.shape(), &[g.batch, g.cout, g.oh, g.ow]));
    }
    let (patch, ohw) = (g.patch(), g.out_hw());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * ohw;
    let mut gw = vec![T::zero(); g.cout * patch];
    let mut gb = vec![T::zero(); g.cout];
    let mut gx = if need_x {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * ohw }];
    let mut gcols = vec![T::zero(); if need_x { patch * ohw } else { 0 }];
    for bi in 0..g.batch {
        let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
        let gob = &gout.data()[bi * out_per..(bi + 1) * out_per];
        for (co, chunk) in gob.chunks(ohw).enumerate() {
            gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            ohw,
            patch,
            T::one(),
            gob,
            (ohw as isize, 1),
            src,
            (1, ohw as isize),
            T::one(),
            &mut gw,
            (patch as isize, 1),
        );
        if need_x {
            T::gemm(
                patch,
                g.cout,
                ohw,
                T::one(),
                w.data(),
                (1, patch as isize),
                gob,
                (ohw as isize, 1),
                T::zero(),
                &mut gcols,
                (ohw as isize, 1),
            );
            let gxb = &mut gx[bi * in_per..(bi + 1) * in_per];
            if g.is_pointwise() {
                for (d, &s) in gxb.iter_mut().zip(&gcols) {
                    *d = *d + s;
                }
            } else {
                col2im_add(&g, &gcols, gxb);
            }
        }
    }
    Ok(ConvGrads {
        x: need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        w: Tensor::from_parts(w.shape().to_vec(), gw),
        b: Tensor::from_parts(vec![g.cout], gb),
    })
}

pub fn avg_pool2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "avg_pool2",
            format!("spatial size {h}x{w} must be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in xd.chunks(h * w) {
        for i in 0..oh {
            let r0 = &plane[2 * i * w..(2 * i + 1) * w];
            let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                out.push((r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

pub fn avg_pool2_backward<T: Real>(x_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut gx = vec![T::zero(); x_shape.iter().product()];
    for (plane, gplane) in gx.chunks_mut(h * w).zip(gout.data().chunks(oh * ow)) {
        for i in 0..oh {
            for j in 0..ow {
                let v = gplane[i * ow + j] * quarter;
                plane[2 * i * w + 2 * j] = v;
                plane[2 * i * w + 2 * j + 1] = v;
                plane[(2 * i + 1) * w + 2 * j] = v;
                plane[(2 * i + 1) * w + 2 * j + 1] = v;
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centres (`align_corners = false`), edges clamped.
    Bilinear,
}

/// Per output index: `(i0, i1, w0, w1)` so that `out = w0 * in[i0] + w1 * in[i1]`.
fn upsample_taps(n: usize, mode: UpsampleMode) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| match mode {
            UpsampleMode::Nearest => (o / 2, o / 2, 1.0, 0.0),
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                let l1 = src - i0 as f64;
                (i0, i1, 1.0 - l1, l1)
            }
        })
        .collect()
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>, mode: UpsampleMode) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(h, mode);
    let tx: Vec<_> = upsample_taps(w, mode)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64_lossy(wa), T::from_f64_lossy(wb)))
        .collect();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut row = vec![T::zero(); w];
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (j, r) in row.iter_mut().enumerate() {
                *r = plane[y0 * w + j] * wy0 + plane[y1 * w + j] * wy1;
            }
            for &(x0, x1, wx0, wx1) in &tx {
                out.push(row[x0] * wx0 + row[x1] * wx1);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

pub fn upsample2_backward<T: Real>(
    x_shape: &[usize],
    gout: &Tensor<T>,
    mode: UpsampleMode,
) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let ow = 2 * w;
    let ty = upsample_taps(h, mode);
    let tx: Vec<_> = upsample_taps(w, mode)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::from_f64_lossy(wa), T::from_f64_lossy(wb)))
        .collect();
    let mut gx = vec![T::zero(); x_shape.iter().product()];
    let mut row = vec![T::zero(); w];
    for (plane, gplane) in gx.chunks_mut(h * w).zip(gout.data().chunks(4 * h * w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            row.fill(T::zero());
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            for (&g, &(x0, x1, wx0, wx1)) in grow.iter().zip(&tx) {
                row[x0] = row[x0] + g * wx0;
                row[x1] = row[x1] + g * wx1;
            }
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (j, &r) in row.iter().enumerate() {
                plane[y0 * w + j] = plane[y0 * w + j] + r * wy0;
                plane[y1 * w + j] = plane[y1 * w + j] + r * wy1;
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), gx)
}

pub fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
    };
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `a @ b` given the output gradient; either side may be skipped.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gout: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); m * k];
        T::gemm(
            m,
            n,
            k,
            T::one(),
            gout.data(),
            (n as isize, 1),
            b.data(),
            (1, n as isize),
            T::zero(),
            &mut ga,
            (k as isize, 1),
        );
        Tensor::from_parts(vec![m, k], ga)
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); k * n];
        T::gemm(
            k,
            m,
            n,
            T::one(),
            a.data(),
            (1, k as isize),
            gout.data(),
            (n as isize, 1),
            T::zero(),
            &mut gb,
            (n as isize, 1),
        );
        Tensor::from_parts(vec![k, n], gb)
    });
    (ga, gb)
}

/// Adds `bias[n]` along the last axis.
pub fn add_bias_forward<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().unwrap_or(&0);
    if bias.shape() != [n] {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

pub fn bias_grad<T: Real>(gout: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut gb = vec![T::zero(); n];
    for row in gout.data().chunks(n) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    Tensor::from_parts(vec![n], gb)
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub fn silu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|z| z * sigmoid(z))
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&z, &g)| {
            let s = sigmoid(z);
            g * s * (T::one() + z * (T::one() - s))
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct GroupNormSaved<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn group_norm_check<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("group_norm", x.shape(), gamma.shape()));
    }
    Ok((b, c, h * w))
}

pub fn group_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, GroupNormSaved<T>)> {
    let (b, c, hw) = group_norm_check(x, gamma, beta, groups)?;
    let cg = c / groups;
    let span = cg * hw;
    let eps = T::from_f64_lossy(GROUP_NORM_EPS);
    let mut out = vec![T::zero(); x.numel()];
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    for (gi, (src, dst)) in x.data().chunks(span).zip(out.chunks_mut(span)).enumerate() {
        let n = T::from_usize(span).unwrap();
        let mu = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        let g0 = (gi % groups) * cg;
        for (ci, (s, d)) in src.chunks(hw).zip(dst.chunks_mut(hw)).enumerate() {
            let (ga, be) = (gamma.data()[g0 + ci], beta.data()[g0 + ci]);
            for (&v, o) in s.iter().zip(d.iter_mut()) {
                *o = (v - mu) * r * ga + be;
            }
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        GroupNormSaved { mean, rstd },
    ))
}

pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    saved: &GroupNormSaved<T>,
    gout: &Tensor<T>,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let c = x.shape()[1];
    let hw = x.shape()[2] * x.shape()[3];
    let cg = c / groups;
    let span = cg * hw;
    let n = T::from_usize(span).unwrap();
    let mut gx = vec![T::zero(); if need_x { x.numel() } else { 0 }];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for (gi, (src, gsrc)) in x.data().chunks(span).zip(gout.data().chunks(span)).enumerate() {
        let (mu, r) = (saved.mean[gi], saved.rstd[gi]);
        let g0 = (gi % groups) * cg;
        // mean of dxhat and of dxhat * xhat over the group
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for (ci, (s, gs)) in src.chunks(hw).zip(gsrc.chunks(hw)).enumerate() {
            let ga = gamma.data()[g0 + ci];
            let mut gg = T::zero();
            let mut gbt = T::zero();
            for (&v, &g) in s.iter().zip(gs) {
                let xhat = (v - mu) * r;
                gg = gg + g * xhat;
                gbt = gbt + g;
                let d = g * ga;
                sum_d = sum_d + d;
                sum_dx = sum_dx + d * xhat;
            }
            ggamma[g0 + ci] = ggamma[g0 + ci] + gg;
            gbeta[g0 + ci] = gbeta[g0 + ci] + gbt;
        }
        if need_x {
            let (md, mdx) = (sum_d / n, sum_dx / n);
            let dst = &mut gx[gi * span..(gi + 1) * span];
            for (ci, ((s, gs), d)) in src
                .chunks(hw)
                .zip(gsrc.chunks(hw))
                .zip(dst.chunks_mut(hw))
                .enumerate()
            {
                let ga = gamma.data()[g0 + ci];
                for ((&v, &g), o) in s.iter().zip(gs).zip(d.iter_mut()) {
                    let xhat = (v - mu) * r;
                    *o = r * (g * ga - md - xhat * mdx);
                }
            }
        }
    }
    (
        need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}
