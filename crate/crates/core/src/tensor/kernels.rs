//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure: it reads its inputs and returns fresh
//! buffers. The graph back ends decide what to keep for the backward pass.

use matrixmultiply::dgemm;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: Padding::Same }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Calls `f` once for every multi-index in the row-major box `dims`.
/// An empty `dims` yields a single empty index.
pub(crate) fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0usize; dims.len()];
    loop {
        f(&idx);
        let mut axis = dims.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < dims[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

fn row_major_strides(dims: &[usize], inner: usize) -> Vec<usize> {
    let mut strides = vec![0; dims.len()];
    let mut acc = inner;
    for a in (0..dims.len()).rev() {
        strides[a] = acc;
        acc *= dims[a];
    }
    strides
}

/// `c[m×n] += a[m×k] · b[k×n]` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // Bounds for the strided views; dgemm itself does not check.
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone)]
pub(crate) struct ConvGeometry {
    in_sp: Vec<usize>,
    k_sp: Vec<usize>,
    out_sp: Vec<usize>,
    pad: Vec<usize>,
    stride: usize,
    cin: usize,
    cout: usize,
}

/// One strided row-block product of a convolution: `n` output cells along
/// the last spatial axis against one kernel tap.
struct ConvLine {
    x_off: usize,
    x_rs: usize,
    out_off: usize,
    k_off: usize,
    n: usize,
}

impl ConvGeometry {
    pub(crate) fn new(x: &[usize], k: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::shape("conv", format!("input needs a spatial axis and channels, got {x:?}")));
        }
        let rank = x.len() - 1;
        if k.len() != rank + 2 {
            return Err(Error::shape(
                "conv",
                format!("kernel {k:?} has spatial rank {} but input {x:?} has {rank}", k.len().saturating_sub(2)),
            ));
        }
        if k[rank] != x[rank] {
            return Err(Error::shape(
                "conv",
                format!("kernel expects {} input channels, input has {}", k[rank], x[rank]),
            ));
        }
        if spec.stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        let s = spec.stride;
        let mut out_sp = Vec::with_capacity(rank);
        let mut pad = Vec::with_capacity(rank);
        for a in 0..rank {
            let (n, kk) = (x[a], k[a]);
            match spec.padding {
                Padding::Same => {
                    let o = n.div_ceil(s);
                    let total = ((o - 1) * s + kk).saturating_sub(n);
                    out_sp.push(o);
                    pad.push(total / 2);
                }
                Padding::Valid => {
                    if n < kk {
                        return Err(Error::shape(
                            "conv",
                            format!("valid padding: axis {a} extent {n} smaller than kernel {kk}"),
                        ));
                    }
                    out_sp.push((n - kk) / s + 1);
                    pad.push(0);
                }
            }
        }
        Ok(ConvGeometry {
            in_sp: x[..rank].to_vec(),
            k_sp: k[..rank].to_vec(),
            out_sp,
            pad,
            stride: s,
            cin: x[rank],
            cout: k[rank + 1],
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        let mut s = self.out_sp.clone();
        s.push(self.cout);
        s
    }

    fn for_each_line(&self, mut f: impl FnMut(ConvLine)) {
        let rank = self.in_sp.len();
        let lead = rank - 1;
        let s = self.stride;
        let in_strides = row_major_strides(&self.in_sp, self.cin);
        let out_strides = row_major_strides(&self.out_sp, self.cout);
        let k_strides = row_major_strides(&self.k_sp, self.cin * self.cout);
        let last_in = self.in_sp[lead] as i64;
        let last_out = self.out_sp[lead] as i64;
        let last_pad = self.pad[lead] as i64;

        for_each_index(&self.out_sp[..lead], |o_lead| {
            for_each_index(&self.k_sp[..lead], |q_lead| {
                let mut x_base = 0usize;
                let mut out_base = 0usize;
                let mut k_base = 0usize;
                for a in 0..lead {
                    let i = (o_lead[a] * s + q_lead[a]) as i64 - self.pad[a] as i64;
                    if i < 0 || i >= self.in_sp[a] as i64 {
                        return;
                    }
                    x_base += i as usize * in_strides[a];
                    out_base += o_lead[a] * out_strides[a];
                    k_base += q_lead[a] * k_strides[a];
                }
                for q in 0..self.k_sp[lead] as i64 {
                    // Output cells o with 0 <= o*s + q - pad < last_in.
                    let lo_num = last_pad - q;
                    let o_lo = if lo_num <= 0 { 0 } else { (lo_num + s as i64 - 1) / s as i64 };
                    let hi_num = last_in - 1 + last_pad - q;
                    if hi_num < 0 {
                        continue;
                    }
                    let o_hi = (hi_num / s as i64).min(last_out - 1);
                    if o_hi < o_lo {
                        continue;
                    }
                    let i0 = (o_lo * s as i64 + q - last_pad) as usize;
                    f(ConvLine {
                        x_off: x_base + i0 * self.cin,
                        x_rs: s * self.cin,
                        out_off: out_base + o_lo as usize * self.cout,
                        k_off: k_base + q as usize * self.cin * self.cout,
                        n: (o_hi - o_lo + 1) as usize,
                    });
                }
            });
        });
    }
}

pub fn conv_forward(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let geom = ConvGeometry::new(x.shape(), k.shape(), spec)?;
    let out_shape = geom.out_shape();
    let mut out = vec![0.0; out_shape.iter().product()];
    let (cin, cout) = (geom.cin, geom.cout);
    let (xd, kd) = (x.data(), k.data());
    geom.for_each_line(|l| {
        gemm_acc(
            l.n,
            cin,
            cout,
            &xd[l.x_off..],
            l.x_rs,
            1,
            &kd[l.k_off..],
            cout,
            1,
            &mut out[l.out_off..],
            cout,
            1,
        );
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Returns `(d input, d kernel)` for an upstream gradient on the output;
/// either half is skipped when not requested.
pub fn conv_backward(
    x: &Tensor,
    k: &Tensor,
    spec: ConvSpec,
    grad_out: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let geom = ConvGeometry::new(x.shape(), k.shape(), spec).expect("geometry validated on forward");
    let (cin, cout) = (geom.cin, geom.cout);
    let (xd, kd) = (x.data(), k.data());
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gk = want_k.then(|| vec![0.0; k.len()]);
    geom.for_each_line(|l| {
        if let Some(gx) = gx.as_mut() {
            // gx rows += g_out rows · K_tapᵀ
            gemm_acc(
                l.n,
                cout,
                cin,
                &grad_out[l.out_off..],
                cout,
                1,
                &kd[l.k_off..],
                1,
                cout,
                &mut gx[l.x_off..],
                l.x_rs,
                1,
            );
        }
        if let Some(gk) = gk.as_mut() {
            // gK_tap += x rowsᵀ · g_out rows
            gemm_acc(
                cin,
                l.n,
                cout,
                &xd[l.x_off..],
                1,
                l.x_rs,
                &grad_out[l.out_off..],
                cout,
                1,
                &mut gk[l.k_off..],
                cout,
                1,
            );
        }
    });
    (gx, gk)
}

// ---------------------------------------------------------------------------
// Pooling and up-sampling over every axis except the trailing channel axis.

/// For every row-major position of `src` spatial extents, the flat position
/// in the extents obtained by integer-dividing each coordinate by `factor`.
fn divided_positions(src: &[usize], factor: usize) -> Vec<usize> {
    let dst: Vec<usize> = src.iter().map(|&d| d / factor).collect();
    let dst_strides = row_major_strides(&dst, 1);
    let mut out = Vec::with_capacity(src.iter().product());
    for_each_index(src, |idx| {
        out.push(idx.iter().zip(&dst_strides).map(|(&i, &s)| (i / factor) * s).sum());
    });
    out
}

pub struct PoolOutput {
    pub value: Tensor,
    /// Flat input index feeding each output element (max pooling only).
    pub argmax: Option<Vec<usize>>,
}

pub fn pool_forward(x: &Tensor, kind: PoolKind, window: usize) -> Result<PoolOutput> {
    if window == 0 {
        return Err(Error::invalid("pool window must be >= 1"));
    }
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::shape("pool", format!("needs spatial axes, got {:?}", x.shape())));
    }
    let sp = &x.shape()[..rank - 1];
    if let Some(a) = sp.iter().position(|&d| d % window != 0) {
        return Err(Error::shape(
            "pool",
            format!("axis {a} extent {} not divisible by window {window}", sp[a]),
        ));
    }
    let c = x.channels();
    let mut out_shape: Vec<usize> = sp.iter().map(|&d| d / window).collect();
    out_shape.push(c);
    let n_out: usize = out_shape.iter().product();
    let map = divided_positions(sp, window);
    let xd = x.data();
    match kind {
        PoolKind::Avg => {
            let w = (window as f64).powi((rank - 1) as i32);
            let mut out = vec![0.0; n_out];
            for (p, &o) in map.iter().enumerate() {
                for ch in 0..c {
                    out[o * c + ch] += xd[p * c + ch] / w;
                }
            }
            Ok(PoolOutput { value: Tensor::from_parts(out_shape, out), argmax: None })
        }
        PoolKind::Max => {
            let mut out = vec![f64::NEG_INFINITY; n_out];
            let mut arg = vec![0usize; n_out];
            for (p, &o) in map.iter().enumerate() {
                for ch in 0..c {
                    let v = xd[p * c + ch];
                    if v > out[o * c + ch] {
                        out[o * c + ch] = v;
                        arg[o * c + ch] = p * c + ch;
                    }
                }
            }
            Ok(PoolOutput { value: Tensor::from_parts(out_shape, out), argmax: Some(arg) })
        }
    }
}

pub fn max_pool_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gx[i] += g;
    }
    gx
}

pub fn avg_pool_backward(x_shape: &[usize], window: usize, grad_out: &[f64]) -> Vec<f64> {
    let rank = x_shape.len();
    let sp = &x_shape[..rank - 1];
    let c = x_shape[rank - 1];
    let w = (window as f64).powi((rank - 1) as i32);
    let map = divided_positions(sp, window);
    let mut gx = vec![0.0; sp.iter().product::<usize>() * c];
    for (p, &o) in map.iter().enumerate() {
        for ch in 0..c {
            gx[p * c + ch] = grad_out[o * c + ch] / w;
        }
    }
    gx
}

pub fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::shape("upsample", format!("needs spatial axes, got {:?}", x.shape())));
    }
    let c = x.channels();
    let out_sp: Vec<usize> = x.shape()[..rank - 1].iter().map(|&d| d * factor).collect();
    let map = divided_positions(&out_sp, factor);
    let xd = x.data();
    let mut out = Vec::with_capacity(map.len() * c);
    for &src in &map {
        out.extend_from_slice(&xd[src * c..(src + 1) * c]);
    }
    let mut shape = out_sp;
    shape.push(c);
    Ok(Tensor::from_parts(shape, out))
}

pub fn upsample_backward(x_shape: &[usize], factor: usize, grad_out: &[f64]) -> Vec<f64> {
    let rank = x_shape.len();
    let c = x_shape[rank - 1];
    let out_sp: Vec<usize> = x_shape[..rank - 1].iter().map(|&d| d * factor).collect();
    let map = divided_positions(&out_sp, factor);
    let mut gx = vec![0.0; x_shape.iter().product()];
    for (p, &src) in map.iter().enumerate() {
        for ch in 0..c {
            gx[src * c + ch] += grad_out[p * c + ch];
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Matrices

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, n, 1);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    // ga = g · bᵀ
    gemm_acc(m, n, k, g, n, 1, b.data(), 1, n, &mut ga, k, 1);
    // gb = aᵀ · g
    gemm_acc(k, m, n, a.data(), 1, k, g, n, 1, &mut gb, n, 1);
    (ga, gb)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims(a, "transpose")?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

// ---------------------------------------------------------------------------
// Row-wise softmax and normalization

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.channels();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn softmax_rows_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let c = y.channels();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), out) in y.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..c {
            out[i] = yr[i] * (gr[i] - dot);
        }
    }
    gx
}

/// Statistics kept from a normalization forward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel normalization over every leading axis: the trailing axis is
/// the channel, everything else is pooled into the statistics.
pub fn channel_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    fixed: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, NormStats)> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "channel_norm",
            format!("{c} channels but scale/shift have {}/{}", gamma.len(), beta.len()),
        ));
    }
    let rows = x.len() / c;
    let xd = x.data();
    let (mean, var) = match fixed {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("channel_norm", "running statistics have the wrong length"));
            }
            (m.to_vec(), v.to_vec())
        }
        None => {
            let mut mean = vec![0.0; c];
            for row in xd.chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in xd.chunks(c) {
                for ch in 0..c {
                    let d = row[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.len());
    for row in xd.chunks(c) {
        for ch in 0..c {
            out.push((row[ch] - mean[ch]) * inv_std[ch] * g[ch] + b[ch]);
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), NormStats { mean, inv_std }))
}

/// Returns `(d x, d gamma, d beta)` for batch-statistics normalization.
pub fn channel_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = x.channels();
    let rows = (x.len() / c) as f64;
    let xd = x.data();
    let gam = gamma.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (row, grow) in xd.chunks(c).zip(g.chunks(c)) {
        for ch in 0..c {
            let xhat = (row[ch] - stats.mean[ch]) * stats.inv_std[ch];
            sum_g[ch] += grow[ch];
            sum_gx[ch] += grow[ch] * xhat;
        }
    }
    let mut gx = Vec::with_capacity(x.len());
    for (row, grow) in xd.chunks(c).zip(g.chunks(c)) {
        for ch in 0..c {
            let xhat = (row[ch] - stats.mean[ch]) * stats.inv_std[ch];
            let k = gam[ch] * stats.inv_std[ch] / rows;
            gx.push(k * (rows * grow[ch] - sum_g[ch] - xhat * sum_gx[ch]));
        }
    }
    (gx, sum_gx, sum_g)
}

/// Normalizes each row over its trailing axis.
pub fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layer_norm", format!("width {c} but scale/shift {}/{}", gamma.len(), beta.len())));
    }
    let mut mean = Vec::new();
    let mut inv_std = Vec::new();
    let mut out = Vec::with_capacity(x.len());
    let (gd, bd) = (gamma.data(), beta.data());
    for row in x.data().chunks(c) {
        let m = row.iter().sum::<f64>() / c as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
        let is = 1.0 / (v + eps).sqrt();
        for i in 0..c {
            out.push((row[i] - m) * is * gd[i] + bd[i]);
        }
        mean.push(m);
        inv_std.push(is);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), NormStats { mean, inv_std }))
}

pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = x.channels();
    let gd = gamma.data();
    let mut gx = Vec::with_capacity(x.len());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for (r, (row, grow)) in x.data().chunks(c).zip(g.chunks(c)).enumerate() {
        let (m, is) = (stats.mean[r], stats.inv_std[r]);
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for i in 0..c {
            let xhat = (row[i] - m) * is;
            let d = grow[i] * gd[i];
            sum_d += d;
            sum_dx += d * xhat;
            ggamma[i] += grow[i] * xhat;
            gbeta[i] += grow[i];
        }
        for i in 0..c {
            let xhat = (row[i] - m) * is;
            let d = grow[i] * gd[i];
            gx.push(is / c as f64 * (c as f64 * d - sum_d - xhat * sum_dx));
        }
    }
    (gx, ggamma, gbeta)
}
