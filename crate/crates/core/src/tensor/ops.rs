//! Forward primitives and their hand-written backward passes.
//!
//! Backward functions take the forward inputs (or outputs, where cheaper) and
//! the upstream gradient, and return gradients for each differentiable input.

use crate::error::{dim_err, Error, Result};
use crate::par::{for_each_chunk, Exec};

use super::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_with(a, b, Exec::default())
}

pub fn matmul_with(a: &Tensor, b: &Tensor, exec: Exec) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err("matmul", a.shape(), b.shape());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for_each_chunk(exec.for_work(m * n * k), &mut out, n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::from_vec(&[m, n], out)
}

/// Gradients of `a·b` given upstream `g`: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul(g, &b.transpose()?)?, matmul(&a.transpose()?, g)?))
}

/// Row-wise softmax with max subtraction. `-inf` entries get weight 0; a row
/// must keep at least one finite entry.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(Error::Evaluation(format!(
                "softmax row {i} has no finite entry"
            )));
        }
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - mx).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_vec(&[m, n], out)
}

/// Backward of `softmax_rows` from its output `y`: `y ⊙ (g − Σ g⊙y)`.
pub fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (m, n) = y.dims2()?;
    if g.shape() != y.shape() {
        return dim_err("softmax_backward", y.shape(), g.shape());
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let (yr, gr) = (y.row(i), g.row(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
    }
    Tensor::from_vec(&[m, n], out)
}

/// Largest `f64` below 1.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept inside the open interval `(0, 1)`: saturated
/// values land on the nearest representable numbers inside it.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of `sigmoid` from its output `y`.
pub fn sigmoid_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    y.zip_map(g, "sigmoid_backward", |y, g| g * y * (1.0 - y))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    x.zip_map(g, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

fn check_norm_params(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<usize> {
    let d = *x.shape().last().expect("rank >= 1");
    if scale.shape() != [d] {
        return dim_err("layer_norm", x.shape(), scale.shape());
    }
    if shift.shape() != [d] {
        return dim_err("layer_norm", x.shape(), shift.shape());
    }
    Ok(d)
}

/// Layer normalization over the last axis.
///
/// `eps` must be non-negative; `eps = 0` is accepted for exact-value checks
/// on inputs with non-zero variance.
pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, scale, shift, eps)?.0)
}

/// Forward pass that also returns the normalized pre-affine values and the
/// per-row inverse standard deviations for [`layer_norm_backward`].
pub fn layer_norm_parts(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    if !(eps >= 0.0) {
        return Err(Error::Parameter(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let d = check_norm_params(x, scale, shift)?;
    let rows = x.len() / d;
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        if denom <= 0.0 {
            return Err(Error::Evaluation(
                "layer_norm of a constant row with eps = 0".into(),
            ));
        }
        let is = 1.0 / denom.sqrt();
        inv_std.push(is);
        xhat.extend(row.iter().map(|v| (v - mean) * is));
    }
    let xhat = Tensor::from_vec(x.shape(), xhat)?;
    let (sc, sh) = (scale.data(), shift.data());
    let y = Tensor::from_fn(x.shape(), |i| xhat.data()[i] * sc[i % d] + sh[i % d]);
    Ok((y, xhat, inv_std))
}

/// Returns `(dx, dscale, dshift)`.
pub fn layer_norm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    scale: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = scale.len();
    if g.shape() != xhat.shape() {
        return dim_err("layer_norm_backward", xhat.shape(), g.shape());
    }
    let rows = xhat.len() / d;
    let mut dscale = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    let mut dx = Vec::with_capacity(xhat.len());
    let df = d as f64;
    for r in 0..rows {
        let xh = &xhat.data()[r * d..(r + 1) * d];
        let gr = &g.data()[r * d..(r + 1) * d];
        let dxh: Vec<f64> = gr.iter().zip(scale.data()).map(|(g, s)| g * s).collect();
        for j in 0..d {
            dscale[j] += gr[j] * xh[j];
            dshift[j] += gr[j];
        }
        let sum_dxh: f64 = dxh.iter().sum();
        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = inv_std[r];
        dx.extend(
            (0..d).map(|j| is / df * (df * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh)),
        );
    }
    Ok((
        Tensor::from_vec(xhat.shape(), dx)?,
        Tensor::vector(&dscale),
        Tensor::vector(&dshift),
    ))
}

fn conv_dims(x: &Tensor, kernel: &Tensor, padding: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (cin, h, w) = x.dims3()?;
    let (cout, kcin, kh, kw) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return dim_err("conv2d", x.shape(), kernel.shape()),
    };
    if kcin != cin {
        return dim_err("conv2d", x.shape(), kernel.shape());
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Parameter(format!(
            "conv2d kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if 2 * padding + h < kh || 2 * padding + w < kw {
        return dim_err("conv2d", x.shape(), kernel.shape());
    }
    let ho = h + 2 * padding - kh + 1;
    let wo = w + 2 * padding - kw + 1;
    Ok((cin, h, w, cout, kh, ho, wo))
}

/// Zero-padded 2-D cross-correlation (stride 1, no kernel flip).
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    conv2d_with(x, kernel, padding, Exec::default())
}

pub fn conv2d_with(x: &Tensor, kernel: &Tensor, padding: usize, exec: Exec) -> Result<Tensor> {
    let (cin, h, w, cout, k, ho, wo) = conv_dims(x, kernel, padding)?;
    let (xd, kd) = (x.data(), kernel.data());
    let p = padding as isize;
    let mut out = vec![0.0; cout * ho * wo];
    let work = cout * ho * wo * cin * k * k;
    for_each_chunk(exec.for_work(work), &mut out, ho * wo, |co, plane| {
        for ci in 0..cin {
            let xc = &xd[ci * h * w..(ci + 1) * h * w];
            let kc = &kd[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kc[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[cout, ho, wo], out)
}

/// Returns `(dx, dkernel)` for [`conv2d`].
pub fn conv2d_backward(x: &Tensor, kernel: &Tensor, padding: usize, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (cin, h, w, cout, k, ho, wo) = conv_dims(x, kernel, padding)?;
    if g.shape() != [cout, ho, wo] {
        return dim_err("conv2d_backward", &[cout, ho, wo], g.shape());
    }
    let p = padding as isize;
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let kidx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = kd[kidx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            let gv = gd[(co * ho + oy) * wo + ox];
                            acc += gv * xd[xi];
                            dx[xi] += gv * wv;
                        }
                    }
                    dk[kidx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(kernel.shape(), dk)?,
    ))
}

/// Zero-padded, shape-preserving 1-D cross-correlation along a vector.
pub fn conv1d_channels(v: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let k = kernel.len();
    if kernel.rank() != 1 || k % 2 == 0 {
        return Err(Error::Parameter(format!(
            "conv1d kernel must be a vector of odd length, got {:?}",
            kernel.shape()
        )));
    }
    if v.rank() != 1 {
        return dim_err("conv1d_channels", v.shape(), kernel.shape());
    }
    let c = v.len();
    let half = (k / 2) as isize;
    let (vd, kd) = (v.data(), kernel.data());
    Ok(Tensor::from_fn(&[c], |i| {
        (0..k)
            .filter_map(|j| {
                let src = i as isize + j as isize - half;
                (src >= 0 && src < c as isize).then(|| kd[j] * vd[src as usize])
            })
            .sum()
    }))
}

/// Returns `(dv, dkernel)` for [`conv1d_channels`].
pub fn conv1d_channels_backward(v: &Tensor, kernel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, k) = (v.len(), kernel.len());
    if g.shape() != v.shape() {
        return dim_err("conv1d_backward", v.shape(), g.shape());
    }
    let half = (k / 2) as isize;
    let mut dv = vec![0.0; c];
    let mut dk = vec![0.0; k];
    for i in 0..c {
        for j in 0..k {
            let src = i as isize + j as isize - half;
            if src >= 0 && src < c as isize {
                dk[j] += g.data()[i] * v.data()[src as usize];
                dv[src as usize] += g.data()[i] * kernel.data()[j];
            }
        }
    }
    Ok((Tensor::vector(&dv), Tensor::vector(&dk)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Per-pixel reduction across the channel axis: `C×H×W → 1×H×W`.
pub fn pool_over_channels(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let d = x.data();
    Ok(Tensor::from_fn(&[1, h, w], |p| {
        let vals = (0..c).map(|ch| d[ch * hw + p]);
        match mode {
            PoolMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            PoolMode::Avg => vals.sum::<f64>() / c as f64,
        }
    }))
}

/// Max routes the gradient to the first maximal channel.
pub fn pool_over_channels_backward(x: &Tensor, mode: PoolMode, g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if g.shape() != [1, h, w] {
        return dim_err("pool_backward", &[1, h, w], g.shape());
    }
    let hw = h * w;
    let d = x.data();
    let mut dx = vec![0.0; x.len()];
    for p in 0..hw {
        match mode {
            PoolMode::Avg => {
                for ch in 0..c {
                    dx[ch * hw + p] = g.data()[p] / c as f64;
                }
            }
            PoolMode::Max => {
                let mut best = 0;
                for ch in 1..c {
                    if d[ch * hw + p] > d[best * hw + p] {
                        best = ch;
                    }
                }
                dx[best * hw + p] = g.data()[p];
            }
        }
    }
    Tensor::from_vec(x.shape(), dx)
}

/// `x·w + b` for `x: [n×i]`, `w: [i×o]`, `b: [o]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = matmul(x, w)?;
    let (n, o) = y.dims2()?;
    if b.shape() != [o] {
        return dim_err("linear", w.shape(), b.shape());
    }
    let bd = b.data();
    let mut data = y.into_data();
    for r in 0..n {
        data[r * o..(r + 1) * o]
            .iter_mut()
            .zip(bd)
            .for_each(|(v, b)| *v += b);
    }
    Tensor::from_vec(&[n, o], data)
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (dx, dw) = matmul_backward(x, w, g)?;
    let (n, o) = g.dims2()?;
    let db = Tensor::from_fn(&[o], |j| (0..n).map(|r| g.at2(r, j)).sum());
    Ok((dx, dw, db))
}

/// Keeps every second row and column: `C×H×W → C×(H/2)×(W/2)`.
pub fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Precondition(format!(
            "stride-2 subsampling needs even extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    Ok(Tensor::from_fn(&[c, ho, wo], |i| {
        let (ch, r) = (i / (ho * wo), i % (ho * wo));
        x.at3(ch, 2 * (r / wo), 2 * (r % wo))
    }))
}

pub fn subsample2_backward(input_shape: &[usize], g: &Tensor) -> Result<Tensor> {
    let (c, ho, wo) = g.dims3()?;
    let (h, w) = (input_shape[1], input_shape[2]);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                dx[(ch * h + 2 * y) * w + 2 * x] = g.at3(ch, y, x);
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// Bilinear resampling of an `H×W` map with align-corners sampling.
pub fn resize_bilinear(map: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let coord = |i: usize, n_out: usize, n_in: usize| {
        if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    Ok(Tensor::from_fn(&[h_out, w_out], |idx| {
        let (oy, ox) = (idx / w_out, idx % w_out);
        let (fy, fx) = (coord(oy, h_out, h), coord(ox, w_out, w));
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = map.at2(y0, x0) * (1.0 - tx) + map.at2(y0, x1) * tx;
        let bot = map.at2(y1, x0) * (1.0 - tx) + map.at2(y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    }))
}

/// Adjoint of [`resize_bilinear`] for an input of extents `h×w`.
pub fn resize_bilinear_backward(h: usize, w: usize, g: &Tensor) -> Result<Tensor> {
    let (h_out, w_out) = g.dims2()?;
    let coord = |i: usize, n_out: usize, n_in: usize| {
        if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut dx = vec![0.0; h * w];
    for oy in 0..h_out {
        for ox in 0..w_out {
            let (fy, fx) = (coord(oy, h_out, h), coord(ox, w_out, w));
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let gv = g.at2(oy, ox);
            dx[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
            dx[y0 * w + x1] += gv * (1.0 - ty) * tx;
            dx[y1 * w + x0] += gv * ty * (1.0 - tx);
            dx[y1 * w + x1] += gv * ty * tx;
        }
    }
    Tensor::from_vec(&[h, w], dx)
}
