//! Differentiable layer operations on N×C×H×W feature maps.
//!
//! Convolutions run over an explicitly zero-padded copy of the input, so
//! every output element executes exactly Cin·k·k multiply-accumulates in
//! ascending (channel, ky, kx) order — the same order as the naive oracle,
//! which keeps the two bit-identical, and the same count as the analytic
//! cost model.

use crate::error::{Error, Result};
use crate::flopcount;
use crate::tensor::{nary_op, Tensor};

fn dims4(x: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("{op}: expected rank-4 input, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Zero-padded copy of one image plane stack: [C,H,W] -> [C,H+2p,W+2p].
fn pad_image(src: &[f32], c: usize, h: usize, w: usize, p: usize, out: &mut [f32]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    out.fill(0.0);
    for ci in 0..c {
        for y in 0..h {
            let s = ci * h * w + y * w;
            let d = ci * hp * wp + (y + p) * wp + p;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
}

/// Cross-correlation plus bias: x[N,Cin,H,W] ⋆ w[Cout,Cin,k,k] + b[Cout].
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, wd) = dims4(x, "conv2d")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != cin {
        return Err(Error::Shape(format!(
            "conv2d: weight {ws:?} does not match input channels {cin}"
        )));
    }
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if b.shape() != vec![cout] {
        return Err(Error::Shape(format!(
            "conv2d: bias {:?} does not match {cout} output channels",
            b.shape()
        )));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    if (h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0 {
        return Err(Error::Shape(format!(
            "conv2d: non-integral output extent for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);

    let mut out = vec![0.0f32; n * cout * ho * wo];
    {
        let xd = x.data();
        let wdat = w.data();
        let bd = b.data();
        let mut xp = vec![0.0f32; cin * hp * wp];
        for ni in 0..n {
            pad_image(&xd[ni * cin * h * wd..], cin, h, wd, pad, &mut xp);
            for co in 0..cout {
                let plane = &mut out[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
                plane.fill(bd[co]);
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                            for yo in 0..ho {
                                let xrow = &xp[ci * hp * wp + (yo * stride + ky) * wp + kx..];
                                let orow = &mut plane[yo * wo..(yo + 1) * wo];
                                if stride == 1 {
                                    for (o, &xv) in orow.iter_mut().zip(&xrow[..wo]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (xo, o) in orow.iter_mut().enumerate() {
                                        *o += wv * xrow[xo * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    flopcount::add_macs((n * cout * ho * wo * cin * kh * kw) as u64);

    Ok(nary_op(
        &[x, w, b],
        vec![n, cout, ho, wo],
        out,
        "conv2d",
        move |dy, ps| {
            let xd = ps[0].data();
            let wdat = ps[1].data();
            let mut dx = vec![0.0f32; n * cin * h * wd];
            let mut dw = vec![0.0f32; cout * cin * kh * kw];
            let mut db = vec![0.0f32; cout];
            let mut xp = vec![0.0f32; cin * hp * wp];
            let mut dxp = vec![0.0f32; cin * hp * wp];
            for ni in 0..n {
                pad_image(&xd[ni * cin * h * wd..], cin, h, wd, pad, &mut xp);
                dxp.fill(0.0);
                for co in 0..cout {
                    let dplane = &dy[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
                    db[co] += dplane.iter().sum::<f32>();
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                let wv = wdat[widx];
                                let mut wacc = 0.0f32;
                                for yo in 0..ho {
                                    let base = ci * hp * wp + (yo * stride + ky) * wp + kx;
                                    let drow = &dplane[yo * wo..(yo + 1) * wo];
                                    if stride == 1 {
                                        let xrow = &xp[base..base + wo];
                                        let dxrow = &mut dxp[base..base + wo];
                                        for ((&g, &xv), dxv) in
                                            drow.iter().zip(xrow).zip(dxrow.iter_mut())
                                        {
                                            wacc += g * xv;
                                            *dxv += wv * g;
                                        }
                                    } else {
                                        for (xo, &g) in drow.iter().enumerate() {
                                            wacc += g * xp[base + xo * stride];
                                            dxp[base + xo * stride] += wv * g;
                                        }
                                    }
                                }
                                dw[widx] += wacc;
                            }
                        }
                    }
                }
                // crop the padded gradient back to the input extent
                for ci in 0..cin {
                    for y in 0..h {
                        let s = ci * hp * wp + (y + pad) * wp + pad;
                        let d = ni * cin * h * wd + ci * h * wd + y * wd;
                        for xo in 0..wd {
                            dx[d + xo] += dxp[s + xo];
                        }
                    }
                }
            }
            vec![dx, dw, db]
        },
    ))
}

/// Per-channel spatial convolution (no cross-channel mixing):
/// x[N,C,H,W] ⋆ w[C,1,k,k] + b[C], stride 1, same padding.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = dims4(x, "depthwise_conv2d")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != c || ws[1] != 1 {
        return Err(Error::Shape(format!(
            "depthwise_conv2d: weight {ws:?} does not match {c} channels"
        )));
    }
    let (kh, kw) = (ws[2], ws[3]);
    if b.shape() != vec![c] {
        return Err(Error::Shape(format!(
            "depthwise_conv2d: bias {:?} does not match {c} channels",
            b.shape()
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "depthwise_conv2d: kernel {kh}x{kw} larger than padded input"
        )));
    }
    let ho = h + 2 * pad - kh + 1;
    let wo = wd + 2 * pad - kw + 1;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);

    let mut out = vec![0.0f32; n * c * ho * wo];
    {
        let xd = x.data();
        let wdat = w.data();
        let bd = b.data();
        let mut xp = vec![0.0f32; hp * wp];
        for ni in 0..n {
            for ci in 0..c {
                pad_image(&xd[(ni * c + ci) * h * wd..], 1, h, wd, pad, &mut xp);
                let plane = &mut out[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                plane.fill(bd[ci]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[(ci * kh + ky) * kw + kx];
                        for yo in 0..ho {
                            let xrow = &xp[(yo + ky) * wp + kx..(yo + ky) * wp + kx + wo];
                            let orow = &mut plane[yo * wo..(yo + 1) * wo];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    flopcount::add_macs((n * c * ho * wo * kh * kw) as u64);

    Ok(nary_op(
        &[x, w, b],
        vec![n, c, ho, wo],
        out,
        "depthwise_conv2d",
        move |dy, ps| {
            let xd = ps[0].data();
            let wdat = ps[1].data();
            let mut dx = vec![0.0f32; n * c * h * wd];
            let mut dw = vec![0.0f32; c * kh * kw];
            let mut db = vec![0.0f32; c];
            let mut xp = vec![0.0f32; hp * wp];
            let mut dxp = vec![0.0f32; hp * wp];
            for ni in 0..n {
                for ci in 0..c {
                    pad_image(&xd[(ni * c + ci) * h * wd..], 1, h, wd, pad, &mut xp);
                    dxp.fill(0.0);
                    let dplane = &dy[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                    db[ci] += dplane.iter().sum::<f32>();
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = (ci * kh + ky) * kw + kx;
                            let wv = wdat[widx];
                            let mut wacc = 0.0f32;
                            for yo in 0..ho {
                                let base = (yo + ky) * wp + kx;
                                let drow = &dplane[yo * wo..(yo + 1) * wo];
                                let xrow = &xp[base..base + wo];
                                let dxrow = &mut dxp[base..base + wo];
                                for ((&g, &xv), dxv) in drow.iter().zip(xrow).zip(dxrow.iter_mut())
                                {
                                    wacc += g * xv;
                                    *dxv += wv * g;
                                }
                            }
                            dw[widx] += wacc;
                        }
                    }
                    for y in 0..h {
                        let s = (y + pad) * wp + pad;
                        let d = (ni * c + ci) * h * wd + y * wd;
                        for xo in 0..wd {
                            dx[d + xo] += dxp[s + xo];
                        }
                    }
                }
            }
            vec![dx, dw, db]
        },
    ))
}

/// 1×1 convolution: per-pixel channel mixing, stride 1, no padding.
pub fn pointwise_conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::Shape(format!(
            "pointwise_conv2d: expected Cout×Cin×1×1 weight, got {ws:?}"
        )));
    }
    conv2d(x, w, b, 1, 0)
}

/// 2×2 max pooling with stride 2. Gradient routes to the argmax; ties break
/// toward the first element in scan order.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2: extents must be even, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    {
        let xd = x.data();
        for pc in 0..n * c {
            let plane = &xd[pc * h * w..(pc + 1) * h * w];
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (yo * 2 + dy) * w + xo * 2 + dx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[pc * ho * wo + yo * wo + xo] = best;
                    arg[pc * ho * wo + yo * wo + xo] = best_idx as u32;
                }
            }
        }
    }
    flopcount::add_misc((n * c * ho * wo * 4) as u64);
    Ok(nary_op(
        &[x],
        vec![n, c, ho, wo],
        out,
        "maxpool2",
        move |dy, ps| {
            let mut dx = vec![0.0f32; ps[0].numel()];
            for pc in 0..n * c {
                for o in 0..ho * wo {
                    dx[pc * h * w + arg[pc * ho * wo + o] as usize] += dy[pc * ho * wo + o];
                }
            }
            vec![dx]
        },
    ))
}

/// Contiguous bin edges for adaptive pooling: [floor(i·n/m), floor((i+1)·n/m)),
/// widened to at least one element so upsampling targets stay covered.
fn pool_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = (i * n / m).min(n - 1);
    let end = ((i + 1) * n / m).clamp(start + 1, n);
    (start, end)
}

/// Adaptive average pooling to an `out_h`×`out_w` grid.
pub fn adaptive_avgpool(x: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "adaptive_avgpool")?;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape("adaptive_avgpool: zero output extent".into()));
    }
    let mut out = vec![0.0f32; n * c * oh * ow];
    {
        let xd = x.data();
        for pc in 0..n * c {
            let plane = &xd[pc * h * w..(pc + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = pool_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_bin(ox, w, ow);
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        for xi in x0..x1 {
                            acc += plane[y * w + xi];
                        }
                    }
                    out[pc * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
    }
    flopcount::add_misc((n * c * oh * ow * 4) as u64);
    Ok(nary_op(
        &[x],
        vec![n, c, oh, ow],
        out,
        "adaptive_avgpool",
        move |dy, ps| {
            let mut dx = vec![0.0f32; ps[0].numel()];
            for pc in 0..n * c {
                for oy in 0..oh {
                    let (y0, y1) = pool_bin(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = pool_bin(ox, w, ow);
                        let g = dy[pc * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                        for y in y0..y1 {
                            for xi in x0..x1 {
                                dx[pc * h * w + y * w + xi] += g;
                            }
                        }
                    }
                }
            }
            vec![dx]
        },
    ))
}

/// Source coordinate and blend fraction for one output index under the
/// align-corners=false convention.
fn bilinear_coord(o: usize, from: usize, to: usize) -> (usize, usize, f32) {
    let src = ((o as f32 + 0.5) * from as f32 / to as f32 - 0.5).clamp(0.0, (from - 1) as f32);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(from - 1);
    (lo, hi, src - lo as f32)
}

/// Bilinear interpolation to `out_hw` (align-corners=false).
pub fn bilinear_resize(x: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "bilinear_resize")?;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape("bilinear_resize: zero target extent".into()));
    }
    let ycoords: Vec<(usize, usize, f32)> = (0..oh).map(|o| bilinear_coord(o, h, oh)).collect();
    let xcoords: Vec<(usize, usize, f32)> = (0..ow).map(|o| bilinear_coord(o, w, ow)).collect();
    let mut out = vec![0.0f32; n * c * oh * ow];
    {
        let xd = x.data();
        for pc in 0..n * c {
            let plane = &xd[pc * h * w..(pc + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ycoords.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xcoords.iter().enumerate() {
                    // lerp form keeps constant inputs exactly constant
                    let top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                    let bot = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                    out[pc * oh * ow + oy * ow + ox] = top + fy * (bot - top);
                }
            }
        }
    }
    flopcount::add_misc((n * c * oh * ow * 8) as u64);
    Ok(nary_op(
        &[x],
        vec![n, c, oh, ow],
        out,
        "bilinear_resize",
        move |dy, ps| {
            let mut dx = vec![0.0f32; ps[0].numel()];
            for pc in 0..n * c {
                let dplane = &dy[pc * oh * ow..(pc + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ycoords.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xcoords.iter().enumerate() {
                        let g = dplane[oy * ow + ox];
                        let base = pc * h * w;
                        dx[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                        dx[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                        dx[base + y1 * w + x0] += g * fy * (1.0 - fx);
                        dx[base + y1 * w + x1] += g * fy * fx;
                    }
                }
            }
            vec![dx]
        },
    ))
}

/// Position-wise affine map over the last axis: x[…,Din]·w[Din,Dout] + b.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
        return Err(Error::Shape(format!(
            "linear: input {xs:?} incompatible with weight {ws:?}"
        )));
    }
    let (din, dout) = (ws[0], ws[1]);
    if b.shape() != vec![dout] {
        return Err(Error::Shape(format!(
            "linear: bias {:?} does not match {dout} outputs",
            b.shape()
        )));
    }
    let tokens = x.numel() / din;
    let mut out = vec![0.0f32; tokens * dout];
    {
        let bd = b.data();
        for t in 0..tokens {
            out[t * dout..(t + 1) * dout].copy_from_slice(&bd);
        }
        crate::tensor::kernels::matmul_acc(&x.data(), &w.data(), tokens, din, dout, &mut out);
    }
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = dout;
    Ok(nary_op(
        &[x, w, b],
        out_shape,
        out,
        "linear",
        move |dy, ps| {
            let xd = ps[0].data();
            let wd = ps[1].data();
            let mut dx = vec![0.0f32; tokens * din];
            let mut dw = vec![0.0f32; din * dout];
            let mut db = vec![0.0f32; dout];
            crate::tensor::kernels::matmul_nt_acc(dy, &wd, tokens, dout, din, &mut dx);
            crate::tensor::kernels::matmul_tn_acc(&xd, dy, tokens, din, dout, &mut dw);
            for t in 0..tokens {
                for (o, db_o) in db.iter_mut().enumerate() {
                    *db_o += dy[t * dout + o];
                }
            }
            vec![dx, dw, db]
        },
    ))
}

/// Per-token normalization over the last axis with affine parameters,
/// eps = 1e-5.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let xs = x.shape();
    let c = *xs.last().ok_or_else(|| Error::Shape("layernorm: rank-0 input".into()))?;
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(Error::Shape(format!(
            "layernorm: affine shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let tokens = x.numel() / c;
    let mut out = vec![0.0f32; x.numel()];
    let mut xhat = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; tokens];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for t in 0..tokens {
            let row = &xd[t * c..(t + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[t] = istd as f32;
            for i in 0..c {
                let xh = ((row[i] as f64 - mean) * istd) as f32;
                xhat[t * c + i] = xh;
                out[t * c + i] = xh * gd[i] + bd[i];
            }
        }
    }
    flopcount::add_misc(x.numel() as u64 * 4);
    Ok(nary_op(
        &[x, gamma, beta],
        xs,
        out,
        "layernorm",
        move |dy, ps| {
            let gd = ps[1].data();
            let mut dx = vec![0.0f32; tokens * c];
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for t in 0..tokens {
                let drow = &dy[t * c..(t + 1) * c];
                let xrow = &xhat[t * c..(t + 1) * c];
                let mut sum_dyg = 0.0f64;
                let mut sum_dyg_xh = 0.0f64;
                for i in 0..c {
                    let dyg = (drow[i] * gd[i]) as f64;
                    sum_dyg += dyg;
                    sum_dyg_xh += dyg * xrow[i] as f64;
                    dgamma[i] += drow[i] * xrow[i];
                    dbeta[i] += drow[i];
                }
                let istd = inv_std[t] as f64;
                for i in 0..c {
                    let dyg = (drow[i] * gd[i]) as f64;
                    dx[t * c + i] =
                        (istd * (dyg - sum_dyg / c as f64 - xrow[i] as f64 * sum_dyg_xh / c as f64))
                            as f32;
                }
            }
            vec![dx, dgamma, dbeta]
        },
    ))
}

/// LayerNorm over the channel axis of an N×C×H×W map (normalizes each
/// spatial position across channels).
pub fn layernorm_nchw(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    dims4(x, "layernorm_nchw")?;
    let tokens = x.permute(&[0, 2, 3, 1])?; // N,H,W,C
    layernorm(&tokens, gamma, beta)?.permute(&[0, 3, 1, 2])
}
