//! Forward and backward kernels behind the graph ops.
//!
//! All kernels are single-threaded and iterate in a fixed order, so repeated
//! runs on the same inputs are bit-identical. Reductions that matter for
//! accuracy accumulate in f64.

use crate::error::{Error, Result};

/// Eight-lane dot product with a fixed summation order.
///
/// Plain sequential f32 sums block auto-vectorization; eight independent
/// accumulator lanes keep the order deterministic and let LLVM use SIMD.
pub(crate) fn dot8(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let off = i * 8;
        for l in 0..8 {
            acc[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let quad = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (quad[0] + quad[2]) + (quad[1] + quad[3]) + tail
}

fn sq_dist8(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let off = i * 8;
        for l in 0..8 {
            let d = a[off + l] - b[off + l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    let quad = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (quad[0] + quad[2]) + (quad[1] + quad[3]) + tail
}

// ── Convolution ───────────────────────────────────────────────────────────

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv2d_dims(
    xs: &[usize],
    ws: &[usize],
    bs: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shapes("conv2d wants 4-d input and weight", xs, ws));
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != cin {
        return Err(Error::shapes("conv2d channel mismatch", xs, ws));
    }
    if bs != [f] {
        return Err(Error::shapes("conv2d bias mismatch", bs, ws));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shapes("conv2d kernel larger than padded input", xs, ws));
    }
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        f,
        kh,
        kw,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

fn is_3x3_s1_p1(d: &ConvDims) -> bool {
    d.stride == 1 && d.pad == 1 && d.kh == 3 && d.kw == 3
}

// Patch matrix for a padded 3x3 window: `[cin*9, h*w]`, row `c*9 + ky*3 + kx`
// holding the input plane shifted by `(ky-1, kx-1)` with zero borders.
fn im2col3(x: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let plane = h * w;
    let mut cols = vec![0.0f32; cin * 9 * plane];
    for c in 0..cin {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * plane..(c * 9 + ky * 3 + kx + 1) * plane];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let y0 = 0.max(-dy) as usize;
                let y1 = (h as isize).min(h as isize - dy) as usize;
                let x0 = 0.max(-dx) as usize;
                let x1 = (w as isize).min(w as isize - dx) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = (sy * w) as isize + dx;
                    row[y * w + x0..y * w + x1]
                        .copy_from_slice(&src[(s0 + x0 as isize) as usize..(s0 + x1 as isize) as usize]);
                }
            }
        }
    }
    cols
}

// Scatter-add the patch-matrix gradient back into the input plane layout.
fn col2im3_accum(cols: &[f32], gx: &mut [f32], cin: usize, h: usize, w: usize) {
    let plane = h * w;
    for c in 0..cin {
        let dst = &mut gx[c * plane..(c + 1) * plane];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &cols[(c * 9 + ky * 3 + kx) * plane..(c * 9 + ky * 3 + kx + 1) * plane];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let y0 = 0.max(-dy) as usize;
                let y1 = (h as isize).min(h as isize - dy) as usize;
                let x0 = 0.max(-dx) as usize;
                let x1 = (w as isize).min(w as isize - dx) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = (sy * w) as isize + dx;
                    let d = &mut dst[(s0 + x0 as isize) as usize..(s0 + x1 as isize) as usize];
                    let s = &row[y * w + x0..y * w + x1];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], b: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut out = vec![0.0f32; d.n * d.f * d.h_out * d.w_out];
    if is_3x3_s1_p1(d) {
        // GEMM formulation: weights [f, cin*9] x patches [cin*9, h*w].
        let plane = d.h * d.w;
        let k9 = d.cin * 9;
        for n in 0..d.n {
            let cols = im2col3(&x[n * d.cin * plane..(n + 1) * d.cin * plane], d.cin, d.h, d.w);
            let prod = matmul_forward(w, &cols, d.f, k9, plane);
            let o = n * d.f * plane;
            for f in 0..d.f {
                let dst = &mut out[o + f * plane..o + (f + 1) * plane];
                let src = &prod[f * plane..(f + 1) * plane];
                for (od, &pv) in dst.iter_mut().zip(src) {
                    *od = b[f] + pv;
                }
            }
        }
        return out;
    }
    if d.stride == 1 {
        conv2d_forward_s1(x, w, b, d, &mut out);
        return out;
    }
    for n in 0..d.n {
        for f in 0..d.f {
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let mut acc = b[f];
                    for c in 0..d.cin {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((n * d.cin + c) * d.h + iy as usize) * d.w + ix as usize;
                                let wi = ((f * d.cin + c) * d.kh + ky) * d.kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * d.f + f) * d.h_out + oy) * d.w_out + ox] = acc;
                }
            }
        }
    }
    out
}

// Stride-1 path: a 3x3 conv becomes nine shifted axpy sweeps per (f, c)
// plane, which keeps the inner loop contiguous on both sides.
fn conv2d_forward_s1(x: &[f32], w: &[f32], b: &[f32], d: &ConvDims, out: &mut [f32]) {
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    for n in 0..d.n {
        for f in 0..d.f {
            let o_base = (n * d.f + f) * plane_out;
            out[o_base..o_base + plane_out].fill(b[f]);
            for c in 0..d.cin {
                let x_base = (n * d.cin + c) * plane_in;
                for ky in 0..d.kh {
                    let dy = ky as isize - d.pad as isize;
                    let y0 = 0.max(-dy) as usize;
                    let y1 = (d.h_out as isize).min(d.h as isize - dy).max(0) as usize;
                    for kx in 0..d.kw {
                        let dx = kx as isize - d.pad as isize;
                        let x0 = 0.max(-dx) as usize;
                        let x1 = (d.w_out as isize).min(d.w as isize - dx).max(0) as usize;
                        if y1 <= y0 || x1 <= x0 {
                            continue;
                        }
                        let wv = w[((f * d.cin + c) * d.kh + ky) * d.kw + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let o_row = o_base + y * d.w_out;
                            let i_row = (x_base + iy * d.w) as isize + dx;
                            let dst = &mut out[o_row + x0..o_row + x1];
                            let src = &x[(i_row + x0 as isize) as usize..(i_row + x1 as isize) as usize];
                            for (o, i) in dst.iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    d: &ConvDims,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let mut gb = vec![0.0f32; d.f];
    let plane_out = d.h_out * d.w_out;
    for n in 0..d.n {
        for f in 0..d.f {
            let base = (n * d.f + f) * plane_out;
            let mut acc = 0.0f64;
            for v in &g[base..base + plane_out] {
                acc += *v as f64;
            }
            gb[f] += acc as f32;
        }
    }
    if is_3x3_s1_p1(d) && (need_x || need_w) {
        let plane = d.h * d.w;
        let k9 = d.cin * 9;
        let mut gx = need_x.then(|| vec![0.0f32; d.n * d.cin * plane]);
        let mut gw = need_w.then(|| vec![0.0f32; d.f * k9]);
        for n in 0..d.n {
            let cols = im2col3(&x[n * d.cin * plane..(n + 1) * d.cin * plane], d.cin, d.h, d.w);
            let (ga, gcols) =
                matmul_backward(w, &cols, &g[n * d.f * plane..(n + 1) * d.f * plane], d.f, k9, plane);
            if let Some(gw) = gw.as_mut() {
                for (a, b) in gw.iter_mut().zip(&ga) {
                    *a += b;
                }
            }
            if let Some(gx) = gx.as_mut() {
                col2im3_accum(&gcols, &mut gx[n * d.cin * plane..(n + 1) * d.cin * plane], d.cin, d.h, d.w);
            }
        }
        return (gx, gw, gb);
    }
    let gx = need_x.then(|| conv2d_grad_input(w, g, d));
    let gw = need_w.then(|| conv2d_grad_weight(x, g, d));
    (gx, gw, gb)
}

fn conv2d_grad_input(w: &[f32], g: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut gx = vec![0.0f32; d.n * d.cin * d.h * d.w];
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    if d.stride == 1 {
        for n in 0..d.n {
            for f in 0..d.f {
                let g_base = (n * d.f + f) * plane_out;
                for c in 0..d.cin {
                    let x_base = (n * d.cin + c) * plane_in;
                    for ky in 0..d.kh {
                        let dy = ky as isize - d.pad as isize;
                        let y0 = 0.max(-dy) as usize;
                        let y1 = (d.h_out as isize).min(d.h as isize - dy).max(0) as usize;
                        for kx in 0..d.kw {
                            let dx = kx as isize - d.pad as isize;
                            let x0 = 0.max(-dx) as usize;
                            let x1 = (d.w_out as isize).min(d.w as isize - dx).max(0) as usize;
                            if y1 <= y0 || x1 <= x0 {
                                continue;
                            }
                            let wv = w[((f * d.cin + c) * d.kh + ky) * d.kw + kx];
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let g_row = g_base + y * d.w_out;
                                let i_row = (x_base + iy * d.w) as isize + dx;
                                let dst =
                                    &mut gx[(i_row + x0 as isize) as usize..(i_row + x1 as isize) as usize];
                                let src = &g[g_row + x0..g_row + x1];
                                for (o, i) in dst.iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
        return gx;
    }
    for n in 0..d.n {
        for f in 0..d.f {
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let gv = g[((n * d.f + f) * d.h_out + oy) * d.w_out + ox];
                    for c in 0..d.cin {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((n * d.cin + c) * d.h + iy as usize) * d.w + ix as usize;
                                let wi = ((f * d.cin + c) * d.kh + ky) * d.kw + kx;
                                gx[xi] += gv * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv2d_grad_weight(x: &[f32], g: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut gw = vec![0.0f32; d.f * d.cin * d.kh * d.kw];
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;
    if d.stride == 1 {
        for n in 0..d.n {
            for f in 0..d.f {
                let g_base = (n * d.f + f) * plane_out;
                for c in 0..d.cin {
                    let x_base = (n * d.cin + c) * plane_in;
                    for ky in 0..d.kh {
                        let dy = ky as isize - d.pad as isize;
                        let y0 = 0.max(-dy) as usize;
                        let y1 = (d.h_out as isize).min(d.h as isize - dy).max(0) as usize;
                        for kx in 0..d.kw {
                            let dx = kx as isize - d.pad as isize;
                            let x0 = 0.max(-dx) as usize;
                            let x1 = (d.w_out as isize).min(d.w as isize - dx).max(0) as usize;
                            if y1 <= y0 || x1 <= x0 {
                                continue;
                            }
                            let mut acc = 0.0f32;
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let g_row = g_base + y * d.w_out;
                                let i_row = (x_base + iy * d.w) as isize + dx;
                                acc += dot8(
                                    &g[g_row + x0..g_row + x1],
                                    &x[(i_row + x0 as isize) as usize..(i_row + x1 as isize) as usize],
                                );
                            }
                            gw[((f * d.cin + c) * d.kh + ky) * d.kw + kx] += acc;
                        }
                    }
                }
            }
        }
        return gw;
    }
    for n in 0..d.n {
        for f in 0..d.f {
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let gv = g[((n * d.f + f) * d.h_out + oy) * d.w_out + ox];
                    for c in 0..d.cin {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((n * d.cin + c) * d.h + iy as usize) * d.w + ix as usize;
                                let wi = ((f * d.cin + c) * d.kh + ky) * d.kw + kx;
                                gw[wi] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

// ── Matmul ────────────────────────────────────────────────────────────────

pub(crate) fn matmul_forward(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let o_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn matmul_backward(
    a: &[f32],
    b: &[f32],
    g: &[f32],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut ga = vec![0.0f32; m * k];
    let mut gb = vec![0.0f32; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            ga[i * k + l] = dot8(g_row, &b[l * n..(l + 1) * n]);
        }
    }
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let gb_row = &mut gb[l * n..(l + 1) * n];
            for (o, gv) in gb_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    (ga, gb)
}

// ── Softmax ───────────────────────────────────────────────────────────────

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, m, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * m * inner + i;
            let mut mx = f32::NEG_INFINITY;
            for j in 0..m {
                mx = mx.max(x[base + j * inner]);
            }
            let mut sum = 0.0f64;
            for j in 0..m {
                let e = ((x[base + j * inner] - mx) as f64).exp();
                out[base + j * inner] = e as f32;
                sum += e;
            }
            for j in 0..m {
                out[base + j * inner] = (out[base + j * inner] as f64 / sum) as f32;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f32], g: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, m, inner) = axis_split(shape, axis);
    let mut gx = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * m * inner + i;
            let mut s = 0.0f64;
            for j in 0..m {
                let ix = base + j * inner;
                s += (y[ix] * g[ix]) as f64;
            }
            for j in 0..m {
                let ix = base + j * inner;
                gx[ix] = y[ix] * (g[ix] - s as f32);
            }
        }
    }
    gx
}

// ── Cross entropy ─────────────────────────────────────────────────────────

pub(crate) const PROB_FLOOR: f32 = 1e-8;

pub(crate) struct CeResult {
    pub loss: f32,
    pub n_valid: usize,
}

fn ce_check_labels(labels: &[u32], rows: usize, cols: usize, ignore: Option<u32>) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} labels for {rows} rows",
            labels.len()
        )));
    }
    for &l in labels {
        if Some(l) == ignore {
            continue;
        }
        if l as usize >= cols {
            return Err(Error::Dimension(format!(
                "cross_entropy: label {l} out of range for {cols} classes"
            )));
        }
    }
    Ok(())
}

pub(crate) fn cross_entropy_forward(
    x: &[f32],
    rows: usize,
    cols: usize,
    labels: &[u32],
    from_probs: bool,
    ignore: Option<u32>,
) -> Result<CeResult> {
    ce_check_labels(labels, rows, cols, ignore)?;
    let mut sum = 0.0f64;
    let mut n_valid = 0usize;
    for r in 0..rows {
        if Some(labels[r]) == ignore {
            continue;
        }
        n_valid += 1;
        let row = &x[r * cols..(r + 1) * cols];
        let t = labels[r] as usize;
        if from_probs {
            let p = row[t].clamp(PROB_FLOOR, 1.0);
            sum -= (p as f64).ln();
        } else {
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut lse = 0.0f64;
            for &v in row {
                lse += ((v - mx) as f64).exp();
            }
            sum += mx as f64 + lse.ln() - row[t] as f64;
        }
    }
    let loss = if n_valid == 0 { 0.0 } else { (sum / n_valid as f64) as f32 };
    Ok(CeResult { loss, n_valid })
}

pub(crate) fn cross_entropy_backward(
    x: &[f32],
    rows: usize,
    cols: usize,
    labels: &[u32],
    from_probs: bool,
    ignore: Option<u32>,
    n_valid: usize,
    g: f32,
) -> Vec<f32> {
    let mut gx = vec![0.0f32; x.len()];
    if n_valid == 0 {
        return gx;
    }
    let scale = g / n_valid as f32;
    for r in 0..rows {
        if Some(labels[r]) == ignore {
            continue;
        }
        let row = &x[r * cols..(r + 1) * cols];
        let t = labels[r] as usize;
        if from_probs {
            let p = row[t];
            if (PROB_FLOOR..=1.0).contains(&p) {
                gx[r * cols + t] = -scale / p;
            }
        } else {
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut lse = 0.0f64;
            for &v in row {
                lse += ((v - mx) as f64).exp();
            }
            for c in 0..cols {
                let p = (((row[c] - mx) as f64).exp() / lse) as f32;
                gx[r * cols + c] = scale * (p - if c == t { 1.0 } else { 0.0 });
            }
        }
    }
    gx
}

// ── Pooling and upsampling ────────────────────────────────────────────────

pub(crate) fn maxpool2x_forward(x: &[f32], shape: &[usize]) -> Result<(Vec<f32>, Vec<u32>, Vec<usize>)> {
    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2x wants [n,c,even,even], got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for p in 0..n * c {
        let x_plane = &x[p * h * w..(p + 1) * h * w];
        let base = p * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (oy * 2 + dy) * w + ox * 2 + dx;
                        if x_plane[i] > best {
                            best = x_plane[i];
                            best_i = i as u32;
                        }
                    }
                }
                out[base + oy * wo + ox] = best;
                arg[base + oy * wo + ox] = best_i;
            }
        }
    }
    Ok((out, arg, vec![n, c, ho, wo]))
}

pub(crate) fn maxpool2x_backward(g: &[f32], arg: &[u32], in_shape: &[usize]) -> Vec<f32> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let plane_out = (h / 2) * (w / 2);
    let mut gx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        for i in 0..plane_out {
            gx[p * h * w + arg[p * plane_out + i] as usize] += g[p * plane_out + i];
        }
    }
    gx
}

pub(crate) fn upsample2x_forward(x: &[f32], shape: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("upsample2x wants 4-d input, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok((out, vec![n, c, 2 * h, 2 * w]))
}

pub(crate) fn upsample2x_backward(g: &[f32], in_shape: &[usize]) -> Vec<f32> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut gx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
            }
        }
    }
    gx
}

// ── Gather / concat / permute ─────────────────────────────────────────────

pub(crate) fn index_select_forward(
    x: &[f32],
    shape: &[usize],
    axis: usize,
    idx: &[usize],
) -> Result<(Vec<f32>, Vec<usize>)> {
    let (outer, m, inner) = axis_split(shape, axis);
    for &i in idx {
        if i >= m {
            return Err(Error::Dimension(format!(
                "index_select: index {i} out of range for axis extent {m}"
            )));
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = idx.len();
    let mut out = vec![0.0f32; outer * idx.len() * inner];
    for o in 0..outer {
        for (t, &i) in idx.iter().enumerate() {
            let src = &x[(o * m + i) * inner..(o * m + i + 1) * inner];
            let dst = &mut out[(o * idx.len() + t) * inner..(o * idx.len() + t + 1) * inner];
            dst.copy_from_slice(src);
        }
    }
    Ok((out, out_shape))
}

pub(crate) fn index_select_backward(
    g: &[f32],
    in_shape: &[usize],
    axis: usize,
    idx: &[usize],
) -> Vec<f32> {
    let (outer, m, inner) = axis_split(in_shape, axis);
    let mut gx = vec![0.0f32; in_shape.iter().product()];
    for o in 0..outer {
        for (t, &i) in idx.iter().enumerate() {
            let src = &g[(o * idx.len() + t) * inner..(o * idx.len() + t + 1) * inner];
            let dst = &mut gx[(o * m + i) * inner..(o * m + i + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    gx
}

pub(crate) fn concat_forward(
    parts: &[(&[f32], &[usize])],
    axis: usize,
) -> Result<(Vec<f32>, Vec<usize>)> {
    let first = parts[0].1;
    let mut total_axis = 0;
    for (_, s) in parts {
        if s.len() != first.len() {
            return Err(Error::shapes("concat rank mismatch", first, s));
        }
        for (d, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shapes("concat extents differ off-axis", first, s));
            }
        }
        total_axis += s[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = total_axis;
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut out = vec![0.0f32; out_shape.iter().product()];
    for o in 0..outer {
        let mut off = 0usize;
        for (data, s) in parts {
            let m = s[axis];
            let src = &data[o * m * inner..(o + 1) * m * inner];
            let dst = &mut out[(o * total_axis + off) * inner..(o * total_axis + off + m) * inner];
            dst.copy_from_slice(src);
            off += m;
        }
    }
    Ok((out, out_shape))
}

pub(crate) fn concat_backward(
    g: &[f32],
    out_shape: &[usize],
    part_shapes: &[&[usize]],
    axis: usize,
) -> Vec<Vec<f32>> {
    let (outer, total_axis, inner) = axis_split(out_shape, axis);
    let mut grads: Vec<Vec<f32>> = part_shapes
        .iter()
        .map(|s| vec![0.0f32; s.iter().product()])
        .collect();
    for o in 0..outer {
        let mut off = 0usize;
        for (p, s) in part_shapes.iter().enumerate() {
            let m = s[axis];
            let src = &g[(o * total_axis + off) * inner..(o * total_axis + off + m) * inner];
            grads[p][o * m * inner..(o + 1) * m * inner].copy_from_slice(src);
            off += m;
        }
    }
    grads
}

pub(crate) fn permute_forward(x: &[f32], shape: &[usize], order: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
    let in_strides = super::strides_of(shape);
    let out_strides = super::strides_of(&out_shape);
    let mut out = vec![0.0f32; x.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            src += c * in_strides[order[d]];
        }
        *slot = x[src];
    }
    (out, out_shape)
}

pub(crate) fn invert_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

// ── Feature-grid distances ────────────────────────────────────────────────

fn grid_transpose(x: &[f32], k: usize, cells: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; x.len()];
    for kk in 0..k {
        for i in 0..cells {
            t[i * k + kk] = x[kk * cells + i];
        }
    }
    t
}

/// Per-cell L2 distances between every cell of grid `a` and every cell of
/// grid `b`. Grids are `[k, h, w]`; the result is `[ha, wa, hb, wb]`.
pub(crate) fn distance_volume_forward(
    a: &[f32],
    ash: &[usize],
    b: &[f32],
    bsh: &[usize],
) -> Result<(Vec<f32>, Vec<usize>)> {
    if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
        return Err(Error::shapes("distance_volume wants [k,h,w] grids with equal k", ash, bsh));
    }
    let k = ash[0];
    let na = ash[1] * ash[2];
    let nb = bsh[1] * bsh[2];
    let at = grid_transpose(a, k, na);
    let bt = grid_transpose(b, k, nb);
    let mut out = vec![0.0f32; na * nb];
    for i in 0..na {
        let ai = &at[i * k..(i + 1) * k];
        let row = &mut out[i * nb..(i + 1) * nb];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = sq_dist8(ai, &bt[j * k..(j + 1) * k]).sqrt();
        }
    }
    Ok((out, vec![ash[1], ash[2], bsh[1], bsh[2]]))
}

pub(crate) fn distance_volume_backward(
    a: &[f32],
    ash: &[usize],
    b: &[f32],
    bsh: &[usize],
    dist: &[f32],
    g: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let k = ash[0];
    let na = ash[1] * ash[2];
    let nb = bsh[1] * bsh[2];
    let at = grid_transpose(a, k, na);
    let bt = grid_transpose(b, k, nb);
    let mut gat = vec![0.0f32; na * k];
    let mut gbt = vec![0.0f32; nb * k];
    for i in 0..na {
        let ai = &at[i * k..(i + 1) * k];
        for j in 0..nb {
            let gv = g[i * nb + j];
            if gv == 0.0 {
                continue;
            }
            let coef = gv / dist[i * nb + j].max(1e-12);
            let bj = &bt[j * k..(j + 1) * k];
            for kk in 0..k {
                let diff = coef * (ai[kk] - bj[kk]);
                gat[i * k + kk] += diff;
                gbt[j * k + kk] -= diff;
            }
        }
    }
    (grid_transpose(&gat, na, k), grid_transpose(&gbt, nb, k))
}

/// Per-cell L2 norm of the feature vector: the distance of each cell to the
/// all-zero feature.
pub(crate) fn feature_norms_forward(x: &[f32], shape: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("feature_norms wants [k,h,w], got {shape:?}")));
    }
    let (k, cells) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0f32; cells];
    for i in 0..cells {
        let mut acc = 0.0f32;
        for kk in 0..k {
            let v = x[kk * cells + i];
            acc += v * v;
        }
        out[i] = acc.sqrt();
    }
    Ok((out, vec![shape[1], shape[2]]))
}

pub(crate) fn feature_norms_backward(x: &[f32], shape: &[usize], norms: &[f32], g: &[f32]) -> Vec<f32> {
    let (k, cells) = (shape[0], shape[1] * shape[2]);
    let mut gx = vec![0.0f32; x.len()];
    for i in 0..cells {
        if g[i] == 0.0 {
            continue;
        }
        let coef = g[i] / norms[i].max(1e-12);
        for kk in 0..k {
            gx[kk * cells + i] = coef * x[kk * cells + i];
        }
    }
    gx
}

// ── Per-cell routing ──────────────────────────────────────────────────────

/// Forward the winning branch's feature vector at every cell, bit for bit.
pub(crate) fn select_per_cell_forward(
    inputs: &[&[f32]],
    shape: &[usize],
    winners: &[u32],
) -> Result<Vec<f32>> {
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("select_per_cell wants [k,h,w], got {shape:?}")));
    }
    let (k, cells) = (shape[0], shape[1] * shape[2]);
    if winners.len() != cells {
        return Err(Error::Dimension(format!(
            "select_per_cell: {} winners for {cells} cells",
            winners.len()
        )));
    }
    for &w in winners {
        if w as usize >= inputs.len() {
            return Err(Error::Dimension(format!(
                "select_per_cell: winner {w} out of range for {} branches",
                inputs.len()
            )));
        }
    }
    let mut out = vec![0.0f32; k * cells];
    for kk in 0..k {
        for i in 0..cells {
            out[kk * cells + i] = inputs[winners[i] as usize][kk * cells + i];
        }
    }
    Ok(out)
}

pub(crate) fn select_per_cell_backward(
    n_inputs: usize,
    shape: &[usize],
    winners: &[u32],
    g: &[f32],
) -> Vec<Vec<f32>> {
    let (k, cells) = (shape[0], shape[1] * shape[2]);
    let mut grads = vec![vec![0.0f32; k * cells]; n_inputs];
    for kk in 0..k {
        for i in 0..cells {
            grads[winners[i] as usize][kk * cells + i] = g[kk * cells + i];
        }
    }
    grads
}

pub(crate) fn sum_all(x: &[f32]) -> f32 {
    x.iter().map(|&v| v as f64).sum::<f64>() as f32
}
