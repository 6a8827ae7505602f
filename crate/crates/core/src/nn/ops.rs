//! Layer kernels: forward and backward math on flat buffers.
//!
//! Convolutions use im2col plus a GEMM; everything here is deterministic
//! (fixed accumulation order) so that seeded runs reproduce bit-identically.

use crate::tensor::gemm;

/// y[n,j] = sum_i x[n,i] w[i,j] + b[j]; x is [n, in], w is [in, out].
pub fn dense_forward(x: &[f64], n: usize, in_dim: usize, out_dim: usize, w: &[f64], b: &[f64], y: &mut [f64]) {
    for row in y.chunks_exact_mut(out_dim) {
        row.copy_from_slice(b);
    }
    gemm(n, in_dim, out_dim, x, false, w, false, 1.0, y);
}

/// Fills dw [in, out], db [out] and dx [n, in] from dy [n, out].
pub fn dense_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    in_dim: usize,
    out_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    // dw = x^T * dy
    gemm(in_dim, n, out_dim, x, true, dy, false, 0.0, dw);
    // db = column sums of dy
    db.iter_mut().for_each(|v| *v = 0.0);
    for row in dy.chunks_exact(out_dim) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    // dx = dy * w^T
    gemm(n, out_dim, in_dim, dy, false, w, true, 0.0, dx);
}

/// Unrolls a `[n, c, h, w]` input into `[n*h*w, c*k*k]` patch rows for a
/// stride-1 convolution with "same" zero padding (k odd).
pub fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = k / 2;
    let patch = c * k * k;
    assert_eq!(cols.len(), n * h * w * patch);
    cols.iter_mut().for_each(|v| *v = 0.0);
    for img in 0..n {
        let x_img = &x[img * c * h * w..(img + 1) * c * h * w];
        let cols_img = &mut cols[img * h * w * patch..(img + 1) * h * w * patch];
        for oy in 0..h {
            for ox in 0..w {
                let row = &mut cols_img[(oy * w + ox) * patch..(oy * w + ox + 1) * patch];
                for ch in 0..c {
                    let plane = &x_img[ch * h * w..(ch + 1) * h * w];
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[ch * k * k + ky * k + kx] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch-row gradients back onto the input image layout.
pub fn col2im_add(dcols: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let patch = c * k * k;
    for img in 0..n {
        let dx_img = &mut dx[img * c * h * w..(img + 1) * c * h * w];
        let dcols_img = &dcols[img * h * w * patch..(img + 1) * h * w * patch];
        for oy in 0..h {
            for ox in 0..w {
                let row = &dcols_img[(oy * w + ox) * patch..(oy * w + ox + 1) * patch];
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx_img[ch * h * w + iy as usize * w + ix as usize] +=
                                row[ch * k * k + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward on prepared im2col rows. `w` is `[oc, c*k*k]`
/// row-major, output is `[n, oc, h, w]`.
pub fn conv_forward_from_cols(
    cols: &[f64],
    n: usize,
    oc: usize,
    h: usize,
    w_dim: usize,
    patch: usize,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    out_rows: &mut [f64],
) {
    let rows = n * h * w_dim;
    // out_rows[(n,y,x), oc] = cols * w^T
    gemm(rows, patch, oc, cols, false, w, true, 0.0, out_rows);
    // rearrange to [n, oc, h, w] and add bias
    let plane = h * w_dim;
    for img in 0..n {
        for ch in 0..oc {
            let dst = &mut out[(img * oc + ch) * plane..(img * oc + ch + 1) * plane];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = out_rows[(img * plane + p) * oc + ch] + b[ch];
            }
        }
    }
}

/// Backward for the conv layer. Produces dw `[oc, patch]`, db `[oc]` and the
/// patch-row gradient `dcols` (to be scattered by `col2im_add`).
pub fn conv_backward(
    cols: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    oc: usize,
    h: usize,
    w_dim: usize,
    patch: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dcols: &mut [f64],
    dy_rows: &mut [f64],
) {
    let rows = n * h * w_dim;
    let plane = h * w_dim;
    // rearrange dy [n, oc, h, w] into [(n,y,x), oc] rows
    for img in 0..n {
        for ch in 0..oc {
            let src = &dy[(img * oc + ch) * plane..(img * oc + ch + 1) * plane];
            for (p, &g) in src.iter().enumerate() {
                dy_rows[(img * plane + p) * oc + ch] = g;
            }
        }
    }
    // dw = dy_rows^T * cols  -> [oc, patch]
    gemm(oc, rows, patch, dy_rows, true, cols, false, 0.0, dw);
    // db[ch] = sum of dy over batch and positions
    db.iter_mut().for_each(|v| *v = 0.0);
    for row in dy_rows.chunks_exact(oc) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    // dcols = dy_rows * w -> [rows, patch]
    gemm(rows, oc, patch, dy_rows, false, w, false, 0.0, dcols);
}

/// 2x2 max pooling with stride 2 (odd trailing row/column ignored).
/// Records the flat input index of each selected maximum; ties go to the
/// lowest index.
pub fn maxpool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let oh = h / 2;
    let ow = w / 2;
    let mut o = 0;
    for img in 0..n {
        for ch in 0..c {
            let plane = &x[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            let base = (img * c + ch) * h * w;
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (py * 2 + dy) * w + (px * 2 + dx);
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = (base + idx) as u32;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
}

/// Routes each pooled gradient back to the input position that won the max.
pub fn maxpool_backward(dy: &[f64], argmax: &[u32], dx: &mut [f64]) {
    dx.iter_mut().for_each(|v| *v = 0.0);
    for (&g, &idx) in dy.iter().zip(argmax) {
        dx[idx as usize] += g;
    }
}

pub fn relu_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// Subgradient 0 at the kink: gradients pass only where the input was > 0.
pub fn relu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dy) {
        *d = if v > 0.0 { g } else { 0.0 };
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits: (softmax - onehot) / n.
pub fn softmax_ce(logits: &[f64], labels: &[usize], n: usize, classes: usize, dlogits: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for (i, row) in logits.chunks_exact(classes).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let drow = &mut dlogits[i * classes..(i + 1) * classes];
        for (d, &z) in drow.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        let label = labels[i];
        loss -= (drow[label] / sum).ln();
        let inv = 1.0 / (sum * n as f64);
        for d in drow.iter_mut() {
            *d *= inv;
        }
        drow[label] -= 1.0 / n as f64;
    }
    loss / n as f64
}

/// Index of the row maximum (lowest index on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_forward_identity() {
        // 2x2 identity weights, zero bias: output equals input.
        let w = [1.0, 0.0, 0.0, 1.0];
        let b = [0.0, 0.0];
        let x = [1.0, 0.0];
        let mut y = [0.0, 0.0];
        dense_forward(&x, 1, 2, 2, &w, &b, &mut y);
        assert_eq!(y, [1.0, 0.0]);
    }

    #[test]
    fn im2col_center_pixel() {
        // 1x1x3x3 input, k=3: the patch row at the center is the whole image.
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut cols = vec![0.0; 9 * 9];
        im2col(&x, 1, 1, 3, 3, 3, &mut cols);
        let center = &cols[4 * 9..5 * 9];
        assert_eq!(center, x.as_slice());
        // top-left patch has zero padding on its first row and column
        let tl = &cols[0..9];
        assert_eq!(tl, &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn maxpool_picks_first_max_on_ties() {
        let x = [5.0, 5.0, 5.0, 5.0];
        let mut out = [0.0];
        let mut arg = [0u32];
        maxpool_forward(&x, 1, 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 5.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_classes() {
        let logits = [0.0; 10];
        let mut d = [0.0; 10];
        let loss = softmax_ce(&logits, &[3], 1, 10, &mut d);
        assert!((loss - 10.0_f64.ln()).abs() < 1e-15);
        // gradient sums to zero
        assert!(d.iter().sum::<f64>().abs() < 1e-15);
    }
}
