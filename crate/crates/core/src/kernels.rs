//! Raw slice kernels behind the graph ops: gemm, same-padded 2D convolution,
//! temporal convolution, pooling, and resampling.
//!
//! Activations use the `[frames, channels, height, width]` layout throughout;
//! 2D convolutions treat frames as a batch.

/// `C = alpha * A·B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
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
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output columns `[lo, hi)` whose source column `x + shift` lies inside `0..w`.
#[inline]
fn valid_range(w: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).clamp(0, w as isize) as usize;
    let hi = (w as isize - shift).clamp(0, w as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds one `[ci, h, w]` image into rows of `cols` (row stride `ld`, starting at
/// column `off`), one row per `(c, ky, kx)` tap.
fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, cols: &mut [f64], ld: usize, off: usize) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for c in 0..ci {
        let plane = &x[c * p..(c + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * ld + off..][..p];
                let shift = kx as isize - pad;
                let (lo, hi) = valid_range(w, shift);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let base = sy as usize * w;
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let s0 = (base as isize + lo as isize + shift) as usize;
                    dst[lo..hi].copy_from_slice(&plane[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into `dx`.
fn col2im(cols: &[f64], ci: usize, h: usize, w: usize, k: usize, dx: &mut [f64], ld: usize, off: usize) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for c in 0..ci {
        let plane = &mut dx[c * p..(c + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * ld + off..][..p];
                let shift = kx as isize - pad;
                let (lo, hi) = valid_range(w, shift);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (sy as usize * w) as isize + lo as isize + shift;
                    let dst = &mut plane[s0 as usize..s0 as usize + (hi - lo)];
                    for (d, g) in dst.iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 square convolution. `x: [b, ci, h, w]`, `wt: [co, ci, k, k]`.
/// For `k > 1` all frames are unfolded side by side and handled by one gemm.
pub fn conv2d_forward(
    x: &[f64],
    dims: [usize; 4],
    wt: &[f64],
    co: usize,
    k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let [b, ci, h, w] = dims;
    let p = h * w;
    let kk = ci * k * k;
    let mut out = vec![0.0; b * co * p];
    if k == 1 {
        for bi in 0..b {
            let xb = &x[bi * ci * p..(bi + 1) * ci * p];
            let ob = &mut out[bi * co * p..(bi + 1) * co * p];
            if let Some(bias) = bias {
                for (c, chunk) in ob.chunks_mut(p).enumerate() {
                    chunk.fill(bias[c]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(co, kk, p, wt, kk, 1, xb, p, 1, beta, ob, p, 1);
        }
        return out;
    }
    let ld = b * p;
    let mut cols = vec![0.0; kk * ld];
    for bi in 0..b {
        im2col(&x[bi * ci * p..(bi + 1) * ci * p], ci, h, w, k, &mut cols, ld, bi * p);
    }
    let mut tmp = vec![0.0; co * ld];
    gemm(co, kk, ld, wt, kk, 1, &cols, ld, 1, 0.0, &mut tmp, ld, 1);
    for bi in 0..b {
        for c in 0..co {
            let dst = &mut out[(bi * co + c) * p..(bi * co + c + 1) * p];
            let src = &tmp[c * ld + bi * p..c * ld + (bi + 1) * p];
            let bv = bias.map_or(0.0, |bb| bb[c]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is produced only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    dims: [usize; 4],
    wt: &[f64],
    co: usize,
    k: usize,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let [b, ci, h, w] = dims;
    let p = h * w;
    let kk = ci * k * k;
    if let Some(db) = db.as_deref_mut() {
        for bi in 0..b {
            for (c, chunk) in dy[bi * co * p..(bi + 1) * co * p].chunks(p).enumerate() {
                db[c] += chunk.iter().sum::<f64>();
            }
        }
    }
    if k == 1 {
        for bi in 0..b {
            let dyb = &dy[bi * co * p..(bi + 1) * co * p];
            if let Some(dw) = dw.as_deref_mut() {
                let xb = &x[bi * ci * p..(bi + 1) * ci * p];
                gemm(co, p, kk, dyb, p, 1, xb, 1, p, 1.0, dw, kk, 1);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(ci, co, p, wt, 1, kk, dyb, p, 1, 1.0, &mut dx[bi * ci * p..(bi + 1) * ci * p], p, 1);
            }
        }
        return;
    }
    let ld = b * p;
    // dy regrouped as [co, b·p] to match the unfolded column layout
    let mut dyt = vec![0.0; co * ld];
    for bi in 0..b {
        for c in 0..co {
            dyt[c * ld + bi * p..c * ld + (bi + 1) * p].copy_from_slice(&dy[(bi * co + c) * p..(bi * co + c + 1) * p]);
        }
    }
    if let Some(dw) = dw.as_deref_mut() {
        let mut cols = vec![0.0; kk * ld];
        for bi in 0..b {
            im2col(&x[bi * ci * p..(bi + 1) * ci * p], ci, h, w, k, &mut cols, ld, bi * p);
        }
        // dW[co, kk] += dy[co, n] · cols[kk, n]^T
        gemm(co, ld, kk, &dyt, ld, 1, &cols, 1, ld, 1.0, dw, kk, 1);
    }
    if let Some(dx) = dx.as_deref_mut() {
        let mut dcols = vec![0.0; kk * ld];
        gemm(kk, co, ld, wt, 1, kk, &dyt, ld, 1, 0.0, &mut dcols, ld, 1);
        for bi in 0..b {
            col2im(&dcols, ci, h, w, k, &mut dx[bi * ci * p..(bi + 1) * ci * p], ld, bi * p);
        }
    }
}

/// Convolution along the frame axis with a `1×1` spatial footprint and zero
/// padding of `kt / 2` frames. `x: [f, ci, h, w]`, `wt: [co, ci, kt]`.
pub fn temporal_conv_forward(
    x: &[f64],
    dims: [usize; 4],
    wt: &[f64],
    co: usize,
    kt: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let [f, ci, h, w] = dims;
    let p = h * w;
    let half = kt / 2;
    let mut out = vec![0.0; f * co * p];
    for fo in 0..f {
        let ob = &mut out[fo * co * p..(fo + 1) * co * p];
        if let Some(bias) = bias {
            for (c, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias[c]);
            }
        }
        for d in 0..kt {
            let fi = fo as isize + d as isize - half as isize;
            if fi < 0 || fi >= f as isize {
                continue;
            }
            let fi = fi as usize;
            let xb = &x[fi * ci * p..(fi + 1) * ci * p];
            // W_d[co, ci] lives at wt[co * ci * kt + ci * kt + d]
            gemm(co, ci, p, &wt[d..], ci * kt, kt, xb, p, 1, 1.0, ob, p, 1);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn temporal_conv_backward(
    x: &[f64],
    dims: [usize; 4],
    wt: &[f64],
    co: usize,
    kt: usize,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let [f, ci, h, w] = dims;
    let p = h * w;
    let half = kt / 2;
    for fo in 0..f {
        let dyb = &dy[fo * co * p..(fo + 1) * co * p];
        if let Some(db) = db.as_deref_mut() {
            for (c, chunk) in dyb.chunks(p).enumerate() {
                db[c] += chunk.iter().sum::<f64>();
            }
        }
        for d in 0..kt {
            let fi = fo as isize + d as isize - half as isize;
            if fi < 0 || fi >= f as isize {
                continue;
            }
            let fi = fi as usize;
            if let Some(dw) = dw.as_deref_mut() {
                let xb = &x[fi * ci * p..(fi + 1) * ci * p];
                gemm(co, p, ci, dyb, p, 1, xb, 1, p, 1.0, &mut dw[d..], ci * kt, kt);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[fi * ci * p..(fi + 1) * ci * p];
                gemm(ci, co, p, &wt[d..], kt, ci * kt, dyb, p, 1, 1.0, dxb, p, 1);
            }
        }
    }
}

/// 2×2 spatial average pooling; `h` and `w` must be even.
pub fn avg_pool2_forward(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [f, c, h, w] = dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; f * c * ho * wo];
    for plane in 0..f * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &[f64], dims: [usize; 4], dx: &mut [f64]) {
    let [f, c, h, w] = dims;
    let (ho, wo) = (h / 2, w / 2);
    for plane in 0..f * c {
        let g = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = 0.25 * g[y * wo + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] += v;
                dst[i + 1] += v;
                dst[i + w] += v;
                dst[i + w + 1] += v;
            }
        }
    }
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample2_forward(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [f, c, h, w] = dims;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; f * c * ho * wo];
    for plane in 0..f * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f64], dims: [usize; 4], dx: &mut [f64]) {
    let [f, c, h, w] = dims;
    let (ho, wo) = (2 * h, 2 * w);
    for plane in 0..f * c {
        let g = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += g[y * wo + xx];
            }
        }
    }
}

/// Visits every `(output, input)` index pair of space-to-depth by factor `r`:
/// `[f, c, h, w] -> [f, c*r*r, h/r, w/r]`.
#[inline]
fn for_each_unshuffle(dims: [usize; 4], r: usize, mut visit: impl FnMut(usize, usize)) {
    let [f, c, h, w] = dims;
    let (ho, wo) = (h / r, w / r);
    let mut out = 0;
    for fi in 0..f {
        for ci in 0..c {
            let plane = (fi * c + ci) * h * w;
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..ho {
                        let row = plane + (y * r + dy) * w + dx;
                        for xx in 0..wo {
                            visit(out, row + xx * r);
                            out += 1;
                        }
                    }
                }
            }
        }
    }
}

pub fn pixel_unshuffle(x: &[f64], dims: [usize; 4], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_unshuffle(dims, r, |o, i| out[o] = x[i]);
    out
}

/// Inverse of [`pixel_unshuffle`]; `original` is the `[f, c, h, w]` layout before unshuffling.
pub fn pixel_shuffle_into_original(y: &[f64], original: [usize; 4], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for_each_unshuffle(original, r, |o, i| out[i] = y[o]);
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

#[inline]
pub fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], dims: [usize; 4], wt: &[f64], co: usize, k: usize) -> Vec<f64> {
        let [b, ci, h, w] = dims;
        let pad = k as isize / 2;
        let mut out = vec![0.0; b * co * h * w];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * ci + c) * k + ky) * k + kx]
                                        * x[((bi * ci + c) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out[((bi * co + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        for k in [1, 3] {
            let dims = [2, 3, 5, 4];
            let x = ramp(2 * 3 * 5 * 4, 2.0);
            let wt = ramp(4 * 3 * k * k, 1.0);
            let fast = conv2d_forward(&x, dims, &wt, 4, k, None);
            let slow = naive_conv(&x, dims, &wt, 4, k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_conv_center_tap_is_pointwise() {
        let dims = [3, 2, 2, 2];
        let x = ramp(24, 1.0);
        // only the center tap is nonzero and equals identity
        let mut wt = vec![0.0; 2 * 2 * 3];
        wt[1] = 1.0; // co 0, ci 0, d 1
        wt[2 * 3 + 3 + 1] = 1.0; // co 1, ci 1, d 1
        let y = temporal_conv_forward(&x, dims, &wt, 2, 3, None);
        assert_eq!(y, x);
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle() {
        let dims = [2, 3, 4, 6];
        let x = ramp(2 * 3 * 4 * 6, 1.0);
        let u = pixel_unshuffle(&x, dims, 2);
        assert_ne!(u, x);
        assert_eq!(pixel_shuffle_into_original(&u, dims, 2), x);
    }

    #[test]
    fn pooling_averages_blocks() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(avg_pool2_forward(&x, [1, 1, 2, 2]), vec![2.5]);
        assert_eq!(upsample2_forward(&[7.0], [1, 1, 1, 1]), vec![7.0; 4]);
    }
}
