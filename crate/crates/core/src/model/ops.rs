//! Single-sample layer primitives with explicit backward passes.
//!
//! Feature maps are channel-major `c x h x w` buffers. Every forward returns
//! whatever its backward needs; backward functions accumulate parameter
//! gradients into the provided slices and return the input gradient.

/// A channel-major feature map for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "buffer does not match {c}x{h}x{w}");
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` where `op` optionally
/// transposes. `A` is `m x k` after `op`, `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: dimensions and strides describe in-bounds views of the slices,
    // checked by the debug assertions above.
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

/// Cached input of a convolution: the im2col matrix (3x3) or the input
/// itself (1x1).
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    cin: usize,
    h: usize,
    w: usize,
}

fn im2col3(x: &Fmap) -> Vec<f32> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut col = vec![0.0f32; x.c * 9 * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im3(col: &[f32], cin: usize, h: usize, w: usize) -> Fmap {
    let hw = h * w;
    let mut out = Fmap::zeros(cin, h, w);
    for ci in 0..cin {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution with kernel 1 or 3. `weight` is
/// `cout x (cin * k * k)`.
pub fn conv_forward(x: &Fmap, weight: &[f32], bias: &[f32], cout: usize, k: usize) -> (Fmap, ConvCache) {
    let hw = x.hw();
    let cols = match k {
        1 => x.data.clone(),
        3 => im2col3(x),
        _ => panic!("unsupported kernel size {k}"),
    };
    let kk = x.c * k * k;
    let mut out = Fmap::zeros(cout, x.h, x.w);
    for (o, chunk) in out.data.chunks_exact_mut(hw).enumerate() {
        chunk.fill(bias[o]);
    }
    gemm(cout, kk, hw, weight, false, &cols, false, &mut out.data, 1.0);
    (out, ConvCache { cols, cin: x.c, h: x.h, w: x.w })
}

pub fn conv_backward(
    cache: &ConvCache,
    weight: &[f32],
    dout: &Fmap,
    k: usize,
    dweight: &mut [f32],
    dbias: &mut [f32],
) -> Fmap {
    let hw = cache.h * cache.w;
    let cout = dout.c;
    let kk = cache.cin * k * k;
    gemm(cout, hw, kk, &dout.data, false, &cache.cols, true, dweight, 1.0);
    for (o, chunk) in dout.data.chunks_exact(hw).enumerate() {
        dbias[o] += chunk.iter().sum::<f32>();
    }
    let mut dcols = vec![0.0f32; kk * hw];
    gemm(kk, cout, hw, weight, true, &dout.data, false, &mut dcols, 0.0);
    match k {
        1 => Fmap::new(cache.cin, cache.h, cache.w, dcols),
        _ => col2im3(&dcols, cache.cin, cache.h, cache.w),
    }
}

pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Per-sample, per-channel normalization with affine scale and shift.
pub fn instance_norm_forward(x: &Fmap, gamma: &[f32], beta: &[f32]) -> (Fmap, NormCache) {
    let hw = x.hw();
    let mut xhat = vec![0.0f32; x.data.len()];
    let mut inv_std = vec![0.0f32; x.c];
    let mut out = Fmap::zeros(x.c, x.h, x.w);
    for ch in 0..x.c {
        let src = &x.data[ch * hw..(ch + 1) * hw];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let is = 1.0 / (var + NORM_EPS as f64).sqrt();
        inv_std[ch] = is as f32;
        for i in 0..hw {
            let xh = ((src[i] as f64 - mean) * is) as f32;
            xhat[ch * hw + i] = xh;
            out.data[ch * hw + i] = gamma[ch] * xh + beta[ch];
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f32],
    dout: &Fmap,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Fmap {
    let hw = dout.hw();
    let n = hw as f32;
    let mut dx = dout.zeros_like();
    for ch in 0..dout.c {
        let dy = &dout.data[ch * hw..(ch + 1) * hw];
        let xh = &cache.xhat[ch * hw..(ch + 1) * hw];
        let (mut sum_dy, mut sum_dy_xh) = (0.0f32, 0.0f32);
        for i in 0..hw {
            sum_dy += dy[i];
            sum_dy_xh += dy[i] * xh[i];
        }
        dgamma[ch] += sum_dy_xh;
        dbeta[ch] += sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch] / n;
        let dst = &mut dx.data[ch * hw..(ch + 1) * hw];
        for i in 0..hw {
            dst[i] = scale * (n * dy[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Fmap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Fmap, dout: &mut Fmap) {
    for (g, &y) in dout.data.iter_mut().zip(&out.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns the pooled map and the argmax flat indices.
pub fn maxpool_forward(x: &Fmap) -> (Fmap, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Fmap::zeros(x.c, h2, w2);
    let mut arg = vec![0u32; x.c * h2 * w2];
    for ch in 0..x.c {
        let base = ch * x.hw();
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > best {
                        best = x.data[i];
                        bi = i;
                    }
                }
                let o = ch * h2 * w2 + y * w2 + xx;
                out.data[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(arg: &[u32], dout: &Fmap, c: usize, h: usize, w: usize) -> Fmap {
    let mut dx = Fmap::zeros(c, h, w);
    for (o, &i) in arg.iter().enumerate() {
        dx.data[i as usize] += dout.data[o];
    }
    dx
}

/// 2x2 stride-2 transposed convolution. `weight` is `(cout * 4) x cin`, row
/// `o * 4 + dy * 2 + dx`.
pub fn upconv_forward(x: &Fmap, weight: &[f32], bias: &[f32], cout: usize) -> Fmap {
    let hw = x.hw();
    let mut tmp = vec![0.0f32; cout * 4 * hw];
    gemm(cout * 4, x.c, hw, weight, false, &x.data, false, &mut tmp, 0.0);
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut out = Fmap::zeros(cout, h2, w2);
    for o in 0..cout {
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            let row = &tmp[(o * 4 + q) * hw..][..hw];
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.data[o * h2 * w2 + (2 * y + dy) * w2 + 2 * xx + dx] = row[y * x.w + xx] + bias[o];
                }
            }
        }
    }
    out
}

pub fn upconv_backward(x: &Fmap, weight: &[f32], dout: &Fmap, dweight: &mut [f32], dbias: &mut [f32]) -> Fmap {
    let hw = x.hw();
    let cout = dout.c;
    let (h2, w2) = (dout.h, dout.w);
    let mut dtmp = vec![0.0f32; cout * 4 * hw];
    for o in 0..cout {
        dbias[o] += dout.data[o * h2 * w2..(o + 1) * h2 * w2].iter().sum::<f32>();
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            let row = &mut dtmp[(o * 4 + q) * hw..][..hw];
            for y in 0..x.h {
                for xx in 0..x.w {
                    row[y * x.w + xx] = dout.data[o * h2 * w2 + (2 * y + dy) * w2 + 2 * xx + dx];
                }
            }
        }
    }
    gemm(cout * 4, hw, x.c, &dtmp, false, &x.data, true, dweight, 1.0);
    let mut dx = x.zeros_like();
    gemm(x.c, cout * 4, hw, weight, true, &dtmp, false, &mut dx.data, 0.0);
    dx
}

/// Channel-wise concatenation `[a; b]`.
pub fn concat(a: &Fmap, b: &Fmap) -> Fmap {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Fmap::new(a.c + b.c, a.h, a.w, data)
}

pub fn split(d: &Fmap, first_channels: usize) -> (Fmap, Fmap) {
    let cut = first_channels * d.hw();
    (
        Fmap::new(first_channels, d.h, d.w, d.data[..cut].to_vec()),
        Fmap::new(d.c - first_channels, d.h, d.w, d.data[cut..].to_vec()),
    )
}

pub fn global_avg_pool(x: &Fmap) -> Vec<f32> {
    let hw = x.hw();
    x.data.chunks_exact(hw).map(|c| c.iter().sum::<f32>() / hw as f32).collect()
}

pub fn global_avg_pool_backward(dpooled: &[f32], c: usize, h: usize, w: usize) -> Fmap {
    let hw = h * w;
    let mut dx = Fmap::zeros(c, h, w);
    for (ch, &g) in dpooled.iter().enumerate() {
        dx.data[ch * hw..(ch + 1) * hw].fill(g / hw as f32);
    }
    dx
}

/// `y = W x + b` with `W` stored `dout x din`.
pub fn linear_forward(x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut y = bias.to_vec();
    gemm(bias.len(), x.len(), 1, weight, false, x, false, &mut y, 1.0);
    y
}

pub fn linear_backward(x: &[f32], weight: &[f32], dy: &[f32], dweight: &mut [f32], dbias: &mut [f32]) -> Vec<f32> {
    gemm(dy.len(), 1, x.len(), dy, false, x, false, dweight, 1.0);
    dbias.iter_mut().zip(dy).for_each(|(b, g)| *b += g);
    let mut dx = vec![0.0f32; x.len()];
    gemm(x.len(), dy.len(), 1, weight, true, dy, false, &mut dx, 0.0);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(n: usize, seed: f32) -> Vec<f32> {
        (0..n).map(|i| ((i as f32 + 1.0) * 0.731 + seed).sin()).collect()
    }

    /// Central-difference check of a scalar function `sum(out * probe)`.
    fn fd_check(input: &mut [f32], analytic: &[f32], f: impl Fn(&[f32]) -> f32) {
        let h = 1e-2f32;
        for i in 0..input.len() {
            let orig = input[i];
            input[i] = orig + h;
            let plus = f(input);
            input[i] = orig - h;
            let minus = f(input);
            input[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let tol = 2e-2 * (1.0 + fd.abs());
            assert!((fd - analytic[i]).abs() < tol, "index {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    fn dot(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let x = Fmap::new(2, 3, 4, pattern(24, 0.1));
        let w = pattern(3 * 18, 0.7);
        let b = vec![0.1, -0.2, 0.3];
        let (y, _) = conv_forward(&x, &w, &b, 3, 3);
        for o in 0..3 {
            for yy in 0..3 {
                for xx in 0..4 {
                    let mut acc = b[o];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy >= 0 && sy < 3 && sx >= 0 && sx < 4 {
                                    acc += w[o * 18 + ci * 9 + ky * 3 + kx] * x.data[ci * 12 + sy as usize * 4 + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - y.data[o * 12 + yy * 4 + xx]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for k in [1, 3] {
            let cin = 2;
            let cout = 3;
            let mut xd = pattern(cin * 16, 0.2);
            let mut w = pattern(cout * cin * k * k, 0.5);
            let b = vec![0.0; cout];
            let probe = pattern(cout * 16, 0.9);
            let x = Fmap::new(cin, 4, 4, xd.clone());
            let (_, cache) = conv_forward(&x, &w, &b, cout, k);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; cout];
            let dx = conv_backward(&cache, &w, &Fmap::new(cout, 4, 4, probe.clone()), k, &mut dw, &mut db);
            let wc = w.clone();
            fd_check(&mut xd, &dx.data, |xs| dot(&conv_forward(&Fmap::new(cin, 4, 4, xs.to_vec()), &wc, &b, cout, k).0.data, &probe));
            let xc = x.clone();
            fd_check(&mut w, &dw, |ws| dot(&conv_forward(&xc, ws, &b, cout, k).0.data, &probe));
        }
    }

    #[test]
    fn instance_norm_gradients() {
        let mut xd = pattern(2 * 9, 0.3);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.1];
        let probe = pattern(18, 1.7);
        let (_, cache) = instance_norm_forward(&Fmap::new(2, 3, 3, xd.clone()), &gamma, &beta);
        let (mut dg, mut db) = (vec![0.0; 2], vec![0.0; 2]);
        let dx = instance_norm_backward(&cache, &gamma, &Fmap::new(2, 3, 3, probe.clone()), &mut dg, &mut db);
        fd_check(&mut xd, &dx.data, |xs| {
            dot(&instance_norm_forward(&Fmap::new(2, 3, 3, xs.to_vec()), &gamma, &beta).0.data, &probe)
        });
    }

    #[test]
    fn upconv_and_linear_gradients() {
        let mut xd = pattern(2 * 4, 0.4);
        let w = pattern(3 * 4 * 2, 0.8);
        let b = vec![0.0; 3];
        let probe = pattern(3 * 16, 0.2);
        let x = Fmap::new(2, 2, 2, xd.clone());
        let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 3]);
        let dx = upconv_backward(&x, &w, &Fmap::new(3, 4, 4, probe.clone()), &mut dw, &mut db);
        fd_check(&mut xd, &dx.data, |xs| dot(&upconv_forward(&Fmap::new(2, 2, 2, xs.to_vec()), &w, &b, 3).data, &probe));

        let mut v = pattern(5, 0.1);
        let lw = pattern(15, 0.3);
        let lb = vec![0.0; 3];
        let lp = pattern(3, 0.6);
        let (mut ldw, mut ldb) = (vec![0.0; 15], vec![0.0; 3]);
        let dv = linear_backward(&v, &lw, &lp, &mut ldw, &mut ldb);
        fd_check(&mut v, &dv, |xs| dot(&linear_forward(xs, &lw, &lb), &lp));
    }

    #[test]
    fn pooling_round_trip() {
        let x = Fmap::new(1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.data, vec![4.0]);
        let dx = maxpool_backward(&arg, &Fmap::new(1, 1, 1, vec![2.0]), 1, 2, 2);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
        let (a, b) = split(&concat(&x, &x.zeros_like()), 1);
        assert_eq!(a, x);
        assert_eq!(b.c, 1);
    }
}
