//! Dense kernels for the hybrid network. Matrices are row-major `f64`.

/// `C = beta·C + op(A)·op(B)` with `op(A)` of shape `m×k` and `op(B)` `k×n`.
/// With `ta`, `a` is stored `k×m`; with `tb`, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover every index reached through these strides.
    unsafe {
        matrixmultiply::dgemm(
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

/// `y = x·W + b` for `x` of shape `rows×inp`.
pub fn linear(x: &[f64], rows: usize, inp: usize, w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(b);
        }
        gemm(rows, inp, out, x, false, w, false, &mut y, 1.0);
    } else {
        gemm(rows, inp, out, x, false, w, false, &mut y, 0.0);
    }
    y
}

/// Backward of [`linear`]: accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    inp: usize,
    w: &[f64],
    out: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    want_dx: bool,
) -> Vec<f64> {
    gemm(inp, rows, out, x, true, dy, false, dw, 1.0);
    if let Some(db) = db {
        for r in 0..rows {
            for (g, &v) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
                *g += v;
            }
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; rows * inp];
    gemm(rows, out, inp, dy, false, w, true, &mut dx, 0.0);
    dx
}

pub const LN_EPS: f64 = 1e-5;

pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], rows: usize, h: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * h];
    let mut xhat = vec![0.0; rows * h];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let mean = xr.iter().sum::<f64>() / h as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..h {
            let xh = (xr[c] - mean) * rs;
            xhat[r * h + c] = xh;
            y[r * h + c] = xh * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    rows: usize,
    h: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * h];
    let mut dxhat = vec![0.0; h];
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &cache.xhat[r * h..(r + 1) * h];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..h {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= h as f64;
        mean_dx /= h as f64;
        let rs = cache.rstd[r];
        for c in 0..h {
            dx[r * h + c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// `tanh` through one `exp`; several times cheaper than `f64::tanh`.
#[inline]
fn fast_tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    let e = (2.0 * z).exp();
    (e - 1.0) / (e + 1.0)
}

/// Tanh-approximated GELU; also returns the inner `tanh` for the backward pass.
#[inline]
pub fn gelu_with_tanh(u: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_C * (u + 0.044715 * u * u * u));
    (0.5 * u * (1.0 + t), t)
}

#[cfg(test)]
pub fn gelu(u: f64) -> f64 {
    gelu_with_tanh(u).0
}

/// Derivative of [`gelu`] given `u` and the cached inner `tanh`.
#[inline]
pub fn gelu_grad_cached(u: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[cfg(test)]
pub fn gelu_grad(u: f64) -> f64 {
    gelu_grad_cached(u, gelu_with_tanh(u).1)
}

/// Strided `C = beta·C + A·B`; `(rs, cs)` are row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index reached through the strides.
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

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences of length `t`. With `causal`, row `a` only sees rows `≤ a`.
/// Returns the context (`batch·t × h`) and the attention probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    t: usize,
    h: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let hd = h / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![0.0; batch * t * h];
    let mut probs = vec![0.0; batch * heads * t * t];
    for b in 0..batch {
        for hh in 0..heads {
            let base = b * t * h + hh * hd;
            let pb = (b * heads + hh) * t * t;
            let p = &mut probs[pb..pb + t * t];
            // Scores Q·Kᵀ.
            gemm_strided(t, hd, t, &q[base..], (h, 1), &k[base..], (1, h), p, (t, 1), 0.0);
            for a in 0..t {
                let span = if causal { a + 1 } else { t };
                let row = &mut p[a * t..(a + 1) * t];
                let mx = row[..span].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut z = 0.0;
                for x in row[..span].iter_mut() {
                    *x = (*x * scale - mx).exp();
                    z += *x;
                }
                let inv = 1.0 / z;
                row[..span].iter_mut().for_each(|x| *x *= inv);
                row[span..].iter_mut().for_each(|x| *x = 0.0);
            }
            gemm_strided(t, t, hd, p, (t, 1), &v[base..], (h, 1), &mut ctx[base..], (h, 1), 0.0);
        }
    }
    (ctx, probs)
}

/// Backward of [`attention`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dctx: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    batch: usize,
    t: usize,
    h: usize,
    heads: usize,
    _causal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Masked probabilities are exactly zero, so the causal case needs no special handling.
    let hd = h / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = batch * t * h;
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut ds = vec![0.0; t * t];
    for b in 0..batch {
        for hh in 0..heads {
            let base = b * t * h + hh * hd;
            let pb = (b * heads + hh) * t * t;
            let p = &probs[pb..pb + t * t];
            // dP = dctx·Vᵀ, dV = Pᵀ·dctx.
            gemm_strided(t, hd, t, &dctx[base..], (h, 1), &v[base..], (1, h), &mut ds, (t, 1), 0.0);
            gemm_strided(t, t, hd, p, (1, t), &dctx[base..], (h, 1), &mut dv[base..], (h, 1), 0.0);
            for a in 0..t {
                let pr = &p[a * t..(a + 1) * t];
                let dr = &mut ds[a * t..(a + 1) * t];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ = dS·K, dK = dSᵀ·Q.
            gemm_strided(t, t, hd, &ds, (t, 1), &k[base..], (h, 1), &mut dq[base..], (h, 1), 0.0);
            gemm_strided(t, t, hd, &ds, (1, t), &q[base..], (h, 1), &mut dk[base..], (h, 1), 0.0);
        }
    }
    (dq, dk, dv)
}

/// `log softmax(logits)[target]` and the softmax row.
pub fn log_softmax_at(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let lp = logits[target] - mx - z.ln();
    (lp, e.into_iter().map(|v| v / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // Aᵀ·A, A stored 2×3.
        let mut c = [0.0; 9];
        gemm(3, 2, 3, &a, true, &a, false, &mut c, 0.0);
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        // A·Aᵀ.
        let mut c = [1.0; 4];
        gemm(2, 3, 2, &a, false, &a, true, &mut c, 1.0);
        assert_eq!(c, [15.0, 33.0, 33.0, 78.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn causal_attention_first_row_copies_value() {
        let h = 4;
        let q: Vec<f64> = (0..3 * h).map(|v| v as f64 * 0.1).collect();
        let k = q.iter().map(|v| v * 0.5).collect::<Vec<_>>();
        let v: Vec<f64> = (0..3 * h).map(|v| (v as f64).sin()).collect();
        let (ctx, _) = attention(&q, &k, &v, 1, 3, h, 2, true);
        assert_eq!(&ctx[..h], &v[..h]);
    }
}
