//! Layer kernels: forward passes that record what backward needs, and the
//! matching backward passes.

use crate::genome::Activation;

pub(crate) const LEAKY_SLOPE: f64 = 0.01;
pub(crate) const BN_EPS: f64 = 1e-5;

/// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and
/// `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above match the strides passed.
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

pub(crate) fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                LEAKY_SLOPE * x
            }
        }
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Tanh => x.tanh(),
    }
}

/// Derivative expressed through the pre-activation `x` and output `y`.
pub(crate) fn activate_grad(a: Activation, x: f64, y: f64) -> f64 {
    match a {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyRelu => {
            if x > 0.0 {
                1.0
            } else {
                LEAKY_SLOPE
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Tanh => 1.0 - y * y,
    }
}

/// Same-padded, stride-1 convolution geometry.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Unfolds one `[in_c, h, w]` sample into `[in_c·k·k, h·w]`.
    pub fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let pad = (k / 2) as isize;
        let hw = self.hw();
        for ci in 0..self.in_c {
            let plane = &input[ci * self.hw()..(ci + 1) * self.hw()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y + ki as isize - pad;
                        for x in 0..w {
                            let sx = x + kj as isize - pad;
                            dst[(y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                plane[(sy * w + sx) as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates into `grad_in`.
    pub fn col2im(&self, cols: &[f64], grad_in: &mut [f64]) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let pad = (k / 2) as isize;
        let hw = self.hw();
        for ci in 0..self.in_c {
            let plane = &mut grad_in[ci * self.hw()..(ci + 1) * self.hw()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y + ki as isize - pad;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x + kj as isize - pad;
                            if sx >= 0 && sx < w {
                                plane[(sy * w + sx) as usize] += src[(y * w + x) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel statistics over `[n, channels, spatial]` data.
pub(crate) struct BnForward {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn bn_train_forward(
    x: &[f64],
    n: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> BnForward {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            mean[c] += x[base..base + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            var[c] += x[base..base + spatial].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            for i in base..base + spatial {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    BnForward {
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns the input gradient and accumulates `dgamma` / `dbeta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_train_backward(
    cache: &BnForward,
    dy: &[f64],
    n: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let m = (n * spatial) as f64;
    let mut sum_dxhat = vec![0.0; channels];
    let mut sum_dxhat_xhat = vec![0.0; channels];
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            for i in base..base + spatial {
                dgamma[c] += dy[i] * cache.xhat[i];
                dbeta[c] += dy[i];
                let dxhat = dy[i] * gamma[c];
                sum_dxhat[c] += dxhat;
                sum_dxhat_xhat[c] += dxhat * cache.xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for s in 0..n {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            for i in base..base + spatial {
                let dxhat = dy[i] * gamma[c];
                dx[i] = cache.inv_std[c] / m
                    * (m * dxhat - sum_dxhat[c] - cache.xhat[i] * sum_dxhat_xhat[c]);
            }
        }
    }
    dx
}

/// 2×2 stride-2 max pool over `[n·c, h, w]` planes; returns argmax offsets.
pub(crate) fn maxpool_forward(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = vec![0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * xx + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                out[o] = src[best];
                arg[o] = p * h * w + best;
            }
        }
    }
    arg
}

/// Numerically stable softmax over each row of `[rows, cols]`.
pub(crate) fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

/// `ln Σ exp(row)` per row.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            in_c: 2,
            k: 3,
            h: 4,
            w: 5,
        };
        let x: Vec<f64> = (0..g.in_c * g.hw()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.hw()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_first_max_and_floors() {
        let x = [1.0, 3.0, 2.0, 3.0, 0.0, 0.0, 9.0, 1.0, 5.0];
        let mut out = [0.0; 1];
        let arg = maxpool_forward(&x, 1, 3, 3, &mut out);
        assert_eq!(out, [3.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1000.0, -1000.0, 0.0, 0.0, 3.0, 1.0], 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
