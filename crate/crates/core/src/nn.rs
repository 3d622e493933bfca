//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Tensors are single samples stored channel-major (`[c][h][w]`). Parameters
//! live in one flat vector; each layer records offsets into it, so a network
//! is a layout plus a slice. Everything is generic over [`Real`] so that the
//! same code runs in `f32` for training and in `f64` for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Real: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m x n) = op(A) * op(B) + beta * C` where `op(A)` is `m x k`.
/// With `ta`, `A` is stored `k x m`; with `tb`, `B` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[F], b: &[F], beta: F, c: &mut [F]) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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
        )
    }
}

/// Hands out consecutive parameter offsets while a layout is being built.
#[derive(Debug, Default)]
pub struct ParamCursor(usize);

impl ParamCursor {
    pub fn take(&mut self, n: usize) -> usize {
        let at = self.0;
        self.0 += n;
        at
    }

    pub fn total(&self) -> usize {
        self.0
    }
}

/// Same-padded square convolution with kernel 1 or 3.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    w: usize,
    b: usize,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, k: usize, cursor: &mut ParamCursor) -> Self {
        assert!(k == 1 || k == 3, "kernel must be 1 or 3");
        let w = cursor.take(cout * cin * k * k);
        let b = cursor.take(cout);
        Self { cin, cout, k, w, b }
    }

    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn init<F: Real>(&self, p: &mut [F], rng: &mut ChaCha8Rng, gain: f64) {
        let std = gain / (self.fan_in() as f64).sqrt();
        for v in &mut p[self.w..self.w + self.cout * self.fan_in()] {
            let z: f64 = StandardNormal.sample(rng);
            *v = F::from_f64_lossy(z * std);
        }
        p[self.b..self.b + self.cout].iter_mut().for_each(|v| *v = F::zero());
    }

    pub fn zero<F: Real>(&self, p: &mut [F]) {
        p[self.w..self.w + self.cout * self.fan_in()]
            .iter_mut()
            .for_each(|v| *v = F::zero());
        p[self.b..self.b + self.cout].iter_mut().for_each(|v| *v = F::zero());
    }

    /// Returns the output and the cached lowered input for backward.
    pub fn forward<F: Real>(&self, p: &[F], x: &[F], h: usize, w: usize) -> (Vec<F>, Vec<F>) {
        let hw = h * w;
        debug_assert_eq!(x.len(), self.cin * hw);
        let cols = if self.k == 3 {
            im2col(x, self.cin, h, w)
        } else {
            x.to_vec()
        };
        let mut y = vec![F::zero(); self.cout * hw];
        gemm(
            false,
            false,
            self.cout,
            self.fan_in(),
            hw,
            &p[self.w..],
            &cols,
            F::zero(),
            &mut y,
        );
        for (c, row) in y.chunks_mut(hw).enumerate() {
            let bias = p[self.b + c];
            row.iter_mut().for_each(|v| *v = *v + bias);
        }
        (y, cols)
    }

    /// Forward without keeping the lowered input.
    pub fn apply<F: Real>(&self, p: &[F], x: &[F], h: usize, w: usize) -> Vec<F> {
        self.forward(p, x, h, w).0
    }

    /// Accumulates parameter gradients into `g` and returns the input
    /// gradient when `need_dx`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<F: Real>(
        &self,
        p: &[F],
        g: &mut [F],
        cols: &[F],
        dy: &[F],
        h: usize,
        w: usize,
        need_dx: bool,
    ) -> Option<Vec<F>> {
        let hw = h * w;
        let fan = self.fan_in();
        gemm(false, true, self.cout, hw, fan, dy, cols, F::one(), &mut g[self.w..]);
        for (c, row) in dy.chunks(hw).enumerate() {
            g[self.b + c] = g[self.b + c] + row.iter().copied().sum::<F>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![F::zero(); fan * hw];
        gemm(true, false, fan, self.cout, hw, &p[self.w..], dy, F::zero(), &mut dcols);
        Some(if self.k == 3 {
            col2im(&dcols, self.cin, h, w)
        } else {
            dcols
        })
    }
}

fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut cols = vec![F::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..][..w];
                    let dst_row = &mut dst[y * w..][..w];
                    match kx {
                        0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                        1 => dst_row.copy_from_slice(src_row),
                        _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut x = vec![F::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..][..w];
                    let src_row = &src[y * w..][..w];
                    match kx {
                        0 => add_into(&mut dst_row[..w - 1], &src_row[1..]),
                        1 => add_into(dst_row, src_row),
                        _ => add_into(&mut dst_row[1..], &src_row[..w - 1]),
                    }
                }
            }
        }
    }
    x
}

pub fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new(nin: usize, nout: usize, cursor: &mut ParamCursor) -> Self {
        let w = cursor.take(nin * nout);
        let b = cursor.take(nout);
        Self { nin, nout, w, b }
    }

    pub fn init<F: Real>(&self, p: &mut [F], rng: &mut ChaCha8Rng, gain: f64) {
        let std = gain / (self.nin as f64).sqrt();
        for v in &mut p[self.w..self.w + self.nin * self.nout] {
            let z: f64 = StandardNormal.sample(rng);
            *v = F::from_f64_lossy(z * std);
        }
        p[self.b..self.b + self.nout].iter_mut().for_each(|v| *v = F::zero());
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F]) -> Vec<F> {
        (0..self.nout)
            .map(|o| {
                let row = &p[self.w + o * self.nin..][..self.nin];
                row.iter().zip(x).fold(p[self.b + o], |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    pub fn backward<F: Real>(&self, g: &mut [F], x: &[F], dy: &[F]) {
        for (o, &d) in dy.iter().enumerate() {
            let row = &mut g[self.w + o * self.nin..][..self.nin];
            row.iter_mut().zip(x).for_each(|(gw, &xi)| *gw = *gw + d * xi);
            g[self.b + o] = g[self.b + o] + d;
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dx = dy * silu'(pre)`.
pub fn silu_backward<F: Real>(pre: &[F], dy: &[F]) -> Vec<F> {
    pre.iter()
        .zip(dy)
        .map(|(&x, &d)| {
            let s = sigmoid(x);
            d * s * (F::one() + x * (F::one() - s))
        })
        .collect()
}

/// Adds a per-channel bias in place.
pub fn add_channel_bias<F: Real>(x: &mut [F], bias: &[F], hw: usize) {
    for (row, &b) in x.chunks_mut(hw).zip(bias) {
        row.iter_mut().for_each(|v| *v = *v + b);
    }
}

pub fn channel_sums<F: Real>(x: &[F], hw: usize) -> Vec<F> {
    x.chunks(hw).map(|row| row.iter().copied().sum()).collect()
}

/// 2x2 average pooling.
pub fn avg_pool2<F: Real>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut y = vec![F::zero(); c * oh * ow];
    for ci in 0..c {
        let src = &x[ci * h * w..];
        let dst = &mut y[ci * oh * ow..];
        for yy in 0..oh {
            for xx in 0..ow {
                let s = src[2 * yy * w + 2 * xx]
                    + src[2 * yy * w + 2 * xx + 1]
                    + src[(2 * yy + 1) * w + 2 * xx]
                    + src[(2 * yy + 1) * w + 2 * xx + 1];
                dst[yy * ow + xx] = s * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<F: Real>(dy: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut dx = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                dx[ci * h * w + yy * w + xx] = dy[ci * oh * ow + (yy / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling; `h`, `w` are the input dimensions.
pub fn upsample2<F: Real>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h * 2, w * 2);
    let mut y = vec![F::zero(); c * oh * ow];
    for ci in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                y[ci * oh * ow + yy * ow + xx] = x[ci * h * w + (yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Real>(dy: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h * 2, w * 2);
    let mut dx = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                let d = &mut dx[ci * h * w + (yy / 2) * w + xx / 2];
                *d = *d + dy[ci * oh * ow + yy * ow + xx];
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_embedding<F: Real>(t: f64, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut e = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        e.push(F::from_f64_lossy((t * freq).sin()));
        e.push(F::from_f64_lossy((t * freq).cos()));
    }
    e.resize(dim, F::zero());
    e
}

/// Update rule applied to a flat `f32` parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        m: Vec<f32>,
        v: Vec<f32>,
        step: i32,
    },
}

impl Optimizer {
    pub fn sgd(lr: f32) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f32, n: usize) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        match self {
            Optimizer::Sgd { lr } => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= *lr * g);
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                step,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    params[i] -= *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[]);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a = rand_vec(m * k, 1);
        let b = rand_vec(k * n, 2);
        let mut c = vec![0.0; m * n];
        gemm(false, false, m, k, n, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // A stored transposed (k x m), B stored transposed (n x k)
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(true, true, m, k, n, &at, &bt, 0.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut cur = ParamCursor::default();
        let conv = Conv::new(2, 3, 3, &mut cur);
        let p = rand_vec(cur.total(), 3);
        let (h, w) = (4, 5);
        let x = rand_vec(2 * h * w, 4);
        let y = conv.apply(&p, &x, h, w);
        for co in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let mut s = p[conv.b + co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += p[conv.w + ((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    assert!((y[co * h * w + yy * w + xx] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 3, 4);
        let x = rand_vec(c * h * w, 5);
        let d = rand_vec(c * 9 * h * w, 6);
        let lhs: f64 = im2col(&x, c, h, w).iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&d, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_pairs() {
        let (c, h, w) = (2, 4, 6);
        let x = rand_vec(c * h * w, 7);
        let d = rand_vec(c * h * w / 4, 8);
        let lhs: f64 = avg_pool2(&x, c, h, w).iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&avg_pool2_backward(&d, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let small = rand_vec(c * 2 * 3, 9);
        let big = rand_vec(c * 4 * 6, 10);
        let lhs: f64 = upsample2(&small, c, 2, 3).iter().zip(&big).map(|(a, b)| a * b).sum();
        let rhs: f64 = small
            .iter()
            .zip(&upsample2_backward(&big, c, 2, 3))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_matches_differences() {
        let xs = [-3.0, -0.5, 0.0, 0.7, 2.5];
        let h = 1e-6;
        let d = silu_backward(&xs, &[1.0; 5]);
        for (i, &x) in xs.iter().enumerate() {
            let fd = (silu(&[x + h])[0] - silu(&[x - h])[0]) / (2.0 * h);
            assert!((fd - d[i]).abs() < 1e-8);
        }
    }
}
