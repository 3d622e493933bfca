//! Three-level convolutional encoder-decoder with skip connections and a
//! sinusoidal timestep embedding injected as per-channel biases.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{self, Conv, Dense, ParamCursor, Real};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetArch {
    pub size: usize,
    pub widths: [usize; 3],
    pub time_dim: usize,
}

impl UNetArch {
    pub fn new(size: usize, widths: [usize; 3], time_dim: usize) -> Result<Self> {
        let arch = Self { size, widths, time_dim };
        arch.validate()?;
        Ok(arch)
    }

    /// Default desk-scale architecture for a grid size.
    pub fn desk(size: usize) -> Self {
        Self {
            size,
            widths: [16, 32, 64],
            time_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "grid size {} must be a positive multiple of 4",
                self.size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dim {} must be even and >= 2",
                self.time_dim
            )));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).n_params
    }
}

impl fmt::Display for UNetArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.widths;
        write!(f, "unet3 size={} widths={a},{b},{c} time={}", self.size, self.time_dim)
    }
}

impl FromStr for UNetArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::IncompatibleCheckpoint(format!("unrecognized denoiser descriptor {s:?}"));
        let mut parts = s.split_whitespace();
        if parts.next() != Some("unet3") {
            return Err(bad());
        }
        let (mut size, mut widths, mut time) = (None, None, None);
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            match key {
                "size" => size = Some(value.parse().map_err(|_| bad())?),
                "time" => time = Some(value.parse().map_err(|_| bad())?),
                "widths" => {
                    let w: Vec<usize> = value
                        .split(',')
                        .map(|v| v.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    widths = Some(<[usize; 3]>::try_from(w).map_err(|_| bad())?);
                }
                _ => return Err(bad()),
            }
        }
        UNetArch::new(size.ok_or_else(bad)?, widths.ok_or_else(bad)?, time.ok_or_else(bad)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    arch: UNetArch,
    conv_in: Conv,
    conv_down: Conv,
    conv_mid_a: Conv,
    conv_mid_b: Conv,
    conv_up_a: Conv,
    conv_up_b: Conv,
    conv_out: Conv,
    /// Time projections for in, down, mid, up_a, up_b.
    time: [Dense; 5],
    pub(crate) n_params: usize,
}

impl Layout {
    pub(crate) fn new(arch: &UNetArch) -> Self {
        let [c1, c2, c3] = arch.widths;
        let e = arch.time_dim;
        let mut cur = ParamCursor::default();
        let conv_in = Conv::new(1, c1, 3, &mut cur);
        let conv_down = Conv::new(c1, c2, 3, &mut cur);
        let conv_mid_a = Conv::new(c2, c3, 3, &mut cur);
        let conv_mid_b = Conv::new(c3, c3, 3, &mut cur);
        let conv_up_a = Conv::new(c3 + c2, c2, 3, &mut cur);
        let conv_up_b = Conv::new(c2 + c1, c1, 3, &mut cur);
        let conv_out = Conv::new(c1, 1, 3, &mut cur);
        let time = [c1, c2, c3, c2, c1].map(|c| Dense::new(e, c, &mut cur));
        Self {
            arch: *arch,
            conv_in,
            conv_down,
            conv_mid_a,
            conv_mid_b,
            conv_up_a,
            conv_up_b,
            conv_out,
            time,
            n_params: cur.total(),
        }
    }

    /// Random initialization with a zeroed output layer (the untrained net
    /// predicts zero noise).
    pub(crate) fn init(&self, seed: u64) -> Vec<f32> {
        let mut p = vec![0.0f32; self.n_params];
        let mut r = rng::stream(seed, &[0xd1]);
        let gain = 2f64.sqrt();
        for conv in [
            &self.conv_in,
            &self.conv_down,
            &self.conv_mid_a,
            &self.conv_mid_b,
            &self.conv_up_a,
            &self.conv_up_b,
        ] {
            conv.init(&mut p, &mut r, gain);
        }
        for d in &self.time {
            d.init(&mut p, &mut r, 1.0);
        }
        self.conv_out.zero(&mut p);
        p
    }

    /// Randomizes every parameter including the output layer.
    #[cfg(test)]
    pub(crate) fn init_dense(&self, seed: u64) -> Vec<f32> {
        let mut p = self.init(seed);
        let mut r = rng::stream(seed, &[0xd2]);
        self.conv_out.init(&mut p, &mut r, 1.0);
        p
    }

    pub(crate) fn forward<F: Real>(&self, p: &[F], x: &[F], t: f64) -> (Vec<F>, Cache<F>) {
        let n = self.arch.size;
        let (n2, n4) = (n / 2, n / 4);
        let [c1, c2, c3] = self.arch.widths;
        let emb: Vec<F> = nn::timestep_embedding(t, self.arch.time_dim);
        let tb: Vec<Vec<F>> = self.time.iter().map(|d| d.forward(p, &emb)).collect();

        let (mut a1, cols_in) = self.conv_in.forward(p, x, n, n);
        nn::add_channel_bias(&mut a1, &tb[0], n * n);
        let h1 = nn::silu(&a1);
        let p1 = nn::avg_pool2(&h1, c1, n, n);

        let (mut a2, cols_down) = self.conv_down.forward(p, &p1, n2, n2);
        nn::add_channel_bias(&mut a2, &tb[1], n2 * n2);
        let h2 = nn::silu(&a2);
        let p2 = nn::avg_pool2(&h2, c2, n2, n2);

        let (mut a3, cols_mid_a) = self.conv_mid_a.forward(p, &p2, n4, n4);
        nn::add_channel_bias(&mut a3, &tb[2], n4 * n4);
        let h3 = nn::silu(&a3);
        let (a4, cols_mid_b) = self.conv_mid_b.forward(p, &h3, n4, n4);
        let h4 = nn::silu(&a4);

        let mut cat2 = nn::upsample2(&h4, c3, n4, n4);
        cat2.extend_from_slice(&h2);
        let (mut a5, cols_up_a) = self.conv_up_a.forward(p, &cat2, n2, n2);
        nn::add_channel_bias(&mut a5, &tb[3], n2 * n2);
        let h5 = nn::silu(&a5);

        let mut cat1 = nn::upsample2(&h5, c2, n2, n2);
        cat1.extend_from_slice(&h1);
        let (mut a6, cols_up_b) = self.conv_up_b.forward(p, &cat1, n, n);
        nn::add_channel_bias(&mut a6, &tb[4], n * n);
        let h6 = nn::silu(&a6);

        let (out, cols_out) = self.conv_out.forward(p, &h6, n, n);
        let cache = Cache {
            emb,
            cols: [
                cols_in, cols_down, cols_mid_a, cols_mid_b, cols_up_a, cols_up_b, cols_out,
            ],
            pre: [a1, a2, a3, a4, a5, a6],
        };
        (out, cache)
    }

    /// Accumulates the gradient of `<dout, forward(x)>` into `g`.
    pub(crate) fn backward<F: Real>(&self, p: &[F], g: &mut [F], cache: &Cache<F>, dout: &[F]) {
        let n = self.arch.size;
        let (n2, n4) = (n / 2, n / 4);
        let [c1, c2, c3] = self.arch.widths;
        let [cols_in, cols_down, cols_mid_a, cols_mid_b, cols_up_a, cols_up_b, cols_out] = &cache.cols;
        let [a1, a2, a3, a4, a5, a6] = &cache.pre;
        let mut dtb: [Vec<F>; 5] = Default::default();

        let dh6 = self.conv_out.backward(p, g, cols_out, dout, n, n, true).unwrap();
        let da6 = nn::silu_backward(a6, &dh6);
        dtb[4] = nn::channel_sums(&da6, n * n);
        let dcat1 = self.conv_up_b.backward(p, g, cols_up_b, &da6, n, n, true).unwrap();
        let (du1, dh1_skip) = dcat1.split_at(c2 * n * n);
        let dh5 = nn::upsample2_backward(du1, c2, n2, n2);

        let da5 = nn::silu_backward(a5, &dh5);
        dtb[3] = nn::channel_sums(&da5, n2 * n2);
        let dcat2 = self.conv_up_a.backward(p, g, cols_up_a, &da5, n2, n2, true).unwrap();
        let (du2, dh2_skip) = dcat2.split_at(c3 * n2 * n2);
        let dh4 = nn::upsample2_backward(du2, c3, n4, n4);

        let da4 = nn::silu_backward(a4, &dh4);
        let dh3 = self.conv_mid_b.backward(p, g, cols_mid_b, &da4, n4, n4, true).unwrap();
        let da3 = nn::silu_backward(a3, &dh3);
        dtb[2] = nn::channel_sums(&da3, n4 * n4);
        let dp2 = self.conv_mid_a.backward(p, g, cols_mid_a, &da3, n4, n4, true).unwrap();

        let mut dh2 = nn::avg_pool2_backward(&dp2, c2, n2, n2);
        nn::add_into(&mut dh2, dh2_skip);
        let da2 = nn::silu_backward(a2, &dh2);
        dtb[1] = nn::channel_sums(&da2, n2 * n2);
        let dp1 = self.conv_down.backward(p, g, cols_down, &da2, n2, n2, true).unwrap();

        let mut dh1 = nn::avg_pool2_backward(&dp1, c1, n, n);
        nn::add_into(&mut dh1, dh1_skip);
        let da1 = nn::silu_backward(a1, &dh1);
        dtb[0] = nn::channel_sums(&da1, n * n);
        self.conv_in.backward(p, g, cols_in, &da1, n, n, false);

        for (dense, d) in self.time.iter().zip(&dtb) {
            dense.backward(g, &cache.emb, d);
        }
    }
}

pub(crate) struct Cache<F> {
    emb: Vec<F>,
    cols: [Vec<F>; 7],
    pre: [Vec<F>; 6],
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_round_trips() {
        let arch = UNetArch::desk(64);
        let parsed: UNetArch = arch.to_string().parse().unwrap();
        assert_eq!(arch, parsed);
        assert!("vqvae size=64".parse::<UNetArch>().is_err());
        assert!("unet3 size=64 widths=1,2 time=4".parse::<UNetArch>().is_err());
    }

    #[test]
    fn desk_net_is_about_100k_params() {
        let n = UNetArch::desk(64).n_params();
        assert!((80_000..=120_000).contains(&n), "{n}");
    }

    #[test]
    fn input_gradient_matches_differences() {
        // Checks backward against differences on the output-projection
        // functional <v, f(x)> with respect to parameters, in f64.
        let arch = UNetArch::new(8, [2, 2, 3], 4).unwrap();
        let layout = Layout::new(&arch);
        let p: Vec<f64> = layout.init_dense(3).iter().map(|&v| v as f64).collect();
        let mut r = rng::stream(4, &[]);
        let x: Vec<f64> = rng::gaussian_vec(&mut r, 64).iter().map(|&v| v as f64).collect();
        let v: Vec<f64> = rng::gaussian_vec(&mut r, 64).iter().map(|&v| v as f64).collect();
        let f = |p: &[f64]| -> f64 {
            let (out, _) = layout.forward(p, &x, 37.0);
            out.iter().zip(&v).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layout.forward(&p, &x, 37.0);
        let mut g = vec![0.0; p.len()];
        layout.backward(&p, &mut g, &cache, &v);
        let h = 1e-6;
        for i in (0..p.len()).step_by(7) {
            let mut pp = p.clone();
            pp[i] += h;
            let up = f(&pp);
            pp[i] -= 2.0 * h;
            let down = f(&pp);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-7);
            assert!((fd - g[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}
