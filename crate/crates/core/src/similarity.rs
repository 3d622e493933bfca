//! Vector-quantized autoencoder whose pooled encoder output embeds a song,
//! plus the shared-code distance `gamma` between sets of song embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv, ParamCursor};
use crate::rng;
use crate::spectral::Spectrogram;

/// `K` vectors of dimension `D`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f32>,
}

impl Codebook {
    pub fn new(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || !vectors.len().is_multiple_of(dim) || vectors.len() / dim < 2 {
            return Err(Error::InvalidInput(format!(
                "codebook needs at least 2 vectors of dimension {dim}, got {} values",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("codebook has non-finite entries".into()));
        }
        Ok(Self { dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn check_members<V: AsRef<[f32]>>(cb: &Codebook, vs: &[V]) -> Result<()> {
    if vs.is_empty() {
        return Err(Error::EmptyInput("song embeddings"));
    }
    for v in vs {
        if v.as_ref().len() != cb.dim {
            return Err(Error::shape(cb.dim, v.as_ref().len()));
        }
    }
    Ok(())
}

/// Index minimizing the summed squared distance to every member; ties go
/// to the lowest index.
pub fn nearest_code<V: AsRef<[f32]>>(cb: &Codebook, vs: &[V]) -> Result<usize> {
    check_members(cb, vs)?;
    let mut best = (0, f64::INFINITY);
    for k in 0..cb.len() {
        let e = cb.code(k);
        let total: f64 = vs.iter().map(|v| sq_dist(v.as_ref(), e)).sum();
        if total < best.1 {
            best = (k, total);
        }
    }
    Ok(best.0)
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean of `1 - cos(e_k*, v_j)` over members. 0 when all members align with
/// the shared code, 2 when all point away from it.
pub fn gamma<V: AsRef<[f32]>>(cb: &Codebook, vs: &[V]) -> Result<f64> {
    let k = nearest_code(cb, vs)?;
    let e = cb.code(k);
    let mut total = 0.0;
    for v in vs {
        total += 1.0 - cosine(e, v.as_ref())?;
    }
    Ok(total / vs.len() as f64)
}

/// `1 - gamma / 2`: higher means more similar.
pub fn similarity_score<V: AsRef<[f32]>>(cb: &Codebook, vs: &[V]) -> Result<f64> {
    Ok(1.0 - gamma(cb, vs)? / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VqArch {
    pub size: usize,
    pub widths: [usize; 3],
    pub dim: usize,
    pub codes: usize,
}

impl VqArch {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || !self.size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "VQ grid size {} must be a multiple of 8",
                self.size
            )));
        }
        if self.widths.contains(&0) || self.dim == 0 {
            return Err(Error::Config("VQ widths and dimension must be positive".into()));
        }
        if self.codes < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {}", self.codes)));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        VqLayout::new(self).n_params
    }

    fn grid(&self) -> usize {
        self.size / 8
    }
}

impl fmt::Display for VqArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.widths;
        write!(
            f,
            "vqvae size={} widths={a},{b},{c} dim={} codes={}",
            self.size, self.dim, self.codes
        )
    }
}

/// Parses `"vqvae size=.. widths=a,b,c dim=.. codes=.. [epochs=..]"`,
/// returning the architecture and the trained-epoch count (0 if absent).
pub fn parse_vq_descriptor(s: &str) -> Result<(VqArch, usize)> {
    let bad = || Error::IncompatibleCheckpoint(format!("unrecognized VQ descriptor {s:?}"));
    let mut parts = s.split_whitespace();
    if parts.next() != Some("vqvae") {
        return Err(bad());
    }
    let (mut size, mut widths, mut dim, mut codes, mut epochs) = (None, None, None, None, 0);
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(bad)?;
        let num = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "size" => size = Some(num()?),
            "dim" => dim = Some(num()?),
            "codes" => codes = Some(num()?),
            "epochs" => epochs = num()?,
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
    let arch = VqArch {
        size: size.ok_or_else(bad)?,
        widths: widths.ok_or_else(bad)?,
        dim: dim.ok_or_else(bad)?,
        codes: codes.ok_or_else(bad)?,
    };
    arch.validate()
        .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
    Ok((arch, epochs))
}

impl FromStr for VqArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_vq_descriptor(s).map(|(a, _)| a)
    }
}

#[derive(Debug, Clone)]
struct VqLayout {
    arch: VqArch,
    enc: [Conv; 4],
    dec: [Conv; 4],
    codebook: usize,
    /// Origin of the embedding space, fixed after training.
    centre: usize,
    n_params: usize,
}

impl VqLayout {
    fn new(arch: &VqArch) -> Self {
        let [c1, c2, c3] = arch.widths;
        let mut cur = ParamCursor::default();
        let enc = [
            Conv::new(1, c1, 3, &mut cur),
            Conv::new(c1, c2, 3, &mut cur),
            Conv::new(c2, c3, 3, &mut cur),
            Conv::new(c3, arch.dim, 1, &mut cur),
        ];
        let dec = [
            Conv::new(arch.dim, c3, 1, &mut cur),
            Conv::new(c3, c2, 3, &mut cur),
            Conv::new(c2, c1, 3, &mut cur),
            Conv::new(c1, 1, 3, &mut cur),
        ];
        let codebook = cur.take(arch.codes * arch.dim);
        let centre = cur.take(arch.dim);
        Self {
            arch: *arch,
            enc,
            dec,
            codebook,
            centre,
            n_params: cur.total(),
        }
    }

    fn init(&self, seed: u64) -> Vec<f32> {
        let mut p = vec![0.0f32; self.n_params];
        let mut r = rng::stream(seed, &[0xe1]);
        for conv in self.enc.iter().chain(&self.dec) {
            conv.init(&mut p, &mut r, 2f64.sqrt());
        }
        let cb = &mut p[self.codebook..];
        cb.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        p
    }

    fn codebook<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        &p[self.codebook..self.codebook + self.arch.codes * self.arch.dim]
    }

    fn centre<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        &p[self.centre..self.centre + self.arch.dim]
    }

    fn pooled(&self, p: &[f32], x: &[f32]) -> Vec<f32> {
        let (z, _) = self.encode(p, x);
        let gg = self.arch.grid() * self.arch.grid();
        z.chunks(gg).map(|c| c.iter().sum::<f32>() / gg as f32).collect()
    }

    /// Encoder pass: returns `z_e` as `[D][g*g]` plus activations for backward.
    fn encode(&self, p: &[f32], x: &[f32]) -> (Vec<f32>, EncCache) {
        let mut n = self.arch.size;
        let mut h = x.to_vec();
        let mut cols = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(3);
        for (i, conv) in self.enc[..3].iter().enumerate() {
            let (a, c) = conv.forward(p, &h, n, n);
            cols.push(c);
            let s = nn::silu(&a);
            pre.push(a);
            h = nn::avg_pool2(&s, self.arch.widths[i], n, n);
            n /= 2;
        }
        let (z, c) = self.enc[3].forward(p, &h, n, n);
        cols.push(c);
        (z, EncCache { cols, pre })
    }

    fn encode_backward(&self, p: &[f32], g: &mut [f32], cache: &EncCache, dz: &[f32]) {
        let s = self.arch.size;
        let sizes = [s, s / 2, s / 4];
        let mut dh = self.enc[3]
            .backward(p, g, &cache.cols[3], dz, s / 8, s / 8, true)
            .unwrap();
        for i in (0..3).rev() {
            let n = sizes[i];
            let ds = nn::avg_pool2_backward(&dh, self.arch.widths[i], n, n);
            let da = nn::silu_backward(&cache.pre[i], &ds);
            match self.enc[i].backward(p, g, &cache.cols[i], &da, n, n, i > 0) {
                Some(d) => dh = d,
                None => break,
            }
        }
    }

    fn decode(&self, p: &[f32], z: &[f32]) -> (Vec<f32>, DecCache) {
        let s = self.arch.size;
        let chans = [self.arch.widths[2], self.arch.widths[1], self.arch.widths[0]];
        let mut n = s / 8;
        let mut h = z.to_vec();
        let mut cols = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(3);
        for (i, conv) in self.dec[..3].iter().enumerate() {
            let (a, c) = conv.forward(p, &h, n, n);
            cols.push(c);
            let act = nn::silu(&a);
            pre.push(a);
            h = nn::upsample2(&act, chans[i], n, n);
            n *= 2;
        }
        let (out, c) = self.dec[3].forward(p, &h, n, n);
        cols.push(c);
        (out, DecCache { cols, pre })
    }

    fn decode_backward(&self, p: &[f32], g: &mut [f32], cache: &DecCache, dout: &[f32]) -> Vec<f32> {
        let s = self.arch.size;
        let chans = [self.arch.widths[2], self.arch.widths[1], self.arch.widths[0]];
        let sizes = [s / 8, s / 4, s / 2];
        let mut dh = self.dec[3].backward(p, g, &cache.cols[3], dout, s, s, true).unwrap();
        for i in (0..3).rev() {
            let n = sizes[i];
            let dact = nn::upsample2_backward(&dh, chans[i], n, n);
            let da = nn::silu_backward(&cache.pre[i], &dact);
            dh = self.dec[i].backward(p, g, &cache.cols[i], &da, n, n, true).unwrap();
        }
        dh
    }

    /// Nearest code per grid position of a channel-major `z_e`.
    fn assign(&self, cb: &[f32], z: &[f32]) -> Vec<usize> {
        let (d, gg) = (self.arch.dim, self.arch.grid() * self.arch.grid());
        (0..gg)
            .map(|pos| {
                let mut best = (0, f32::INFINITY);
                for k in 0..self.arch.codes {
                    let e = &cb[k * d..(k + 1) * d];
                    let dist: f32 = (0..d).map(|c| (z[c * gg + pos] - e[c]).powi(2)).sum();
                    if dist < best.1 {
                        best = (k, dist);
                    }
                }
                best.0
            })
            .collect()
    }

    fn quantize(&self, cb: &[f32], codes: &[usize]) -> Vec<f32> {
        let (d, gg) = (self.arch.dim, codes.len());
        let mut zq = vec![0.0; d * gg];
        for (pos, &k) in codes.iter().enumerate() {
            for c in 0..d {
                zq[c * gg + pos] = cb[k * d + c];
            }
        }
        zq
    }
}

struct EncCache {
    cols: Vec<Vec<f32>>,
    pre: Vec<Vec<f32>>,
}

struct DecCache {
    cols: Vec<Vec<f32>>,
    pre: Vec<Vec<f32>>,
}

/// Encoder, decoder and codebook in one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VqModel {
    arch: VqArch,
    params: Vec<f32>,
    epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SongEmbedding {
    pub v: Vec<f32>,
}

impl AsRef<[f32]> for SongEmbedding {
    fn as_ref(&self) -> &[f32] {
        &self.v
    }
}

impl VqModel {
    pub fn new(arch: VqArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            params: VqLayout::new(&arch).init(seed),
            arch,
            epochs_trained: 0,
        })
    }

    pub fn from_params(arch: VqArch, params: Vec<f32>, epochs_trained: usize) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.n_params() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{arch} needs {} parameters, got {}",
                arch.n_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::IncompatibleCheckpoint("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            params,
            epochs_trained,
        })
    }

    pub fn arch(&self) -> &VqArch {
        &self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn is_trained(&self) -> bool {
        self.epochs_trained > 0
    }

    pub fn descriptor(&self) -> String {
        format!("{} epochs={}", self.arch, self.epochs_trained)
    }

    /// Codebook expressed relative to the embedding origin.
    pub fn codebook(&self) -> Codebook {
        let layout = VqLayout::new(&self.arch);
        let centre = layout.centre(&self.params);
        let vectors = layout
            .codebook(&self.params)
            .chunks(self.arch.dim)
            .flat_map(|e| e.iter().zip(centre).map(|(a, c)| a - c))
            .collect();
        Codebook {
            dim: self.arch.dim,
            vectors,
        }
    }

    fn check_input(&self, spec: &Spectrogram) -> Result<()> {
        if spec.size() != self.arch.size {
            return Err(Error::shape(self.arch.size, spec.size()));
        }
        Ok(())
    }

    /// Encodes, quantizes and decodes a spectrogram.
    pub fn reconstruct(&self, spec: &Spectrogram) -> Result<Vec<f32>> {
        self.check_input(spec)?;
        let layout = VqLayout::new(&self.arch);
        let (z, _) = layout.encode(&self.params, spec.values());
        let cb = layout.codebook(&self.params);
        let zq = layout.quantize(cb, &layout.assign(cb, &z));
        Ok(layout.decode(&self.params, &zq).0)
    }

    /// Mean squared reconstruction error over a set of spectrograms.
    pub fn reconstruction_mse(&self, specs: &[&Spectrogram]) -> Result<f64> {
        if specs.is_empty() {
            return Err(Error::EmptyInput("reconstruction set"));
        }
        let mut total = 0.0;
        for s in specs {
            let r = self.reconstruct(s)?;
            total += r
                .iter()
                .zip(s.values())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                / r.len() as f64;
        }
        Ok(total / specs.len() as f64)
    }

    /// Distinct codes assigned over every grid position of `specs`.
    pub fn codes_used(&self, specs: &[&Spectrogram]) -> Result<usize> {
        let layout = VqLayout::new(&self.arch);
        let cb = layout.codebook(&self.params);
        let mut used = vec![false; self.arch.codes];
        for s in specs {
            self.check_input(s)?;
            let (z, _) = layout.encode(&self.params, s.values());
            for k in layout.assign(cb, &z) {
                used[k] = true;
            }
        }
        Ok(used.iter().filter(|&&u| u).count())
    }
}

/// Mean-pooled encoder output for one song, relative to the corpus-mean
/// origin.
pub fn encode_song(model: &VqModel, spec: &Spectrogram) -> Result<SongEmbedding> {
    if !model.is_trained() {
        return Err(Error::NotReady("VQ encoder has not been trained".into()));
    }
    model.check_input(spec)?;
    let layout = VqLayout::new(&model.arch);
    let centre = layout.centre(&model.params);
    let v = layout
        .pooled(&model.params, spec.values())
        .iter()
        .zip(centre)
        .map(|(a, c)| a - c)
        .collect();
    Ok(SongEmbedding { v })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub widths: [usize; 3],
    pub dim: usize,
    pub codes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub commitment: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32],
            dim: 32,
            codes: 64,
            epochs: 30,
            learning_rate: 2e-3,
            batch_size: 8,
            commitment: 0.25,
        }
    }
}

impl VqConfig {
    pub fn arch(&self, size: usize) -> VqArch {
        VqArch {
            size,
            widths: self.widths,
            dim: self.dim,
            codes: self.codes,
        }
    }
}

/// Trains a fresh model on `corpus` with reconstruction, codebook and
/// commitment terms, a straight-through gradient, and per-epoch restarts of
/// unused codes.
pub fn train_vqvae(corpus: &[&Spectrogram], cfg: &VqConfig, seed: u64) -> Result<VqModel> {
    let size = corpus.first().ok_or(Error::EmptyInput("VQ training corpus"))?.size();
    let model = VqModel::new(cfg.arch(size), seed)?;
    continue_vqvae(&model, corpus, cfg, seed)
}

/// Continues training `model` for `cfg.epochs` epochs.
pub fn continue_vqvae(model: &VqModel, corpus: &[&Spectrogram], cfg: &VqConfig, seed: u64) -> Result<VqModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("VQ training corpus"));
    }
    for s in corpus {
        model.check_input(s)?;
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(
            "VQ training needs a positive batch size and learning rate".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    let arch = model.arch;
    let layout = VqLayout::new(&arch);
    let (d, gg, k_codes) = (arch.dim, arch.grid() * arch.grid(), arch.codes);
    let mut p = model.params.clone();
    let mut opt = nn::Optimizer::adam(cfg.learning_rate as f32, p.len());
    let beta = cfg.commitment as f32;
    let n_pix = (arch.size * arch.size) as f32;
    let zscale = 1.0 / (gg * d) as f32;

    if model.epochs_trained == 0 {
        // Seed the codebook with encoder outputs.
        let mut r = rng::stream(seed, &[0xcb]);
        let mut pool = Vec::new();
        for s in corpus.iter().take(64) {
            pool.push(layout.encode(&p, s.values()).0);
        }
        for k in 0..k_codes {
            let z = &pool[r.gen_range(0..pool.len())];
            let pos = r.gen_range(0..gg);
            for c in 0..d {
                p[layout.codebook + k * d + c] = z[c * gg + pos] + 0.01 * r.gen_range(-1.0f32..1.0);
            }
        }
    }

    for epoch in 0..cfg.epochs {
        let order = nn::permutation(corpus.len(), &mut rng::stream(seed, &[0x0f, epoch as u64]));
        let mut usage = vec![0usize; k_codes];
        let mut recent: Vec<Vec<f32>> = Vec::new();
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = vec![0.0f32; p.len()];
            let inv_b = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let x = corpus[i].values();
                let (z, enc_cache) = layout.encode(&p, x);
                let cb = layout.codebook(&p);
                let codes = layout.assign(cb, &z);
                let zq = layout.quantize(cb, &codes);
                let (out, dec_cache) = layout.decode(&p, &zq);
                let mut dout = Vec::with_capacity(out.len());
                let mut rec = 0.0f32;
                for (&o, &t) in out.iter().zip(x) {
                    rec += (o - t).powi(2);
                    dout.push(2.0 * (o - t) / n_pix * inv_b);
                }
                let commit: f32 = z.iter().zip(&zq).map(|(a, b)| (a - b).powi(2)).sum::<f32>() * zscale;
                epoch_loss += (rec / n_pix + (1.0 + beta) * commit) as f64;

                let mut dz = layout.decode_backward(&p, &mut g, &dec_cache, &dout);
                for (pos, &k) in codes.iter().enumerate() {
                    usage[k] += 1;
                    for c in 0..d {
                        let diff = z[c * gg + pos] - zq[c * gg + pos];
                        dz[c * gg + pos] += 2.0 * beta * diff * zscale * inv_b;
                        g[layout.codebook + k * d + c] -= 2.0 * diff * zscale * inv_b;
                    }
                }
                layout.encode_backward(&p, &mut g, &enc_cache, &dz);
                recent.push(z);
            }
            opt.step(&mut p, &g);
            if recent.len() > 32 {
                recent.drain(..recent.len() - 32);
            }
        }
        let epoch_loss = epoch_loss / corpus.len() as f64;
        if !epoch_loss.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
        log::debug!("vq epoch {epoch}: loss {epoch_loss:.4}");
        if epoch + 1 < cfg.epochs {
            let mut r = rng::stream(seed, &[0xde, epoch as u64]);
            for k in (0..k_codes).filter(|&k| usage[k] == 0) {
                let z = &recent[r.gen_range(0..recent.len())];
                let pos = r.gen_range(0..gg);
                for c in 0..d {
                    p[layout.codebook + k * d + c] = z[c * gg + pos] + 0.01 * r.gen_range(-1.0f32..1.0);
                }
            }
        }
    }
    let mut centre = vec![0.0f64; d];
    for s in corpus {
        for (c, v) in centre.iter_mut().zip(layout.pooled(&p, s.values())) {
            *c += v as f64 / corpus.len() as f64;
        }
    }
    for (c, v) in centre.iter().enumerate() {
        p[layout.centre + c] = *v as f32;
    }
    Ok(VqModel {
        arch,
        params: p,
        epochs_trained: model.epochs_trained + cfg.epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(vectors: &[[f32; 2]]) -> Codebook {
        Codebook::new(2, vectors.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn nearest_code_examples() {
        let book = cb(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        assert_eq!(nearest_code(&book, &[[0.9f32, 0.1], [0.8, 0.2]]).unwrap(), 0);
        assert_eq!(nearest_code(&book, &[[0.5f32, 0.5]]).unwrap(), 2);
        let pair = cb(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(nearest_code(&pair, &[[0.5f32, 0.5]]).unwrap(), 0);
        assert!(matches!(
            nearest_code::<[f32; 2]>(&pair, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn gamma_examples() {
        let pair = cb(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(gamma(&pair, &[[1.0f32, 0.0]]).unwrap(), 0.0);
        assert!((gamma(&pair, &[[1.0f32, 0.0], [0.0, 1.0]]).unwrap() - 0.5).abs() < 1e-12);
        let anti = cb(&[[1.0, 0.0], [5.0, 5.0]]);
        assert!((gamma(&anti, &[[-1.0f32, 0.0]]).unwrap() - 2.0).abs() < 1e-12);
        assert!((similarity_score(&pair, &[[1.0f32, 0.0], [0.0, 1.0]]).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(gamma(&pair, &[[0.0f32, 0.0]]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn descriptor_round_trips() {
        let arch = VqConfig::default().arch(64);
        let m = VqModel::new(arch, 1).unwrap();
        assert_eq!(parse_vq_descriptor(&m.descriptor()).unwrap(), (arch, 0));
        assert!(parse_vq_descriptor("unet3 size=64").is_err());
    }

    #[test]
    fn untrained_encoder_is_not_ready() {
        let arch = VqConfig::default().arch(16);
        let m = VqModel::new(arch, 1).unwrap();
        let spec = Spectrogram::floor(crate::spectral::SpectrogramConfig::with_size(16));
        assert!(matches!(encode_song(&m, &spec), Err(Error::NotReady(_))));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = VqConfig {
            epochs: 0,
            ..VqConfig::default()
        };
        let spec = Spectrogram::floor(crate::spectral::SpectrogramConfig::with_size(16));
        let m = VqModel::new(cfg.arch(16), 4).unwrap();
        assert_eq!(continue_vqvae(&m, &[&spec], &cfg, 4).unwrap(), m);
    }
}
