//! DDIM noise schedule, a small U-Net noise predictor, deterministic sampling
//! with intermediate-latent conditioning, and confidence-weighted training.

mod unet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Real};
use crate::rng;
use crate::spectral::{Spectrogram, SpectrogramConfig};

use unet::Layout;
pub use unet::UNetArch;

/// Parameters of the linear beta ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.sample_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sample_steps: usize,
}

/// Linear beta ramp from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64, sample_steps: usize) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::ScheduleConfig("T must be at least 1".into()));
    }
    let ordered = beta_start < beta_end || (t_max == 1 && beta_start <= beta_end);
    if !(beta_start > 0.0 && beta_end < 1.0 && ordered) {
        return Err(Error::ScheduleConfig(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    if sample_steps == 0 || sample_steps > t_max {
        return Err(Error::ScheduleConfig(format!(
            "sample_steps {sample_steps} must lie in 1..={t_max}"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            beta_start + (beta_end - beta_start) * frac
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sample_steps,
    })
}

impl NoiseSchedule {
    /// Number of training timesteps `T`.
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn sample_steps(&self) -> usize {
        self.sample_steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Cumulative products, indexed from 0 (the first noising step).
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// ᾱ for latent timestep `t` in `0..=T`, with ᾱ = 1 for clean data.
    pub fn abar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn with_sample_steps(&self, sample_steps: usize) -> Result<Self> {
        if sample_steps == 0 || sample_steps > self.timesteps() {
            return Err(Error::ScheduleConfig(format!(
                "sample_steps {sample_steps} must lie in 1..={}",
                self.timesteps()
            )));
        }
        Ok(Self {
            sample_steps,
            ..self.clone()
        })
    }

    /// Descending sampling grid from `T` to 0 inclusive.
    pub fn grid(&self) -> Vec<usize> {
        let (t_max, s) = (self.timesteps(), self.sample_steps);
        let mut grid: Vec<usize> = (1..=s)
            .rev()
            .map(|i| ((i * t_max) as f64 / s as f64).round() as usize)
            .collect();
        grid.dedup();
        grid.push(0);
        grid
    }

    /// Encoding timestep for a conditioning strength in `(0, 1]`.
    pub fn t_enc(&self, strength: f64) -> Result<usize> {
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(Error::Config(format!("strength {strength} must lie in (0, 1]")));
        }
        Ok(((strength * self.timesteps() as f64).round() as usize).max(1))
    }

    /// Grid below `t_start`, prefixed by `t_start` itself.
    fn path_from(&self, t_start: usize) -> Vec<usize> {
        let mut path = vec![t_start];
        path.extend(self.grid().into_iter().filter(|&t| t < t_start));
        path
    }
}

/// An `N x N` tensor tagged with its diffusion timestep (0 = clean).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Vec<f32>,
    pub size: usize,
    pub t: usize,
}

impl Latent {
    pub fn new(values: Vec<f32>, size: usize, t: usize) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::shape(size * size, values.len()));
        }
        Ok(Self { values, size, t })
    }

    pub fn clean(spec: &Spectrogram) -> Self {
        Self {
            values: spec.values().to_vec(),
            size: spec.size(),
            t: 0,
        }
    }

    pub fn into_spectrogram(self, config: SpectrogramConfig) -> Result<Spectrogram> {
        if config.size != self.size {
            return Err(Error::shape(config.size, self.size));
        }
        Spectrogram::from_clamped(self.values, config)
    }
}

/// Noise predictor: an architecture plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: UNetArch,
    params: Vec<f32>,
}

impl Denoiser {
    /// Fresh network with a zeroed output layer.
    pub fn new(arch: UNetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = Layout::new(&arch).init(seed);
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: UNetArch, params: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.n_params();
        if params.len() != expected {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{arch} needs {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::IncompatibleCheckpoint("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn size(&self) -> usize {
        self.arch.size
    }

    pub fn descriptor(&self) -> String {
        self.arch.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub z0: Latent,
    pub omega: f64,
}

impl WeightedSample {
    pub fn new(z0: Latent, omega: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::InvalidWeight(omega));
        }
        if z0.t != 0 {
            return Err(Error::InvalidInput(format!(
                "training target has t = {}, expected 0",
                z0.t
            )));
        }
        Ok(Self { z0, omega })
    }
}

pub fn forward_noise(z0: &Latent, t: usize, eps: &[f32], sched: &NoiseSchedule) -> Result<Latent> {
    if z0.t != 0 {
        return Err(Error::InvalidInput(format!(
            "forward_noise expects t = 0, got {}",
            z0.t
        )));
    }
    if eps.len() != z0.values.len() {
        return Err(Error::shape(z0.values.len(), eps.len()));
    }
    if t > sched.timesteps() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} beyond T = {}",
            sched.timesteps()
        )));
    }
    let ab = sched.abar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = z0
        .values
        .iter()
        .zip(eps)
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect();
    Ok(Latent {
        values,
        size: z0.size,
        t,
    })
}

pub fn predict_eps(d: &Denoiser, z_t: &Latent, t: usize) -> Result<Vec<f32>> {
    if z_t.size != d.arch.size || z_t.values.len() != z_t.size * z_t.size {
        return Err(Error::shape(
            format!("{0}x{0}", d.arch.size),
            format!("{0}x{0} ({1} values)", z_t.size, z_t.values.len()),
        ));
    }
    if t == 0 {
        return Err(Error::InvalidInput("noise prediction needs t >= 1".into()));
    }
    let layout = Layout::new(&d.arch);
    Ok(layout.forward(&d.params, &z_t.values, t as f64).0)
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(z_t: &Latent, eps_hat: &[f32], t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Latent> {
    if t_prev >= t {
        return Err(Error::StepOrder { t, t_prev });
    }
    if t > sched.timesteps() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} beyond T = {}",
            sched.timesteps()
        )));
    }
    if eps_hat.len() != z_t.values.len() {
        return Err(Error::shape(z_t.values.len(), eps_hat.len()));
    }
    let (ab, ab_prev) = (sched.abar(t), sched.abar(t_prev));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let values = z_t
        .values
        .iter()
        .zip(eps_hat)
        .map(|(&z, &e)| {
            let (z, e) = (z as f64, e as f64);
            let x0 = (z - sb * e) / sa;
            (pa * x0 + pb * e) as f32
        })
        .collect();
    Ok(Latent {
        values,
        size: z_t.size,
        t: t_prev,
    })
}

/// Denoises `z` from its own timestep to 0 along the sampling grid.
pub fn denoise_latent(
    d: &Denoiser,
    sched: &NoiseSchedule,
    config: &SpectrogramConfig,
    z: &Latent,
) -> Result<Spectrogram> {
    if z.size != d.size() {
        return Err(Error::shape(d.size(), z.size));
    }
    if z.t > sched.timesteps() {
        return Err(Error::InvalidInput(format!(
            "timestep {} beyond T = {}",
            z.t,
            sched.timesteps()
        )));
    }
    denoise_path(d, z.clone(), sched, &sched.path_from(z.t))?.into_spectrogram(*config)
}

fn denoise_path(d: &Denoiser, mut z: Latent, sched: &NoiseSchedule, path: &[usize]) -> Result<Latent> {
    let layout = Layout::new(&d.arch);
    for w in path.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let eps_hat = layout.forward(&d.params, &z.values, t as f64).0;
        z = ddim_step(&z, &eps_hat, t, t_prev, sched)?;
    }
    Ok(z)
}

/// Initial Gaussian noise for an unconditional sample.
pub fn sample_noise(size: usize, seed: u64) -> Vec<f32> {
    rng::gaussian_vec(&mut rng::stream(seed, &[0x6e]), size * size)
}

/// Unconditional sample: pure seeded noise denoised along the full grid.
pub fn generate(d: &Denoiser, sched: &NoiseSchedule, config: &SpectrogramConfig, seed: u64) -> Result<Spectrogram> {
    let n = d.size();
    let z_t = Latent::new(sample_noise(n, seed), n, sched.timesteps())?;
    denoise_path(d, z_t, sched, &sched.grid())?.into_spectrogram(*config)
}

/// Denoises an intermediate latent injected at `round(strength * T)`.
pub fn conditioned_generate(
    d: &Denoiser,
    sched: &NoiseSchedule,
    config: &SpectrogramConfig,
    z_cond: &Latent,
    strength: f64,
) -> Result<Spectrogram> {
    let t_enc = sched.t_enc(strength)?;
    if z_cond.t != t_enc {
        return Err(Error::InvalidInput(format!(
            "conditioning latent is at t = {}, strength {strength} needs t = {t_enc}",
            z_cond.t
        )));
    }
    denoise_latent(d, sched, config, z_cond)
}

/// Seeded timestep and noise for one training draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f32>,
}

/// Draw addressed by `(seed, key)`: `t` uniform in `1..=T`, ε standard normal.
pub fn noise_draw(seed: u64, key: u64, sched: &NoiseSchedule, cells: usize) -> NoiseDraw {
    let mut r = rng::stream(seed, &[0x7d, key]);
    let t = r.gen_range(1..=sched.timesteps());
    NoiseDraw {
        t,
        eps: rng::gaussian_vec(&mut r, cells),
    }
}

fn check_batch(batch: &[WeightedSample], size: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    for s in batch {
        if !(0.0..=1.0).contains(&s.omega) {
            return Err(Error::InvalidWeight(s.omega));
        }
        if s.z0.size != size || s.z0.values.len() != size * size {
            return Err(Error::shape(size, s.z0.size));
        }
    }
    Ok(())
}

/// Mean over the batch of `ω · ‖ε − ε̂(z_t, t)‖²`, draw `i` keyed by index.
pub fn weighted_loss(d: &Denoiser, batch: &[WeightedSample], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    check_batch(batch, d.size())?;
    let layout = Layout::new(&d.arch);
    let cells = d.size() * d.size();
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        if s.omega == 0.0 {
            continue;
        }
        let draw = noise_draw(seed, i as u64, sched, cells);
        let z_t = forward_noise(&s.z0, draw.t, &draw.eps, sched)?;
        let eps_hat = layout.forward(&d.params, &z_t.values, draw.t as f64).0;
        let sq: f64 = eps_hat
            .iter()
            .zip(&draw.eps)
            .map(|(&p, &e)| (p as f64 - e as f64).powi(2))
            .sum();
        total += s.omega * sq;
    }
    Ok(total / batch.len() as f64)
}

/// Loss and parameter gradient for explicit draws, generic over precision.
pub fn loss_and_grad<F: Real>(
    arch: &UNetArch,
    params: &[F],
    batch: &[WeightedSample],
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<F>)> {
    check_batch(batch, arch.size)?;
    let layout = Layout::new(arch);
    if params.len() != layout.n_params {
        return Err(Error::shape(layout.n_params, params.len()));
    }
    if draws.len() != batch.len() {
        return Err(Error::shape(batch.len(), draws.len()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = vec![F::zero(); params.len()];
    let mut total = 0.0;
    for (s, draw) in batch.iter().zip(draws) {
        if s.omega == 0.0 {
            continue;
        }
        let z_t = forward_noise(&s.z0, draw.t, &draw.eps, sched)?;
        let x: Vec<F> = z_t.values.iter().map(|&v| F::from_f64_lossy(v as f64)).collect();
        let (out, cache) = layout.forward(params, &x, draw.t as f64);
        let w = s.omega * inv_b;
        let mut dout = Vec::with_capacity(out.len());
        let mut sq = 0.0;
        for (&o, &e) in out.iter().zip(&draw.eps) {
            let r = o.to_f64().unwrap_or(f64::NAN) - e as f64;
            sq += r * r;
            dout.push(F::from_f64_lossy(2.0 * w * r));
        }
        total += s.omega * sq;
        layout.backward(params, &mut grad, &cache, &dout);
    }
    Ok((total * inv_b, grad))
}

/// Loss and gradient with draws keyed by batch index, matching
/// [`weighted_loss`].
pub fn weighted_loss_grad<F: Real>(
    arch: &UNetArch,
    params: &[F],
    batch: &[WeightedSample],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, Vec<F>)> {
    let cells = arch.size * arch.size;
    let draws: Vec<NoiseDraw> = (0..batch.len())
        .map(|i| noise_draw(seed, i as u64, sched, cells))
        .collect();
    loss_and_grad(arch, params, batch, &draws, sched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 2e-5,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

/// Trains a copy of `d` on `dataset`. The draw for dataset item `i` in epoch
/// `e` is keyed by `(seed, e, i)`.
pub fn train(d: &Denoiser, dataset: &[WeightedSample], sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<Denoiser> {
    train_with_progress(d, dataset, sched, cfg, |_, _| {})
}

pub fn train_with_progress(
    d: &Denoiser,
    dataset: &[WeightedSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Denoiser> {
    check_batch(dataset, d.size())?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate {} must be positive",
            cfg.learning_rate
        )));
    }
    let mut params = d.params.clone();
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => nn::Optimizer::sgd(cfg.learning_rate as f32),
        OptimizerKind::Adam => nn::Optimizer::adam(cfg.learning_rate as f32, params.len()),
    };
    let cells = d.size() * d.size();
    for epoch in 0..cfg.epochs {
        let order = nn::permutation(dataset.len(), &mut rng::stream(cfg.seed, &[0x0e, epoch as u64]));
        let epoch_seed = rng::derive(cfg.seed, &[epoch as u64]);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<WeightedSample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let draws: Vec<NoiseDraw> = chunk
                .iter()
                .map(|&i| noise_draw(epoch_seed, i as u64, sched, cells))
                .collect();
            let (loss, grad) = loss_and_grad(&d.arch, &params, &batch, &draws, sched)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            opt.step(&mut params, &grad);
        }
        let epoch_loss = epoch_loss / dataset.len() as f64;
        if !epoch_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
        log::debug!("epoch {epoch}: weighted loss {epoch_loss:.4}");
        on_epoch(epoch, epoch_loss);
    }
    Ok(Denoiser { arch: d.arch, params })
}

/// Fixed `(z0, t, ε)` probe set for tracking training progress.
pub fn probe_set(targets: &[Latent], sched: &NoiseSchedule, per_target: usize, seed: u64) -> Vec<(Latent, NoiseDraw)> {
    let mut probes = Vec::with_capacity(targets.len() * per_target);
    for (i, z0) in targets.iter().enumerate() {
        for j in 0..per_target {
            let key = (i * per_target + j) as u64;
            probes.push((z0.clone(), noise_draw(seed, key, sched, z0.values.len())));
        }
    }
    probes
}

/// Unweighted mean squared noise-prediction error over a probe set.
pub fn probe_loss(d: &Denoiser, probes: &[(Latent, NoiseDraw)], sched: &NoiseSchedule) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("probe set"));
    }
    let batch: Vec<WeightedSample> = probes
        .iter()
        .map(|(z0, _)| WeightedSample {
            z0: z0.clone(),
            omega: 1.0,
        })
        .collect();
    let draws: Vec<NoiseDraw> = probes.iter().map(|(_, d)| d.clone()).collect();
    let (mut total, n) = (0.0, probes.len());
    let layout = Layout::new(&d.arch);
    for (s, draw) in batch.iter().zip(&draws) {
        let z_t = forward_noise(&s.z0, draw.t, &draw.eps, sched)?;
        let out = layout.forward(&d.params, &z_t.values, draw.t as f64).0;
        total += out
            .iter()
            .zip(&draw.eps)
            .map(|(&o, &e)| (o as f64 - e as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / n as f64)
}
