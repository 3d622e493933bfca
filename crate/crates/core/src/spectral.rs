//! Toy audio corpus, magnitude spectrograms and Griffin-Lim phase recovery.
//!
//! Spectrograms are square `N x N` grids, row-major with row 0 the lowest
//! frequency and column 0 the first analysis frame. Cell values are
//! log-magnitudes mapped affinely from `[db_floor, db_ceiling]` onto `[-1, 1]`.

use std::f64::consts::PI;
use std::io::{Read, Seek, Write};
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
const PEAK: f32 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "sample {i} is {} (must be finite and within [-1, 1])",
                samples[i]
            )));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub size: usize,
    pub window_len: usize,
    pub hop_len: usize,
    pub db_floor: f64,
    pub db_ceiling: f64,
    pub sample_rate: u32,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            size: 64,
            window_len: 1024,
            hop_len: 512,
            db_floor: -80.0,
            db_ceiling: 0.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SpectrogramConfig {
    /// Default analysis parameters at a different grid size. The hop shrinks
    /// with the grid so small grids still get short clips.
    pub fn with_size(size: usize) -> Self {
        let window_len = (size * 16).clamp(64, 1024);
        Self {
            size,
            window_len,
            hop_len: window_len / 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("size {} < 8", self.size)));
        }
        if self.hop_len == 0 || self.hop_len > self.window_len {
            return Err(Error::Config(format!(
                "hop_len {} must be in 1..={}",
                self.hop_len, self.window_len
            )));
        }
        if self.window_len < 4 || !self.window_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window_len {} must be even and >= 4",
                self.window_len
            )));
        }
        if !(self.db_floor < self.db_ceiling) {
            return Err(Error::Config(format!(
                "db_floor {} must be below db_ceiling {}",
                self.db_floor, self.db_ceiling
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Samples needed to fill `size` frames.
    pub fn clip_len(&self) -> usize {
        (self.size - 1) * self.hop_len + self.window_len
    }

    pub fn clip_duration(&self) -> f64 {
        self.clip_len() as f64 / self.sample_rate as f64
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Centre frequency of spectrogram row `row`.
    pub fn row_frequency(&self, row: usize) -> f64 {
        row as f64 / (self.size - 1) as f64 * self.sample_rate as f64 / 2.0
    }

    /// Fractional FFT bin sampled by spectrogram row `row`.
    fn row_bin(&self, row: usize) -> f64 {
        row as f64 * (self.window_len / 2) as f64 / (self.size - 1) as f64
    }

    fn db_to_unit(&self, db: f64) -> f64 {
        let db = db.clamp(self.db_floor, self.db_ceiling);
        2.0 * (db - self.db_floor) / (self.db_ceiling - self.db_floor) - 1.0
    }

    fn unit_to_db(&self, v: f64) -> f64 {
        self.db_floor + (v + 1.0) / 2.0 * (self.db_ceiling - self.db_floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f32>,
    config: SpectrogramConfig,
}

impl Spectrogram {
    /// Wraps a grid. Every value must be finite and inside `[-1, 1]`.
    pub fn new(values: Vec<f32>, config: SpectrogramConfig) -> Result<Self> {
        let n = config.size;
        if values.len() != n * n {
            return Err(Error::shape(format!("{n}x{n}"), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "cell {i} is {} (must lie in [-1, 1])",
                values[i]
            )));
        }
        Ok(Self { values, config })
    }

    /// Like [`Spectrogram::new`] but clamps into range; NaN becomes the floor.
    pub fn from_clamped(mut values: Vec<f32>, config: SpectrogramConfig) -> Result<Self> {
        for v in values.iter_mut() {
            *v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self::new(values, config)
    }

    pub fn floor(config: SpectrogramConfig) -> Self {
        Self {
            values: vec![-1.0; config.size * config.size],
            config,
        }
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.config
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.config.size + col]
    }

    pub fn mean_abs_diff(&self, other: &Spectrogram) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "grid size mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SongRecipe {
    pub fundamental_hz: f64,
    pub harmonic_count: u32,
    pub harmonic_decay: f64,
    /// Pulses per second; 0 disables pulsing.
    pub pulse_rate_hz: f64,
    pub attack_s: f64,
    /// Exponential decay time constant; 0 sustains.
    pub decay_s: f64,
    pub genre_id: u32,
}

impl SongRecipe {
    pub fn tone(fundamental_hz: f64) -> Self {
        Self {
            fundamental_hz,
            harmonic_count: 1,
            harmonic_decay: 1.0,
            pulse_rate_hz: 0.0,
            attack_s: 0.0,
            decay_s: 0.0,
            genre_id: 0,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let bad = |msg: String| Err(Error::InvalidRecipe(msg));
        if !(self.fundamental_hz > 0.0) || !self.fundamental_hz.is_finite() {
            return bad(format!("fundamental {} Hz must be positive", self.fundamental_hz));
        }
        if self.harmonic_count == 0 {
            return bad("harmonic_count must be >= 1".into());
        }
        if self.fundamental_hz * self.harmonic_count as f64 >= nyquist {
            return bad(format!(
                "{} Hz x {} harmonics reaches the {nyquist} Hz Nyquist limit",
                self.fundamental_hz, self.harmonic_count
            ));
        }
        if !(self.harmonic_decay > 0.0 && self.harmonic_decay <= 1.0) {
            return bad(format!("harmonic_decay {} outside (0, 1]", self.harmonic_decay));
        }
        for (name, v) in [
            ("pulse_rate_hz", self.pulse_rate_hz),
            ("attack_s", self.attack_s),
            ("decay_s", self.decay_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Renders a harmonic stack with a (possibly pulsed) attack/decay envelope,
/// peak-normalized to 0.95. Harmonic phases come from `seed`.
pub fn synth_clip(recipe: &SongRecipe, duration: f64, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    recipe.validate(sample_rate)?;
    if !(duration > 0.0) {
        return Err(Error::InvalidInput(format!("duration {duration} must be > 0")));
    }
    let len = (duration * sample_rate as f64).round() as usize;
    let mut phase_rng = rng::stream(seed, &[0x5157]);
    let partials: Vec<(f64, f64, f64)> = (0..recipe.harmonic_count)
        .map(|h| {
            let freq = recipe.fundamental_hz * (h + 1) as f64;
            let amp = recipe.harmonic_decay.powi(h as i32);
            let phase = phase_rng.gen::<f64>() * 2.0 * PI;
            (freq, amp, phase)
        })
        .collect();

    let sr = sample_rate as f64;
    let period = (recipe.pulse_rate_hz > 0.0).then(|| 1.0 / recipe.pulse_rate_hz);
    let mut raw: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let tau = period.map_or(t, |p| t % p);
            let mut env = 1.0;
            if recipe.attack_s > 0.0 {
                env *= (tau / recipe.attack_s).min(1.0);
            }
            if recipe.decay_s > 0.0 {
                env *= (-(tau - recipe.attack_s).max(0.0) / recipe.decay_s).exp();
            }
            let tone: f64 = partials.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
            env * tone
        })
        .collect();

    let peak = raw.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = PEAK as f64 / peak;
        raw.iter_mut().for_each(|s| *s *= scale);
    }
    AudioClip::new(
        raw.into_iter().map(|s| (s as f32).clamp(-1.0, 1.0)).collect(),
        sample_rate,
    )
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Short-time Fourier analysis shared by the forward transform and
/// Griffin-Lim.
struct Stft {
    cfg: SpectrogramConfig,
    window: Vec<f64>,
    /// Scale taking |X_k| to the amplitude of a full-scale sinusoid.
    amp_scale: f64,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(cfg: &SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let window = hann(cfg.window_len);
        let amp_scale = 2.0 / window.iter().sum::<f64>();
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: *cfg,
            fft: planner.plan_fft_forward(cfg.window_len),
            ifft: planner.plan_fft_inverse(cfg.window_len),
            window,
            amp_scale,
        })
    }

    /// Half-spectrum of every frame: `frames x n_bins`.
    fn analyze(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let (w, hop, n) = (self.cfg.window_len, self.cfg.hop_len, self.cfg.size);
        let mut buf = vec![Complex::new(0.0, 0.0); w];
        (0..n)
            .map(|j| {
                let start = j * hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(samples[start + i] * self.window[i], 0.0);
                }
                self.fft.process(&mut buf);
                buf[..self.cfg.n_bins()].to_vec()
            })
            .collect()
    }

    /// Least-squares inverse of [`Stft::analyze`]. Samples whose summed
    /// squared window falls below `norm_floor` (the outermost edges) are
    /// divided by the floor instead, which keeps inconsistent edges quiet.
    fn synthesize(&self, frames: &[Vec<Complex<f64>>], norm_floor: f64) -> Vec<f64> {
        let (w, hop) = (self.cfg.window_len, self.cfg.hop_len);
        let len = self.cfg.clip_len();
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); w];
        let half = w / 2;
        for (j, frame) in frames.iter().enumerate() {
            buf[..=half].copy_from_slice(&frame[..=half]);
            for k in 1..half {
                buf[w - k] = frame[k].conj();
            }
            self.ifft.process(&mut buf);
            let start = j * hop;
            for i in 0..w {
                let wi = self.window[i];
                out[start + i] += wi * buf[i].re / w as f64;
                norm[start + i] += wi * wi;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > norm_floor.max(1e-12) {
                *o / n
            } else if norm_floor > 0.0 {
                *o / norm_floor
            } else {
                0.0
            };
        }
        out
    }

    /// Samples the half-spectrum magnitude at each spectrogram row, in
    /// sinusoid-amplitude units. Result is row-major `size x size`.
    fn row_magnitudes(&self, frames: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let n = self.cfg.size;
        let mut grid = vec![0.0; n * n];
        for (col, frame) in frames.iter().enumerate() {
            for row in 0..n {
                let b = self.cfg.row_bin(row);
                let lo = b.floor() as usize;
                let hi = (lo + 1).min(frame.len() - 1);
                let frac = b - lo as f64;
                let mag = (1.0 - frac) * frame[lo].norm() + frac * frame[hi].norm();
                grid[row * n + col] = mag * self.amp_scale;
            }
        }
        grid
    }

    /// Expands row magnitudes (amplitude units) back onto FFT bins, treating
    /// each row as a sinusoid at its centre frequency: every row contributes
    /// the Hann main lobe around its fractional bin. Result is
    /// `frames x n_bins` in raw FFT units.
    fn bin_magnitudes(&self, row_mags: &[f64]) -> Vec<Vec<f64>> {
        let n = self.cfg.size;
        let n_bins = self.cfg.n_bins();
        (0..n)
            .map(|col| {
                let mut bins = vec![0.0; n_bins];
                for row in 0..n {
                    let centre = self.cfg.row_bin(row);
                    let amp = row_mags[row * n + col] / self.amp_scale;
                    let lo = (centre - 2.0).ceil().max(0.0) as usize;
                    let hi = ((centre + 2.0).floor() as usize).min(n_bins - 1);
                    for (k, bin) in bins.iter_mut().enumerate().take(hi + 1).skip(lo) {
                        *bin += amp * hann_lobe(k as f64 - centre);
                    }
                }
                bins
            })
            .collect()
    }

    /// Phase of a stationary sinusoid at each row frequency, as seen by
    /// frame `frame` at bin `k`. Used to start Griffin-Lim coherently.
    fn sinusoid_phase(&self, frame: usize, k: usize) -> f64 {
        let per_row = (self.cfg.window_len / 2) as f64 / (self.cfg.size - 1) as f64;
        let row = ((k as f64 / per_row).round() as usize).min(self.cfg.size - 1);
        let centre = self.cfg.row_bin(row);
        2.0 * PI * centre * (frame * self.cfg.hop_len) as f64 / self.cfg.window_len as f64 - PI * (k as f64 - centre)
    }
}

/// Normalized magnitude of the Hann window spectrum `d` bins from its peak,
/// truncated to the main lobe.
fn hann_lobe(d: f64) -> f64 {
    let ad = d.abs();
    if ad >= 2.0 {
        0.0
    } else if ad < 1e-9 {
        1.0
    } else if (ad - 1.0).abs() < 1e-9 {
        0.5
    } else {
        ((PI * d).sin() / (PI * d * (1.0 - d * d))).abs()
    }
}

/// Magnitude STFT converted to normalized dB. Uses the first `size` frames of
/// the clip.
pub fn stft_magnitude(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    let stft = Stft::new(cfg)?;
    let needed = cfg.clip_len();
    if clip.samples.len() < needed {
        return Err(Error::InsufficientAudio {
            needed,
            got: clip.samples.len(),
        });
    }
    let samples: Vec<f64> = clip.samples[..needed].iter().map(|&s| s as f64).collect();
    let frames = stft.analyze(&samples);
    let mags = stft.row_magnitudes(&frames);
    normalize_db(&mags, cfg)
}

/// Maps non-negative magnitudes (full-scale sinusoid = 1.0) to a normalized
/// spectrogram.
pub fn normalize_db(mags: &[f64], cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = cfg.size;
    if mags.len() != n * n {
        return Err(Error::shape(format!("{n}x{n}"), mags.len()));
    }
    let values = mags
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "magnitude {m} at cell {i} (must be finite and >= 0)"
                )));
            }
            let db = if m > 0.0 { 20.0 * m.log10() } else { f64::NEG_INFINITY };
            Ok(cfg.db_to_unit(db) as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    Spectrogram::new(values, *cfg)
}

/// Inverse of [`normalize_db`] for in-range magnitudes.
pub fn denormalize_db(spec: &Spectrogram) -> Vec<f64> {
    let cfg = spec.config;
    spec.values
        .iter()
        .map(|&v| 10f64.powf(cfg.unit_to_db(v as f64) / 20.0))
        .collect()
}

/// Griffin-Lim phase reconstruction.
pub fn griffin_lim(spec: &Spectrogram, iterations: usize) -> Result<AudioClip> {
    griffin_lim_traced(spec, iterations).map(|(clip, _)| clip)
}

/// Griffin-Lim returning, per iteration, the relative Frobenius distance
/// between the re-analyzed STFT magnitude and the target magnitude.
pub fn griffin_lim_traced(spec: &Spectrogram, iterations: usize) -> Result<(AudioClip, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::Config("griffin-lim needs at least one iteration".into()));
    }
    let cfg = spec.config;
    let stft = Stft::new(&cfg)?;
    let target = stft.bin_magnitudes(&denormalize_db(spec));
    let target_norm = target
        .iter()
        .flatten()
        .map(|m| m * m)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);

    let mut frames: Vec<Vec<Complex<f64>>> = target
        .iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .enumerate()
                .map(|(k, &m)| Complex::from_polar(m, stft.sinusoid_phase(j, k)))
                .collect()
        })
        .collect();

    let mut trace = Vec::with_capacity(iterations);
    let mut signal = stft.synthesize(&frames, 0.0);
    for it in 0..iterations {
        let analyzed = stft.analyze(&signal);
        let mut dist = 0.0;
        for ((frame, got), want) in frames.iter_mut().zip(&analyzed).zip(&target) {
            for ((slot, g), &m) in frame.iter_mut().zip(got).zip(want) {
                let mag = g.norm();
                dist += (mag - m).powi(2);
                *slot = if mag > 1e-300 {
                    g * (m / mag)
                } else {
                    Complex::new(m, 0.0)
                };
            }
        }
        trace.push(dist.sqrt() / target_norm);
        // Exact least squares inside the loop keeps each step a projection;
        // the returned clip floors the edge normalization.
        let floor = if it + 1 == iterations { 0.5 } else { 0.0 };
        signal = stft.synthesize(&frames, floor);
    }

    let samples = signal.iter().map(|&s| (s as f32).clamp(-1.0, 1.0)).collect();
    Ok((AudioClip::new(samples, cfg.sample_rate)?, trace))
}

/// Builds a genre-stratified corpus. Song `i` belongs to genre `i % genres`.
pub fn make_corpus(
    n_songs: usize,
    genres: u32,
    seed: u64,
    cfg: &SpectrogramConfig,
) -> Result<Vec<(SongRecipe, AudioClip, Spectrogram)>> {
    if n_songs == 0 {
        return Err(Error::InvalidInput("corpus needs at least one song".into()));
    }
    if genres == 0 {
        return Err(Error::InvalidInput("corpus needs at least one genre".into()));
    }
    cfg.validate()?;
    (0..n_songs)
        .map(|i| {
            let genre = (i % genres as usize) as u32;
            let recipe = corpus_recipe(genre, genres, seed, i as u64, cfg.sample_rate);
            let clip = synth_clip(
                &recipe,
                cfg.clip_duration(),
                cfg.sample_rate,
                rng::derive(seed, &[i as u64]),
            )?;
            let spec = stft_magnitude(&clip, cfg)?;
            Ok((recipe, clip, spec))
        })
        .collect()
}

fn corpus_recipe(genre: u32, genres: u32, seed: u64, index: u64, sample_rate: u32) -> SongRecipe {
    let g = genre as f64;
    let frac = |m: u32| ((genre * m) % genres) as f64 / genres as f64;
    let centre_hz = 130.0 * 2f64.powf(2.5 * (g + 0.5) / genres as f64);
    let base_harmonics = 2 + (genre * 3) % 6;
    let decay_centre = 0.45 + 0.4 * frac(5);
    let pulse_centre = 2.0 + 6.0 * frac(3);

    let mut r = rng::stream(seed, &[0xc0, index]);
    let harmonics = (base_harmonics as i64 + r.gen_range(-1i64..=1)).max(1) as u32;
    let nyquist = sample_rate as f64 / 2.0;
    let fundamental = (centre_hz * 2f64.powf(r.gen_range(-0.2..0.2))).min(0.9 * nyquist / harmonics as f64);
    SongRecipe {
        fundamental_hz: fundamental,
        harmonic_count: harmonics,
        harmonic_decay: (decay_centre + r.gen_range(-0.05..0.05)).clamp(0.05, 1.0),
        pulse_rate_hz: pulse_centre * r.gen_range(0.85..1.15),
        attack_s: r.gen_range(0.005..0.03),
        decay_s: r.gen_range(0.05..0.3),
        genre_id: genre,
    }
}

/// Writes 16-bit PCM mono WAV.
pub fn write_wav<W: Write + Seek>(clip: &AudioClip, out: W) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::new(out, spec).map_err(|e| Error::Audio(e.to_string()))?;
    for &s in &clip.samples {
        let q = (s * i16::MAX as f32).round() as i16;
        writer.write_sample(q).map_err(|e| Error::Audio(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Audio(e.to_string()))
}

pub fn wav_bytes(clip: &AudioClip) -> Result<Vec<u8>> {
    let mut cursor = std::io::Cursor::new(Vec::new());
    write_wav(clip, &mut cursor)?;
    Ok(cursor.into_inner())
}

/// Reads 16-bit PCM mono WAV; anything else is rejected.
pub fn read_wav<R: Read>(input: R) -> Result<AudioClip> {
    let reader = hound::WavReader::new(input).map_err(|e| Error::Audio(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| (v as f32 / i16::MAX as f32).clamp(-1.0, 1.0))
                .map_err(|e| Error::Audio(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    AudioClip::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SpectrogramConfig {
        SpectrogramConfig::default()
    }

    /// Direct O(n^2) DFT magnitude at a fractional bin position, linearly
    /// interpolated between neighbouring integer bins.
    fn dft_row_magnitude(frame: &[f64], window: &[f64], bin: f64) -> f64 {
        let n = frame.len();
        let at = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
                let ang = -2.0 * PI * k as f64 * i as f64 / n as f64;
                re += x * w * ang.cos();
                im += x * w * ang.sin();
            }
            (re * re + im * im).sqrt()
        };
        let lo = bin.floor() as usize;
        let frac = bin - lo as f64;
        let mag = (1.0 - frac) * at(lo) + frac * at(lo + 1);
        mag * 2.0 / window.iter().sum::<f64>()
    }

    #[test]
    fn pure_tone_synthesis() {
        let clip = synth_clip(&SongRecipe::tone(440.0), 1.0, DEFAULT_SAMPLE_RATE, 7).unwrap();
        assert_eq!(clip.samples().len(), 22_050);
        assert!((clip.peak() - 0.95).abs() < 1e-6);
        // zero crossings of a 440 Hz tone over one second
        let crossings = clip
            .samples()
            .windows(2)
            .filter(|w| (w[0] < 0.0) != (w[1] < 0.0))
            .count();
        assert!((878..=882).contains(&crossings), "{crossings}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let recipe = SongRecipe {
            harmonic_count: 4,
            harmonic_decay: 0.6,
            pulse_rate_hz: 3.0,
            attack_s: 0.01,
            decay_s: 0.2,
            ..SongRecipe::tone(220.0)
        };
        let a = synth_clip(&recipe, 0.5, DEFAULT_SAMPLE_RATE, 3).unwrap();
        let b = synth_clip(&recipe, 0.5, DEFAULT_SAMPLE_RATE, 3).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn nyquist_violation_is_rejected() {
        let recipe = SongRecipe {
            harmonic_count: 4,
            ..SongRecipe::tone(10_000.0)
        };
        let err = synth_clip(&recipe, 1.0, DEFAULT_SAMPLE_RATE, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidRecipe(_)));
    }

    #[test]
    fn silence_maps_to_floor() {
        let c = cfg();
        let spec = stft_magnitude(&AudioClip::silent(c.clip_len(), c.sample_rate), &c).unwrap();
        assert!(spec.values().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn short_clip_is_rejected() {
        let c = cfg();
        let err = stft_magnitude(&AudioClip::silent(c.clip_len() - 1, c.sample_rate), &c).unwrap_err();
        assert!(matches!(err, Error::InsufficientAudio { .. }));
    }

    #[test]
    fn tone_energy_lands_in_its_row() {
        let c = cfg();
        let row = 20;
        let freq = c.row_frequency(row);
        let clip = synth_clip(&SongRecipe::tone(freq), c.clip_duration(), c.sample_rate, 1).unwrap();
        let spec = stft_magnitude(&clip, &c).unwrap();

        // Oracle: direct DFT of the first frame at every row position.
        let window = hann(c.window_len);
        let frame: Vec<f64> = clip.samples()[..c.window_len].iter().map(|&s| s as f64).collect();
        for r in 0..c.size {
            let mag = dft_row_magnitude(&frame, &window, c.row_bin(r));
            let expected = c.db_to_unit(20.0 * mag.max(1e-300).log10());
            assert!(
                (spec.get(r, 0) as f64 - expected).abs() < 1e-4,
                "row {r}: {} vs oracle {expected}",
                spec.get(r, 0)
            );
        }
        for col in 0..c.size {
            for r in 0..c.size {
                let v = spec.get(r, col);
                if r == row {
                    assert!(v > 0.9, "peak row {r} col {col}: {v}");
                } else {
                    assert!(v < -0.5, "off row {r} col {col}: {v}");
                }
            }
        }
    }

    #[test]
    fn normalize_endpoints_and_round_trip() {
        let c = SpectrogramConfig::with_size(8);
        let mut mags = vec![1.0; 64];
        mags[1] = 1e-4;
        mags[2] = 1e-7;
        mags[3] = 0.0;
        let spec = normalize_db(&mags, &c).unwrap();
        assert_eq!(spec.get(0, 0), 1.0);
        assert_eq!(spec.get(0, 1), -1.0);
        assert_eq!(spec.get(0, 2), -1.0);
        assert_eq!(spec.get(0, 3), -1.0);

        let mut r = rng::stream(5, &[]);
        let mags: Vec<f64> = (0..64).map(|_| 10f64.powf(r.gen_range(-3.9..0.0))).collect();
        let back = denormalize_db(&normalize_db(&mags, &c).unwrap());
        for (a, b) in mags.iter().zip(&back) {
            assert!((a - b).abs() / a < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn negative_magnitude_is_rejected() {
        let c = SpectrogramConfig::with_size(8);
        let mut mags = vec![0.5; 64];
        mags[10] = -0.1;
        assert!(matches!(normalize_db(&mags, &c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn griffin_lim_recovers_a_tone() {
        let c = cfg();
        let clip = synth_clip(
            &SongRecipe::tone(c.row_frequency(12)),
            c.clip_duration(),
            c.sample_rate,
            4,
        )
        .unwrap();
        let spec = stft_magnitude(&clip, &c).unwrap();
        let (rebuilt, trace) = griffin_lim_traced(&spec, 32).unwrap();
        let again = stft_magnitude(&rebuilt, &c).unwrap();
        let mae = spec.mean_abs_diff(&again);
        assert!(mae <= 0.05, "round-trip MAE {mae}");
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "trace increased: {trace:?}");
        }
    }

    #[test]
    fn griffin_lim_of_floor_is_near_silent() {
        let clip = griffin_lim(&Spectrogram::floor(cfg()), 8).unwrap();
        assert!(clip.peak() < 0.01, "peak {}", clip.peak());
    }

    #[test]
    fn griffin_lim_rejects_zero_iterations() {
        assert!(griffin_lim(&Spectrogram::floor(cfg()), 0).is_err());
    }

    #[test]
    fn corpus_is_stratified_and_deterministic() {
        let c = SpectrogramConfig::with_size(16);
        let corpus = make_corpus(100, 4, 1, &c).unwrap();
        assert_eq!(corpus.len(), 100);
        for g in 0..4 {
            assert_eq!(corpus.iter().filter(|(r, _, _)| r.genre_id == g).count(), 25);
        }
        let again = make_corpus(100, 4, 1, &c).unwrap();
        for (a, b) in corpus.iter().zip(&again) {
            assert_eq!(a.2.values(), b.2.values());
        }
        let single = make_corpus(1, 1, 99, &c).unwrap();
        assert_eq!(single.len(), 1);
        single[0].0.validate(c.sample_rate).unwrap();
    }

    #[test]
    fn wav_round_trip_and_rejections() {
        let c = SpectrogramConfig::with_size(8);
        let clip = synth_clip(&SongRecipe::tone(300.0), 0.1, c.sample_rate, 2).unwrap();
        let bytes = wav_bytes(&clip).unwrap();
        let back = read_wav(std::io::Cursor::new(&bytes)).unwrap();
        assert_eq!(back.samples().len(), clip.samples().len());
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }

        let stereo = hound::WavSpec {
            channels: 2,
            sample_rate: 22_050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = std::io::Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut cursor, stereo).unwrap();
        for _ in 0..20 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav(std::io::Cursor::new(cursor.into_inner())).unwrap_err();
        assert!(matches!(err, Error::Audio(_)));
    }
}
