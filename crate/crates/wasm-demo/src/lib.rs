//! Browser bindings for three small operations: recipe synthesis to a
//! spectrogram, SLERP blending of two spectrograms, and forward noising
//! under a linear beta schedule.
//!
//! The plain functions return `Result<_, String>` and are usable natively;
//! the `#[wasm_bindgen]` wrappers turn errors into JavaScript exceptions.

use loopweaver::aggregator;
use loopweaver::diffusion::{self, Latent};
use loopweaver::spectral::{self, SongRecipe, SpectrogramConfig};
use wasm_bindgen::prelude::*;

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Synthesizes a clip from recipe parameters and returns its `size x size`
/// normalized spectrogram, row-major.
pub fn synthesize(
    fundamental_hz: f64,
    harmonics: u32,
    harmonic_decay: f64,
    pulse_rate_hz: f64,
    size: usize,
    seed: u64,
) -> Result<Vec<f32>, String> {
    let cfg = SpectrogramConfig::with_size(size);
    cfg.validate().map_err(text)?;
    let recipe = SongRecipe {
        fundamental_hz,
        harmonic_count: harmonics,
        harmonic_decay,
        pulse_rate_hz,
        attack_s: 0.01,
        decay_s: 0.15,
        genre_id: 0,
    };
    let clip = spectral::synth_clip(&recipe, cfg.clip_duration(), cfg.sample_rate, seed).map_err(text)?;
    let spec = spectral::stft_magnitude(&clip, &cfg).map_err(text)?;
    Ok(spec.values().to_vec())
}

/// Spherical interpolation from `a` (t = 0) to `b` (t = 1).
pub fn blend(a: &[f32], b: &[f32], t: f64) -> Result<Vec<f32>, String> {
    aggregator::slerp(a, b, t).map_err(text)
}

/// Cumulative signal fraction of each step of a linear beta schedule.
pub fn alpha_bar(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, String> {
    let sched = diffusion::make_schedule(timesteps, beta_start, beta_end, 1).map_err(text)?;
    Ok(sched.alpha_bar().to_vec())
}

/// Noises a clean square spectrogram to step `t` with seeded Gaussian noise.
pub fn noised(
    spec: &[f32],
    t: usize,
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    seed: u64,
) -> Result<Vec<f32>, String> {
    let size = (spec.len() as f64).sqrt().round() as usize;
    let z0 = Latent::new(spec.to_vec(), size, 0).map_err(text)?;
    let sched = diffusion::make_schedule(timesteps, beta_start, beta_end, 1).map_err(text)?;
    let eps = diffusion::sample_noise(size, seed);
    Ok(diffusion::forward_noise(&z0, t, &eps, &sched).map_err(text)?.values)
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = synthesize)]
pub fn synthesize_js(
    fundamental_hz: f64,
    harmonics: u32,
    harmonic_decay: f64,
    pulse_rate_hz: f64,
    size: usize,
    seed: u32,
) -> Result<Vec<f32>, JsError> {
    synthesize(
        fundamental_hz,
        harmonics,
        harmonic_decay,
        pulse_rate_hz,
        size,
        u64::from(seed),
    )
    .map_err(js)
}

#[wasm_bindgen(js_name = blend)]
pub fn blend_js(a: &[f32], b: &[f32], t: f64) -> Result<Vec<f32>, JsError> {
    blend(a, b, t).map_err(js)
}

#[wasm_bindgen(js_name = alphaBar)]
pub fn alpha_bar_js(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, JsError> {
    alpha_bar(timesteps, beta_start, beta_end).map_err(js)
}

#[wasm_bindgen(js_name = noised)]
pub fn noised_js(
    spec: &[f32],
    t: usize,
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    seed: u32,
) -> Result<Vec<f32>, JsError> {
    noised(spec, t, timesteps, beta_start, beta_end, u64::from(seed)).map_err(js)
}
