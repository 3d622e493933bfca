//! Merges up to three input songs into one conditioning latent: each input is
//! noised to a shared timestep with a shared noise draw, the latents are
//! combined with iterated SLERP, and the result is denoised.

use std::cmp::Ordering;

use crate::diffusion::{self, Denoiser, Latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::Spectrogram;

pub const MAX_INPUTS: usize = 3;

/// Beyond this `|cos Ω|` SLERP falls back to linear interpolation.
const PARALLEL_COS: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    pub t_enc: usize,
    /// Seed shared by every input of one aggregation.
    pub noise_seed: u64,
}

impl AggregationConfig {
    pub fn new(sched: &NoiseSchedule, strength: f64, noise_seed: u64) -> Result<Self> {
        Ok(Self {
            t_enc: sched.t_enc(strength)?,
            noise_seed,
        })
    }

    /// Mid-schedule encoding.
    pub fn midpoint(sched: &NoiseSchedule, noise_seed: u64) -> Self {
        Self {
            t_enc: (sched.timesteps() as f64 * 0.5).round().max(1.0) as usize,
            noise_seed,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spherical interpolation in `f64`.
pub fn slerp_f64(a: &[f64], b: &[f64], frac: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::InvalidInput(format!("slerp fraction {frac} outside [0, 1]")));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateInput("slerp needs nonzero finite vectors".into()));
    }
    if frac == 0.0 {
        return Ok(a.to_vec());
    }
    if frac == 1.0 {
        return Ok(b.to_vec());
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let (wa, wb) = if cos.abs() > PARALLEL_COS {
        (1.0 - frac, frac)
    } else {
        let omega = cos.acos();
        let s = omega.sin();
        (((1.0 - frac) * omega).sin() / s, (frac * omega).sin() / s)
    };
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

/// Spherical interpolation between flattened tensors.
pub fn slerp(a: &[f32], b: &[f32], frac: f64) -> Result<Vec<f32>> {
    Ok(slerp_f64(&widen(a), &widen(b), frac)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Forward-noises a spectrogram to `t_enc` with noise drawn from `seed`.
pub fn encode_to_latent(spec: &Spectrogram, sched: &NoiseSchedule, t_enc: usize, seed: u64) -> Result<Latent> {
    if t_enc == 0 || t_enc > sched.timesteps() {
        return Err(Error::Config(format!(
            "encode timestep {t_enc} must lie in 1..={}",
            sched.timesteps()
        )));
    }
    let n = spec.size();
    let eps = rng::gaussian_vec(&mut rng::stream(seed, &[0xa6]), n * n);
    diffusion::forward_noise(&Latent::clean(spec), t_enc, &eps, sched)
}

fn order_key(a: &(u64, &Latent), b: &(u64, &Latent)) -> Ordering {
    a.0.cmp(&b.0).then_with(|| {
        a.1.values
            .iter()
            .zip(&b.1.values)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Iterated SLERP over inputs sorted by ascending id: the `k`-th input enters
/// with fraction `1/k`.
pub fn aggregate_latents(inputs: &[(u64, &Latent)]) -> Result<Latent> {
    match inputs.len() {
        0 => return Err(Error::EmptyInput("aggregation inputs")),
        n if n > MAX_INPUTS => {
            return Err(Error::Cardinality {
                min: 1,
                max: MAX_INPUTS,
                got: n,
            })
        }
        _ => {}
    }
    let first = inputs[0].1;
    for (_, z) in inputs {
        if z.size != first.size || z.t != first.t || z.values.len() != first.values.len() {
            return Err(Error::shape(
                format!("{0}x{0} at t={1}", first.size, first.t),
                format!("{0}x{0} at t={1}", z.size, z.t),
            ));
        }
    }
    let mut sorted = inputs.to_vec();
    sorted.sort_by(order_key);
    let mut acc = sorted[0].1.clone();
    for (k, (_, z)) in sorted.iter().enumerate().skip(1) {
        acc.values = slerp(&acc.values, &z.values, 1.0 / (k + 1) as f64)?;
    }
    Ok(acc)
}

/// Encodes, merges and refines 1 to 3 songs. Returns the merged latent and
/// its denoised spectrogram.
pub fn aggregate_songs(
    specs: &[(u64, &Spectrogram)],
    d: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &AggregationConfig,
) -> Result<(Latent, Spectrogram)> {
    if specs.is_empty() {
        return Err(Error::EmptyInput("aggregation inputs"));
    }
    if specs.len() > MAX_INPUTS {
        return Err(Error::Cardinality {
            min: 1,
            max: MAX_INPUTS,
            got: specs.len(),
        });
    }
    let latents: Vec<(u64, Latent)> = specs
        .iter()
        .map(|(id, s)| Ok((*id, encode_to_latent(s, sched, cfg.t_enc, cfg.noise_seed)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(u64, &Latent)> = latents.iter().map(|(id, z)| (*id, z)).collect();
    let z_agg = aggregate_latents(&refs)?;
    let refined = diffusion::denoise_latent(d, sched, specs[0].1.config(), &z_agg)?;
    Ok((z_agg, refined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::spectral::SpectrogramConfig;

    #[test]
    fn endpoints_and_midpoint() {
        let a = [1.0f32, 0.0, 0.0];
        let b = [0.0f32, 1.0, 0.0];
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(slerp(&a, &b, 1.0).unwrap(), b);
        let m = slerp(&a, &b, 0.5).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((m[0] - h).abs() < 1e-6 && (m[1] - h).abs() < 1e-6 && m[2] == 0.0);
    }

    #[test]
    fn parallel_falls_back_to_lerp() {
        let a = [1.0, 2.0, -1.0];
        let b = [2.0, 4.0, -2.0];
        let m = slerp_f64(&a, &b, 0.3).unwrap();
        for i in 0..3 {
            assert!((m[i] - (0.7 * a[i] + 0.3 * b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(
            slerp(&[0.0, 0.0], &[1.0, 0.0], 0.5),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            slerp(&[0.0, 0.0], &[1.0, 0.0], 0.0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn three_orthonormal_inputs_follow_closed_form() {
        let zs: Vec<Latent> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                Latent::new(v, 2, 7).unwrap()
            })
            .collect();
        let refs: Vec<(u64, &Latent)> = zs.iter().enumerate().map(|(i, z)| (i as u64, z)).collect();
        let out = aggregate_latents(&refs).unwrap();
        // slerp(m, c, 1/3) with m ⊥ c puts sin(π/3) on m and sin(π/6) on c.
        let ab = (6.0f64.sqrt() / 4.0) as f32;
        let expected = [ab, ab, 0.5, 0.0];
        for (got, want) in out.values.iter().zip(expected) {
            assert!((got - want).abs() < 1e-6, "{:?}", out.values);
        }
        let mut rev = refs.clone();
        rev.reverse();
        assert_eq!(aggregate_latents(&rev).unwrap(), out);
    }

    #[test]
    fn cardinality_limits() {
        let z = Latent::new(vec![1.0; 4], 2, 1).unwrap();
        assert!(matches!(aggregate_latents(&[]), Err(Error::EmptyInput(_))));
        let four: Vec<(u64, &Latent)> = (0..4).map(|i| (i, &z)).collect();
        assert!(matches!(
            aggregate_latents(&four),
            Err(Error::Cardinality { got: 4, .. })
        ));
        assert_eq!(aggregate_latents(&[(3, &z)]).unwrap(), z);
        assert_eq!(aggregate_latents(&[(3, &z), (4, &z)]).unwrap(), z);
    }

    #[test]
    fn encoding_is_seeded() {
        let sched = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let cfg = SpectrogramConfig::with_size(8);
        let v: Vec<f32> = (0..64).map(|i| (i as f32 / 32.0) - 1.0).collect();
        let spec = Spectrogram::new(v, cfg).unwrap();
        let a = encode_to_latent(&spec, &sched, 1, 5).unwrap();
        assert_eq!(a, encode_to_latent(&spec, &sched, 1, 5).unwrap());
        let mae: f32 = a
            .values
            .iter()
            .zip(spec.values())
            .map(|(x, y)| (x - y).abs())
            .sum::<f32>()
            / 64.0;
        assert!(mae < 0.02, "{mae}");
        assert!(matches!(encode_to_latent(&spec, &sched, 0, 5), Err(Error::Config(_))));
        assert!(matches!(
            encode_to_latent(&spec, &sched, 1001, 5),
            Err(Error::Config(_))
        ));
    }
}
