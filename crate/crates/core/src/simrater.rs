//! Simulated rater populations and a three-phase experiment driver.
//!
//! A rater's taste is a unit vector in the VQ embedding space; the star
//! rating of a song rises with the cosine between taste and the song's
//! embedding. The experiment bootstraps `v1` from base-model generations,
//! runs rating sessions over every published version to produce `v2`, and
//! finally rates paired generations of all versions on a fixed set of songs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, Denoiser, OptimizerKind, ScheduleConfig, TrainConfig, UNetArch, WeightedSample};
use crate::error::{Error, Result};
use crate::hcloop::{Engine, LoopConfig, RatingRecord, RetrainPlan, SongId, SongKind};
use crate::rng;
use crate::similarity::{self, VqConfig, VqModel};
use crate::spectral::{make_corpus, Spectrogram, SpectrogramConfig};
use crate::store::{render_table, snapshot_metrics, write_atomic, VersionMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterProfile {
    /// Unit-norm taste direction.
    pub preference: Vec<f32>,
    pub noise_sigma: f64,
    pub slope: f64,
    pub intercept: f64,
    pub listen_slope: f64,
    pub adversarial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub size: usize,
    pub adversarial_fraction: f64,
    pub intercept: f64,
    /// Intercepts are drawn uniformly from `intercept ± intercept_spread`.
    pub intercept_spread: f64,
    pub slope: f64,
    pub noise_sigma: f64,
    pub listen_slope: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            size: 50,
            adversarial_fraction: 0.0,
            intercept: 0.5,
            intercept_spread: 0.1,
            slope: 3.0,
            noise_sigma: 0.1,
            listen_slope: 1.0,
        }
    }
}

/// Draws `cfg.size` raters with preferences uniform on the unit sphere of
/// dimension `dim`. Exactly `round(size * adversarial_fraction)` of them, at
/// seeded positions, are adversarial.
pub fn make_population(cfg: &PopulationConfig, dim: usize, seed: u64) -> Result<Vec<RaterProfile>> {
    if cfg.size == 0 {
        return Err(Error::InvalidInput("population needs at least one rater".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidInput("preference dimension must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.adversarial_fraction) {
        return Err(Error::Config(format!(
            "adversarial_fraction {} must lie in [0, 1]",
            cfg.adversarial_fraction
        )));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config("noise_sigma must be non-negative".into()));
    }
    let n_adv = (cfg.size as f64 * cfg.adversarial_fraction).round() as usize;
    let mut pick = rng::stream(seed, &[0xad]);
    let adversarial: Vec<usize> = sample(&mut pick, cfg.size, n_adv).into_vec();
    (0..cfg.size)
        .map(|i| {
            let mut r = rng::stream(seed, &[0x9e, i as u64]);
            let preference = loop {
                let v = rng::gaussian_vec(&mut r, dim);
                let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.iter().map(|x| (*x as f64 / norm) as f32).collect();
                }
            };
            let jitter: f64 = r.gen_range(-1.0..=1.0);
            Ok(RaterProfile {
                preference,
                noise_sigma: cfg.noise_sigma,
                slope: cfg.slope,
                intercept: cfg.intercept + cfg.intercept_spread * jitter,
                listen_slope: cfg.listen_slope,
                adversarial: adversarial.contains(&i),
            })
        })
        .collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += (x as f64).powi(2);
        bb += (y as f64).powi(2);
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Noise-free satisfaction in `[0, 1]`.
pub fn satisfaction(profile: &RaterProfile, embedding: &[f32]) -> f64 {
    (profile.intercept + profile.slope * cosine(&profile.preference, embedding)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedRating {
    pub stars: f64,
    pub listen_seconds: f64,
    pub duration_seconds: f64,
}

/// One rater's reaction to one song.
pub fn simulate_rating<R: Rng>(
    profile: &RaterProfile,
    embedding: &[f32],
    duration: f64,
    rng: &mut R,
) -> SimulatedRating {
    if profile.adversarial {
        let ratio: f64 = rng.gen_range(0.0..0.1);
        return SimulatedRating {
            stars: 5.0,
            listen_seconds: ratio * duration,
            duration_seconds: duration,
        };
    }
    let noise = Normal::new(0.0, profile.noise_sigma.max(0.0)).expect("finite sigma");
    let s = (profile.intercept + profile.slope * cosine(&profile.preference, embedding) + noise.sample(rng))
        .clamp(0.0, 1.0);
    let stars = ((1.0 + 4.0 * s) * 2.0).round() / 2.0;
    let ratio = (profile.listen_slope * s + noise.sample(rng)).clamp(0.0, 1.0);
    SimulatedRating {
        stars,
        listen_seconds: ratio * duration,
        duration_seconds: duration,
    }
}

/// Corpus and base-model settings shared by every experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetupConfig {
    pub corpus_size: usize,
    pub genres: u32,
    pub size: usize,
    pub seed: u64,
    pub base: TrainConfig,
    pub vq: VqConfig,
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            corpus_size: 100,
            genres: 5,
            size: 64,
            seed: 1,
            base: TrainConfig {
                epochs: 40,
                learning_rate: 1e-3,
                optimizer: OptimizerKind::Adam,
                ..TrainConfig::default()
            },
            vq: VqConfig::default(),
        }
    }
}

/// The trained starting point of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub spec_config: SpectrogramConfig,
    pub corpus: Vec<(u32, Spectrogram)>,
    pub vq: VqModel,
    pub base: Denoiser,
}

impl ExperimentSetup {
    /// Synthesizes the corpus and trains the base denoiser and VQ model.
    pub fn build(cfg: &SetupConfig, sched: &ScheduleConfig) -> Result<Self> {
        let spec_config = SpectrogramConfig::with_size(cfg.size);
        let corpus: Vec<(u32, Spectrogram)> = make_corpus(cfg.corpus_size, cfg.genres, cfg.seed, &spec_config)?
            .into_iter()
            .map(|(recipe, _, spec)| (recipe.genre_id, spec))
            .collect();
        let specs: Vec<&Spectrogram> = corpus.iter().map(|(_, s)| s).collect();
        let vq = similarity::train_vqvae(&specs, &cfg.vq, rng::derive(cfg.seed, &[0x7a]))?;
        let dataset = specs
            .iter()
            .map(|s| WeightedSample::new(diffusion::Latent::clean(s), 1.0))
            .collect::<Result<Vec<_>>>()?;
        let init = Denoiser::new(UNetArch::desk(cfg.size), rng::derive(cfg.seed, &[0xba]))?;
        let train = TrainConfig {
            seed: rng::derive(cfg.seed, &[0xbb]),
            ..cfg.base
        };
        let base = diffusion::train(&init, &dataset, &sched.build()?, &train)?;
        Ok(Self {
            spec_config,
            corpus,
            vq,
            base,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: PopulationConfig,
    /// Raters that bootstrap the first fine-tune from base generations.
    pub phase1_raters: usize,
    pub phase1_sessions_per_rater: usize,
    pub phase2_sessions: usize,
    /// Sessions are closed, and promotions decided, at the end of each round.
    pub phase2_rounds: usize,
    pub serves_per_session: usize,
    /// Extra raters who rate each generated song besides its session owner.
    pub agreement_raters: usize,
    /// Probability that a session combines two input songs.
    pub multi_input_fraction: f64,
    pub eval_songs: usize,
    /// Paired serves per evaluation song and version; every rater rates
    /// every evaluation serve.
    pub eval_serves: usize,
    pub sample_steps: usize,
    pub schedule: ScheduleConfig,
    pub hcloop: LoopConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            population: PopulationConfig::default(),
            phase1_raters: 5,
            phase1_sessions_per_rater: 25,
            phase2_sessions: 400,
            phase2_rounds: 4,
            serves_per_session: 2,
            agreement_raters: 49,
            multi_input_fraction: 0.3,
            eval_songs: 10,
            eval_serves: 10,
            sample_steps: 20,
            schedule: ScheduleConfig::default(),
            hcloop: LoopConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.hcloop.validate()?;
        if self.phase1_raters == 0 || self.phase1_raters > self.population.size {
            return Err(Error::Config(format!(
                "phase1_raters {} must lie in 1..={}",
                self.phase1_raters, self.population.size
            )));
        }
        if self.agreement_raters >= self.population.size {
            return Err(Error::Config(
                "agreement_raters must be below the population size".into(),
            ));
        }
        if self.serves_per_session == 0 || self.phase2_rounds == 0 {
            return Err(Error::Config(
                "serves_per_session and phase2_rounds must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.multi_input_fraction) {
            return Err(Error::Config("multi_input_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseSummary {
    pub name: String,
    pub sessions: usize,
    pub generated: usize,
    pub original_serves: usize,
    pub ratings: usize,
    pub promoted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub parent_version: usize,
    /// Index of the published version, absent when deferred.
    pub published: Option<usize>,
    pub selected: usize,
    pub removed: usize,
    pub required: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub phases: Vec<PhaseSummary>,
    pub retrains: Vec<RetrainSummary>,
    /// Evaluation ratings per version in table layout.
    pub versions: Vec<VersionMetrics>,
    /// Noise-free mean satisfaction of cooperative raters, per version.
    pub utility: Vec<f64>,
}

impl ExperimentReport {
    pub fn mean_ratings(&self) -> Vec<f64> {
        self.versions.iter().map(|v| v.overall_mean).collect()
    }

    pub fn total_promoted(&self) -> usize {
        self.phases.iter().map(|p| p.promoted).sum()
    }

    /// Whether every version rates at least as well as its predecessor.
    pub fn is_monotone(&self) -> bool {
        self.mean_ratings().windows(2).all(|w| w[1] >= w[0])
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    engine: Engine,
    raters: Vec<RaterProfile>,
    corpus_ids: Vec<SongId>,
}

fn user(i: usize) -> String {
    format!("r{i}")
}

impl Run<'_> {
    fn rate_song(&mut self, session: Option<u64>, rater: usize, song: SongId, key: &[u64]) -> Result<()> {
        let emb = &self.engine.song(song).expect("served song").embedding;
        let duration = self.engine.clip_duration();
        let sim = simulate_rating(&self.raters[rater], emb, duration, &mut rng::stream(self.seed, key));
        let record = RatingRecord::new(song, user(rater), sim.stars, sim.listen_seconds, duration, 0)?;
        match session {
            Some(s) => self.engine.rate(s, record, None)?,
            None => self.engine.rate_agreement(record, None)?,
        };
        Ok(())
    }

    fn pick_inputs(&self, key: &[u64]) -> Vec<SongId> {
        let mut r = rng::stream(self.seed, key);
        let n = if self.corpus_ids.len() >= 2 && r.gen_bool(self.cfg.multi_input_fraction) {
            2
        } else {
            1
        };
        sample(&mut r, self.corpus_ids.len(), n)
            .into_iter()
            .map(|i| self.corpus_ids[i])
            .collect()
    }

    /// One session: serves, owner ratings and agreement ratings.
    fn session(&mut self, summary: &mut PhaseSummary, owner: usize, version: usize, key: &[u64]) -> Result<()> {
        let inputs = self.pick_inputs(&[key, &[0x1]].concat());
        let sid = self.engine.start_session_on(&user(owner), &inputs, version)?;
        summary.sessions += 1;
        for j in 0..self.cfg.serves_per_session as u64 {
            let served = self.engine.generate(sid)?;
            let kind = self.engine.song(served.song_id).expect("served").kind;
            self.rate_song(Some(sid), owner, served.song_id, &[key, &[0x2, j]].concat())?;
            summary.ratings += 1;
            if kind != SongKind::Generated {
                summary.original_serves += 1;
                continue;
            }
            summary.generated += 1;
            let others: Vec<usize> = sample(
                &mut rng::stream(self.seed, &[key, &[0x3, j]].concat()),
                self.raters.len() - 1,
                self.cfg.agreement_raters,
            )
            .into_iter()
            .map(|i| if i >= owner { i + 1 } else { i })
            .collect();
            for o in others {
                self.rate_song(None, o, served.song_id, &[key, &[0x4, j, o as u64]].concat())?;
                summary.ratings += 1;
            }
        }
        Ok(())
    }

    fn close_all(&mut self, summary: &mut PhaseSummary) -> Result<()> {
        for sid in self.engine.open_sessions() {
            summary.promoted += self.engine.close_session(sid)?.len();
        }
        Ok(())
    }

    fn retrain(&mut self) -> Result<RetrainSummary> {
        let parent_version = self.engine.head().index;
        let required = self.engine.config().min_targets.max(1);
        Ok(match self.engine.retrain(None)? {
            RetrainPlan::Ready(job) => RetrainSummary {
                parent_version,
                published: Some(self.engine.head().index),
                selected: job.selected.len(),
                removed: job.removed.len(),
                required,
            },
            RetrainPlan::Deferred { available, removed, .. } => RetrainSummary {
                parent_version,
                published: None,
                selected: available,
                removed: removed.len(),
                required,
            },
        })
    }

    fn phase1(&mut self) -> Result<PhaseSummary> {
        let mut summary = PhaseSummary {
            name: "bootstrap".into(),
            ..PhaseSummary::default()
        };
        for r in 0..self.cfg.phase1_raters {
            for k in 0..self.cfg.phase1_sessions_per_rater {
                self.session(&mut summary, r, 0, &[1, r as u64, k as u64])?;
            }
        }
        self.close_all(&mut summary)?;
        Ok(summary)
    }

    fn phase2(&mut self) -> Result<PhaseSummary> {
        let mut summary = PhaseSummary {
            name: "loop".into(),
            ..PhaseSummary::default()
        };
        let n_versions = self.engine.versions().len();
        let rounds = self.cfg.phase2_rounds;
        for k in 0..self.cfg.phase2_sessions {
            let mut r = rng::stream(self.seed, &[2, k as u64]);
            let owner = r.gen_range(0..self.raters.len());
            let version = r.gen_range(0..n_versions);
            self.session(&mut summary, owner, version, &[2, k as u64, 1])?;
            if (k + 1) * rounds / self.cfg.phase2_sessions != k * rounds / self.cfg.phase2_sessions {
                self.close_all(&mut summary)?;
            }
        }
        self.close_all(&mut summary)?;
        Ok(summary)
    }

    /// Paired evaluation: serve `j` of song `i` uses the same owner, noise
    /// seed and rating noise on every version, and is rated by everyone.
    fn evaluate(&mut self) -> Result<(Vec<VersionMetrics>, Vec<f64>)> {
        self.engine.config_mut().dispatch_probability = 0.0;
        let first_seq = self.engine.ratings().len();
        let n = self.cfg.eval_songs.min(self.corpus_ids.len());
        let songs: Vec<SongId> = sample(&mut rng::stream(self.seed, &[3]), self.corpus_ids.len(), n)
            .into_iter()
            .map(|i| self.corpus_ids[i])
            .collect();
        let n_versions = self.engine.versions().len();
        let cooperative: Vec<usize> = (0..self.raters.len())
            .filter(|&i| !self.raters[i].adversarial)
            .collect();
        let mut utility = vec![0.0; n_versions];
        let mut served = 0usize;
        for (i, &song) in songs.iter().enumerate() {
            for j in 0..self.cfg.eval_serves as u64 {
                let key = [3, i as u64, j];
                let rater = rng::stream(self.seed, &key).gen_range(0..self.raters.len());
                let noise_seed = rng::derive(self.seed, &[3, i as u64, j, 1]);
                for (v, u) in utility.iter_mut().enumerate() {
                    let sid = self.engine.start_session_seeded(&user(rater), &[song], v, noise_seed)?;
                    let out = self.engine.generate(sid)?;
                    self.rate_song(Some(sid), rater, out.song_id, &[3, i as u64, j, 2, rater as u64])?;
                    for other in (0..self.raters.len()).filter(|&o| o != rater) {
                        self.rate_song(None, other, out.song_id, &[3, i as u64, j, 2, other as u64])?;
                    }
                    let emb = &self.engine.song(out.song_id).expect("served").embedding;
                    if !cooperative.is_empty() {
                        *u += cooperative
                            .iter()
                            .map(|&c| satisfaction(&self.raters[c], emb))
                            .sum::<f64>()
                            / cooperative.len() as f64;
                    }
                }
                served += 1;
            }
        }
        let entries = &self.engine.ratings()[first_seq..];
        let metrics = (0..n_versions)
            .filter_map(|v| snapshot_metrics(entries, v, self.engine.versions()[v].created_at).ok())
            .collect();
        for u in &mut utility {
            *u /= served.max(1) as f64;
        }
        Ok((metrics, utility))
    }
}

/// Runs bootstrap, loop and evaluation phases for one seed.
pub fn run_experiment(setup: &ExperimentSetup, cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?.with_sample_steps(cfg.sample_steps)?;
    let mut engine = Engine::new(
        cfg.hcloop.clone(),
        sched,
        setup.spec_config,
        setup.vq.clone(),
        setup.base.clone(),
        rng::derive(seed, &[0xe9]),
    )?;
    let corpus_ids = setup
        .corpus
        .iter()
        .map(|(genre, spec)| engine.add_song(spec.clone(), Some(*genre)))
        .collect::<Result<Vec<_>>>()?;
    let raters = make_population(&cfg.population, setup.vq.arch().dim, rng::derive(seed, &[0x90]))?;
    let mut run = Run {
        cfg,
        seed,
        engine,
        raters,
        corpus_ids,
    };
    let mut phases = vec![run.phase1()?];
    let mut retrains = vec![run.retrain()?];
    phases.push(run.phase2()?);
    retrains.push(run.retrain()?);
    let (versions, utility) = run.evaluate()?;
    Ok(ExperimentReport {
        seed,
        phases,
        retrains,
        versions,
        utility,
    })
}

/// Writes the evaluation table as text to `path` and as comma-separated
/// values next to it with a `.csv` extension.
pub fn write_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "seed {}", report.seed);
    if !report.versions.is_empty() {
        text.push_str(&render_table(&report.versions));
    }
    for p in &report.phases {
        let _ = writeln!(
            text,
            "phase {}: {} sessions, {} generated, {} original serves, {} ratings, {} promoted",
            p.name, p.sessions, p.generated, p.original_serves, p.ratings, p.promoted
        );
    }
    for r in &report.retrains {
        match r.published {
            Some(v) => {
                let _ = writeln!(
                    text,
                    "retrain v{} -> v{v}: {} targets, {} purged",
                    r.parent_version, r.selected, r.removed
                );
            }
            None => {
                let _ = writeln!(
                    text,
                    "retrain v{} deferred: {} of {} targets",
                    r.parent_version, r.selected, r.required
                );
            }
        }
    }
    write_atomic(path, text.as_bytes())?;

    let mut csv = String::from("version,input,mean_rating,count\n");
    for v in &report.versions {
        for row in &v.rows {
            let _ = writeln!(
                csv,
                "{},\"{}\",{:.6},{}",
                v.version, row.input_key, row.mean_rating, row.count
            );
        }
        let _ = writeln!(csv, "{},overall,{:.6},{}", v.version, v.overall_mean, v.total_count);
    }
    write_atomic(&path.with_extension("csv"), csv.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(pref: Vec<f32>, intercept: f64) -> RaterProfile {
        RaterProfile {
            preference: pref,
            noise_sigma: 0.0,
            slope: 1.0,
            intercept,
            listen_slope: 1.0,
            adversarial: false,
        }
    }

    #[test]
    fn population_is_seeded_and_counts_adversaries() {
        let cfg = PopulationConfig {
            size: 5,
            ..PopulationConfig::default()
        };
        let a = make_population(&cfg, 8, 3).unwrap();
        assert_eq!(a, make_population(&cfg, 8, 3).unwrap());
        for p in &a {
            let n: f64 = p.preference.iter().map(|x| (*x as f64).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let cfg = PopulationConfig {
            size: 10,
            adversarial_fraction: 0.2,
            ..PopulationConfig::default()
        };
        let p = make_population(&cfg, 8, 3).unwrap();
        assert_eq!(p.iter().filter(|r| r.adversarial).count(), 2);
        let one = PopulationConfig {
            size: 1,
            ..PopulationConfig::default()
        };
        assert_eq!(make_population(&one, 8, 3).unwrap().len(), 1);
    }

    #[test]
    fn rating_endpoints() {
        let mut r = rng::stream(0, &[]);
        let p = profile(vec![1.0, 0.0], 0.0);
        assert_eq!(simulate_rating(&p, &[2.0, 0.0], 10.0, &mut r).stars, 5.0);
        assert_eq!(simulate_rating(&p, &[0.0, 3.0], 10.0, &mut r).stars, 1.0);
        let adv = RaterProfile { adversarial: true, ..p };
        for _ in 0..50 {
            let s = simulate_rating(&adv, &[0.0, 3.0], 10.0, &mut r);
            assert_eq!(s.stars, 5.0);
            assert!(s.listen_seconds / s.duration_seconds <= 0.1);
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        let report = ExperimentReport {
            seed: 4,
            phases: vec![],
            retrains: vec![],
            versions: vec![],
            utility: vec![],
        };
        write_report(&report, &path).unwrap();
        let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
        assert_eq!(csv, "version,input,mean_rating,count\n");
    }
}
