//! Rollout, rating collection and training-target bookkeeping for the
//! human-computation loop, plus the stateful [`Engine`] that ties them to the
//! generator and the similarity model.

mod engine;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::diffusion::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};

pub use engine::{
    Engine, EngineSnapshot, ModelVersion, RatingEntry, RatingOutcome, RetrainJob, RetrainPlan, Served, Session, Song,
    SongKind,
};

pub type SongId = u64;
pub type SessionId = u64;
pub type TargetId = u64;

pub const MAX_INPUT_SONGS: usize = 3;

/// Weights of stars and listen ratio in the confidence `omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmegaWeights {
    pub rating: f64,
    pub listen: f64,
}

impl Default for OmegaWeights {
    fn default() -> Self {
        Self {
            rating: 0.7,
            listen: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRule {
    pub min_ratings: usize,
    pub rating_threshold: f64,
    pub listen_threshold: f64,
}

impl Default for TrustRule {
    fn default() -> Self {
        Self {
            min_ratings: 10,
            rating_threshold: 0.9,
            listen_threshold: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurgeConfig {
    pub similarity_threshold: f64,
    pub max_age_versions: usize,
}

impl Default for PurgeConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.95,
            max_age_versions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub dispatch_probability: f64,
    pub strength: f64,
    pub top_k: usize,
    pub min_targets: usize,
    /// Promotion needs at least this much summed trust behind the consensus.
    pub min_trusted_weight: f64,
    /// and at least this mean trust per rating.
    pub min_mean_trust: f64,
    pub omega: OmegaWeights,
    pub trust: TrustRule,
    pub purge: PurgeConfig,
    pub finetune: TrainConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            dispatch_probability: 0.25,
            strength: 0.5,
            top_k: 100,
            min_targets: 20,
            min_trusted_weight: 1.0,
            min_mean_trust: 0.5,
            omega: OmegaWeights::default(),
            trust: TrustRule::default(),
            purge: PurgeConfig::default(),
            finetune: TrainConfig {
                epochs: 10,
                learning_rate: 1e-4,
                optimizer: OptimizerKind::Adam,
                ..TrainConfig::default()
            },
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("dispatch_probability", self.dispatch_probability)?;
        unit("omega.rating", self.omega.rating)?;
        unit("omega.listen", self.omega.listen)?;
        unit("purge.similarity_threshold", self.purge.similarity_threshold)?;
        unit("min_mean_trust", self.min_mean_trust)?;
        unit("trust.rating_threshold", self.trust.rating_threshold)?;
        unit("trust.listen_threshold", self.trust.listen_threshold)?;
        if (self.omega.rating + self.omega.listen - 1.0).abs() > 1e-9 {
            return Err(Error::Config("omega weights must sum to 1".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Config(format!("strength {} must lie in (0, 1]", self.strength)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.min_trusted_weight >= 0.0) {
            return Err(Error::Config("min_trusted_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Maps 1..=5 stars in half steps to [0, 1].
pub fn normalize_stars(stars: f64) -> Result<f64> {
    let doubled = stars * 2.0;
    if !(1.0..=5.0).contains(&stars) || (doubled - doubled.round()).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "stars {stars} must be one of 1.0, 1.5, ..., 5.0"
        )));
    }
    Ok((stars - 1.0) / 4.0)
}

pub fn listen_ratio(listen_seconds: f64, duration_seconds: f64) -> f64 {
    (listen_seconds / duration_seconds).clamp(0.0, 1.0)
}

/// One user's explicit and implicit feedback on one served song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub song_id: SongId,
    pub user_id: String,
    pub stars: f64,
    pub listen_seconds: f64,
    pub duration_seconds: f64,
    pub submitted_at: u64,
}

impl RatingRecord {
    /// Validates the star grid and clamps listen time to twice the duration.
    pub fn new(
        song_id: SongId,
        user_id: impl Into<String>,
        stars: f64,
        listen_seconds: f64,
        duration_seconds: f64,
        submitted_at: u64,
    ) -> Result<Self> {
        normalize_stars(stars)?;
        if !(duration_seconds > 0.0 && duration_seconds.is_finite()) {
            return Err(Error::Validation(format!(
                "duration {duration_seconds} must be positive"
            )));
        }
        if !(listen_seconds >= 0.0 && listen_seconds.is_finite()) {
            return Err(Error::Validation(format!(
                "listen_seconds {listen_seconds} must be non-negative"
            )));
        }
        Ok(Self {
            song_id,
            user_id: user_id.into(),
            stars,
            listen_seconds: listen_seconds.min(2.0 * duration_seconds),
            duration_seconds,
            submitted_at,
        })
    }

    pub fn norm_stars(&self) -> f64 {
        (self.stars - 1.0) / 4.0
    }

    pub fn listen_ratio(&self) -> f64 {
        listen_ratio(self.listen_seconds, self.duration_seconds)
    }
}

/// System-side rating factors of a served song.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingFactors {
    /// Similarity among the input songs; absent with a single input.
    pub input_similarity: Option<f64>,
    /// Similarity of the served song to the aggregated inputs.
    pub output_similarity: f64,
}

/// Unweighted mean of the defined factors, with the star factor scaled by
/// the rater's trust.
pub fn compute_rating(record: &RatingRecord, factors: &RatingFactors, trust: f64) -> f64 {
    let mut terms = vec![
        factors.output_similarity,
        record.norm_stars() * trust.clamp(0.0, 1.0),
        record.listen_ratio(),
    ];
    terms.extend(factors.input_similarity);
    (terms.iter().sum::<f64>() / terms.len() as f64).clamp(0.0, 1.0)
}

pub fn compute_confidence(record: &RatingRecord, weights: &OmegaWeights) -> f64 {
    (weights.rating * record.norm_stars() + weights.listen * record.listen_ratio()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub user_id: String,
    pub n_ratings: usize,
    pub mean_norm_rating: f64,
    pub mean_listen_ratio: f64,
    pub trust_weight: f64,
}

impl UserStats {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            n_ratings: 0,
            mean_norm_rating: 0.0,
            mean_listen_ratio: 0.0,
            trust_weight: 1.0,
        }
    }

    /// Folds one record into the running means and re-evaluates trust.
    pub fn observe(&self, record: &RatingRecord, rule: &TrustRule) -> Self {
        let n = self.n_ratings + 1;
        let w = 1.0 / n as f64;
        let next = Self {
            user_id: self.user_id.clone(),
            n_ratings: n,
            mean_norm_rating: self.mean_norm_rating + w * (record.norm_stars() - self.mean_norm_rating),
            mean_listen_ratio: self.mean_listen_ratio + w * (record.listen_ratio() - self.mean_listen_ratio),
            trust_weight: self.trust_weight,
        };
        update_trust(&next, rule)
    }
}

/// Users who give near-maximal ratings while barely listening are weighted
/// by their listen ratio; everyone else keeps full trust.
pub fn update_trust(stats: &UserStats, rule: &TrustRule) -> UserStats {
    let suspicious = stats.n_ratings >= rule.min_ratings
        && stats.mean_norm_rating >= rule.rating_threshold
        && stats.mean_listen_ratio <= rule.listen_threshold;
    UserStats {
        trust_weight: if suspicious {
            stats.mean_listen_ratio.clamp(0.0, 1.0)
        } else {
            1.0
        },
        ..stats.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consensus {
    pub rating: f64,
    /// Summed trust behind the rating.
    pub weight: f64,
    pub count: usize,
}

impl Consensus {
    pub fn mean_trust(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.weight / self.count as f64
        }
    }
}

/// Trust-weighted mean of `(rating, trust)` pairs. With zero total trust
/// the plain mean is reported alongside a zero weight.
pub fn consensus_rating(rated: &[(f64, f64)]) -> Result<Consensus> {
    if rated.is_empty() {
        return Err(Error::EmptyInput("consensus ratings"));
    }
    let weight: f64 = rated.iter().map(|(_, w)| w.max(0.0)).sum();
    let rating = if weight > 0.0 {
        rated.iter().map(|(r, w)| r * w.max(0.0)).sum::<f64>() / weight
    } else {
        rated.iter().map(|(r, _)| r).sum::<f64>() / rated.len() as f64
    };
    Ok(Consensus {
        rating,
        weight,
        count: rated.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    OriginalTarget,
    Generated,
}

/// Serves the stored target with probability `p` while the session has no
/// baseline rating yet.
pub fn dispatch_branch(u: f64, p: f64, rating_z0_set: bool, target_exists: bool) -> Branch {
    if u < p && !rating_z0_set && target_exists {
        Branch::OriginalTarget
    } else {
        Branch::Generated
    }
}

/// Promotion threshold: the session's own baseline, else the matched
/// target's stored rating, else 0.
pub fn session_baseline(rating_z0: Option<f64>, nearest_baseline: Option<f64>) -> f64 {
    rating_z0.or(nearest_baseline).unwrap_or(0.0)
}

/// Whether a generated song becomes a training target: a strictly higher
/// consensus backed by enough total and mean trust.
pub fn should_promote(consensus: &Consensus, baseline: f64, min_trusted_weight: f64, min_mean_trust: f64) -> bool {
    consensus.rating > baseline && consensus.weight >= min_trusted_weight && consensus.mean_trust() >= min_mean_trust
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTarget {
    pub target_id: TargetId,
    pub input_song_ids: Vec<SongId>,
    /// Song holding the target spectrogram.
    pub song_id: SongId,
    pub embedding: Vec<f32>,
    pub input_embedding: Vec<f32>,
    pub baseline_rating: Option<f64>,
    pub omega: f64,
    pub created_version: usize,
    pub created_at: u64,
}

impl TrainingTarget {
    fn rating(&self) -> f64 {
        self.baseline_rating.unwrap_or(0.0)
    }
}

/// Higher rating first, then older, then lower id.
fn priority(a: &TrainingTarget, b: &TrainingTarget) -> Ordering {
    b.rating()
        .total_cmp(&a.rating())
        .then(a.created_at.cmp(&b.created_at))
        .then(a.target_id.cmp(&b.target_id))
}

pub fn select_topk(candidates: &[TrainingTarget], k: usize) -> Vec<TrainingTarget> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(priority);
    sorted.truncate(k);
    sorted
}

/// Pairwise similarity `(1 + cos) / 2`: 1 for identical directions.
pub fn pair_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    (1.0 + (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)) / 2.0
}

/// Drops stale targets, then keeps targets in priority order, removing any
/// whose similarity to an already kept one exceeds the threshold. Pairs are
/// compared with [`pair_similarity`].
pub fn purge_cycle(
    targets: &[TrainingTarget],
    current_version: usize,
    cfg: &PurgeConfig,
) -> (Vec<TrainingTarget>, Vec<TrainingTarget>) {
    purge_cycle_by(targets, current_version, cfg, pair_similarity)
}

/// [`purge_cycle`] with a caller-supplied pair similarity over embeddings.
pub fn purge_cycle_by(
    targets: &[TrainingTarget],
    current_version: usize,
    cfg: &PurgeConfig,
    similarity: impl Fn(&[f32], &[f32]) -> f64,
) -> (Vec<TrainingTarget>, Vec<TrainingTarget>) {
    let mut sorted = targets.to_vec();
    sorted.sort_by(priority);
    let mut kept: Vec<TrainingTarget> = Vec::new();
    let mut removed = Vec::new();
    for t in sorted {
        let stale = current_version.saturating_sub(t.created_version) > cfg.max_age_versions;
        let duplicate = kept
            .iter()
            .any(|k| similarity(&k.embedding, &t.embedding) > cfg.similarity_threshold);
        if stale || duplicate {
            removed.push(t);
        } else {
            kept.push(t);
        }
    }
    (kept, removed)
}
