use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::aggregator::{self, AggregationConfig};
use crate::diffusion::{self, Denoiser, Latent, NoiseSchedule, WeightedSample};
use crate::rng;
use crate::similarity::{self, Codebook, VqModel};
use crate::spectral::{Spectrogram, SpectrogramConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SongKind {
    UserInput,
    Generated,
    TrainingTarget,
}

#[derive(Debug, Clone)]
pub struct Song {
    pub id: SongId,
    pub kind: SongKind,
    pub spec: Arc<Spectrogram>,
    pub embedding: Vec<f32>,
    pub model_version: Option<usize>,
    pub session_id: Option<SessionId>,
    pub genre_id: Option<u32>,
    pub created_at: u64,
}

#[derive(Debug, Clone)]
pub struct ModelVersion {
    pub index: usize,
    pub denoiser: Arc<Denoiser>,
    pub parent: Option<usize>,
    pub n_targets: usize,
    pub created_at: u64,
}

impl ModelVersion {
    pub fn tag(&self) -> String {
        format!("v{}", self.index)
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: SessionId,
    pub user_id: String,
    /// Sorted ascending.
    pub input_song_ids: Vec<SongId>,
    pub version: usize,
    pub seed: u64,
    pub z_agg: Latent,
    pub nearest_target: Option<TargetId>,
    pub nearest_baseline: Option<f64>,
    pub rating_z0: Option<f64>,
    pub served: BTreeMap<SongId, Branch>,
    pub ratings: BTreeMap<SongId, f64>,
    pub closed: bool,
    pub created_at: u64,
    agg_embedding: Vec<f32>,
    input_similarity: Option<f64>,
    serves: u64,
}

impl Session {
    pub fn input_key(&self) -> String {
        input_key(&self.input_song_ids)
    }
}

pub(crate) fn input_key(ids: &[SongId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Server-side facts about one serve, never exposed to the rater.
#[derive(Debug, Clone)]
struct ServeInfo {
    session_id: SessionId,
    branch: Branch,
    factors: RatingFactors,
    model_version: usize,
    input_key: String,
}

/// What a client receives for a serve; identical for both branches.
#[derive(Debug, Clone)]
pub struct Served {
    pub song_id: SongId,
    pub spec: Arc<Spectrogram>,
    pub duration_seconds: f64,
}

/// One accepted rating as written to the ratings log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingEntry {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    #[serde(flatten)]
    pub record: RatingRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    pub branch: Branch,
    pub model_version: usize,
    pub input_key: String,
    pub factors: RatingFactors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingOutcome {
    pub seq: u64,
    /// This rater's `R` at submission time.
    pub rating: f64,
    /// Number of ratings now held for the song.
    pub consensus_count: usize,
    /// True when an idempotency key matched an earlier submission.
    pub replayed: bool,
}

#[derive(Debug, Clone)]
pub struct RetrainJob {
    pub parent_version: usize,
    pub base: Arc<Denoiser>,
    pub dataset: Vec<WeightedSample>,
    pub selected: Vec<TargetId>,
    pub removed: Vec<TargetId>,
    pub sched: NoiseSchedule,
    pub train: crate::diffusion::TrainConfig,
}

impl RetrainJob {
    /// Runs the fine-tuning step; holds no engine state.
    pub fn run(&self) -> Result<Denoiser> {
        diffusion::train(&self.base, &self.dataset, &self.sched, &self.train)
    }
}

#[derive(Debug, Clone)]
pub enum RetrainPlan {
    Deferred {
        available: usize,
        required: usize,
        removed: Vec<TargetId>,
    },
    Ready(RetrainJob),
}

/// Serializable state apart from songs' spectrograms and model parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub targets: Vec<TrainingTarget>,
    pub ratings: Vec<RatingEntry>,
}

/// The human-computation loop over one model lineage.
pub struct Engine {
    cfg: LoopConfig,
    sched: NoiseSchedule,
    spec_cfg: SpectrogramConfig,
    vq: Arc<VqModel>,
    codebook: Codebook,
    seed: u64,
    versions: Vec<ModelVersion>,
    songs: BTreeMap<SongId, Song>,
    sessions: HashMap<SessionId, Session>,
    serves: HashMap<SongId, ServeInfo>,
    targets: Vec<TrainingTarget>,
    ratings: Vec<RatingEntry>,
    by_song: HashMap<SongId, Vec<usize>>,
    rated: HashSet<(SongId, String)>,
    idempotency: HashMap<String, RatingOutcome>,
    users: HashMap<String, UserStats>,
    next_song: SongId,
    next_session: SessionId,
    next_target: TargetId,
    clock: u64,
}

impl Engine {
    pub fn new(
        cfg: LoopConfig,
        sched: NoiseSchedule,
        spec_cfg: SpectrogramConfig,
        vq: VqModel,
        base: Denoiser,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        spec_cfg.validate()?;
        if !vq.is_trained() {
            return Err(Error::NotReady("VQ model must be trained before serving".into()));
        }
        if base.size() != spec_cfg.size || vq.arch().size != spec_cfg.size {
            return Err(Error::shape(
                spec_cfg.size,
                format!("denoiser {} / vq {}", base.size(), vq.arch().size),
            ));
        }
        let codebook = vq.codebook();
        Ok(Self {
            cfg,
            sched,
            spec_cfg,
            vq: Arc::new(vq),
            codebook,
            seed,
            versions: vec![ModelVersion {
                index: 0,
                denoiser: Arc::new(base),
                parent: None,
                n_targets: 0,
                created_at: 0,
            }],
            songs: BTreeMap::new(),
            sessions: HashMap::new(),
            serves: HashMap::new(),
            targets: Vec::new(),
            ratings: Vec::new(),
            by_song: HashMap::new(),
            rated: HashSet::new(),
            idempotency: HashMap::new(),
            users: HashMap::new(),
            next_song: 1,
            next_session: 1,
            next_target: 1,
            clock: 0,
        })
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut LoopConfig {
        &mut self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn spec_config(&self) -> &SpectrogramConfig {
        &self.spec_cfg
    }

    pub fn vq(&self) -> &VqModel {
        &self.vq
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn versions(&self) -> &[ModelVersion] {
        &self.versions
    }

    pub fn head(&self) -> &ModelVersion {
        self.versions.last().expect("at least one version")
    }

    pub fn songs(&self) -> impl Iterator<Item = &Song> {
        self.songs.values()
    }

    pub fn song(&self, id: SongId) -> Option<&Song> {
        self.songs.get(&id)
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    pub fn targets(&self) -> &[TrainingTarget] {
        &self.targets
    }

    pub fn ratings(&self) -> &[RatingEntry] {
        &self.ratings
    }

    pub fn user_stats(&self, user: &str) -> Option<&UserStats> {
        self.users.get(user)
    }

    pub fn clip_duration(&self) -> f64 {
        self.spec_cfg.clip_duration()
    }

    fn insert_song(
        &mut self,
        spec: Arc<Spectrogram>,
        embedding: Vec<f32>,
        kind: SongKind,
        model_version: Option<usize>,
        session_id: Option<SessionId>,
        genre_id: Option<u32>,
    ) -> SongId {
        let id = self.next_song;
        self.next_song += 1;
        let created_at = self.tick();
        self.songs.insert(
            id,
            Song {
                id,
                kind,
                spec,
                embedding,
                model_version,
                session_id,
                genre_id,
                created_at,
            },
        );
        id
    }

    /// Registers an input song and computes its embedding.
    pub fn add_song(&mut self, spec: Spectrogram, genre_id: Option<u32>) -> Result<SongId> {
        if spec.config() != &self.spec_cfg {
            return Err(Error::InvalidInput(
                "spectrogram configuration differs from the engine's".into(),
            ));
        }
        let emb = similarity::encode_song(&self.vq, &spec)?.v;
        Ok(self.insert_song(Arc::new(spec), emb, SongKind::UserInput, None, None, genre_id))
    }

    /// Re-registers a stored song under its original id.
    pub fn restore_song(&mut self, song: Song) -> Result<()> {
        if self.songs.contains_key(&song.id) {
            return Err(Error::Integrity(format!("song {} already registered", song.id)));
        }
        self.next_song = self.next_song.max(song.id + 1);
        self.clock = self.clock.max(song.created_at);
        self.songs.insert(song.id, song);
        Ok(())
    }

    pub fn publish_restored(&mut self, denoiser: Denoiser, n_targets: usize) -> Result<usize> {
        self.publish_version(denoiser, n_targets)
    }

    /// Replays persisted targets and ratings into a freshly built engine.
    pub fn restore(&mut self, snapshot: EngineSnapshot) -> Result<()> {
        for t in snapshot.targets {
            self.next_target = self.next_target.max(t.target_id + 1);
            self.clock = self.clock.max(t.created_at);
            self.targets.push(t);
        }
        for entry in snapshot.ratings {
            let song = entry.record.song_id;
            let user = entry.record.user_id.clone();
            let stats = self.users.entry(user.clone()).or_insert_with(|| UserStats::new(&user));
            *stats = stats.observe(&entry.record, &self.cfg.trust);
            self.rated.insert((song, user));
            self.by_song.entry(song).or_default().push(self.ratings.len());
            let outcome = RatingOutcome {
                seq: entry.seq,
                rating: 0.0,
                consensus_count: self.by_song[&song].len(),
                replayed: true,
            };
            if let Some(key) = &entry.idempotency_key {
                self.idempotency.insert(key.clone(), outcome);
            }
            self.clock = self.clock.max(entry.record.submitted_at);
            self.ratings.push(entry);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            targets: self.targets.clone(),
            ratings: self.ratings.clone(),
        }
    }

    fn aggregate_embedding(&self, ids: &[SongId]) -> Result<Vec<f32>> {
        let mut acc = self.songs[&ids[0]].embedding.clone();
        for (k, id) in ids.iter().enumerate().skip(1) {
            acc = aggregator::slerp(&acc, &self.songs[id].embedding, 1.0 / (k + 1) as f64)?;
        }
        Ok(acc)
    }

    pub fn start_session(&mut self, user: &str, inputs: &[SongId]) -> Result<SessionId> {
        let head = self.head().index;
        self.start_session_on(user, inputs, head)
    }

    /// Starts a session served by a specific published version.
    pub fn start_session_on(&mut self, user: &str, inputs: &[SongId], version: usize) -> Result<SessionId> {
        let seed = rng::derive(self.seed, &[0x5e55, self.next_session]);
        self.start_session_seeded(user, inputs, version, seed)
    }

    /// Starts a session whose noise draws come from `seed`, so that the same
    /// seed on different versions yields paired generations.
    pub fn start_session_seeded(
        &mut self,
        user: &str,
        inputs: &[SongId],
        version: usize,
        seed: u64,
    ) -> Result<SessionId> {
        if inputs.is_empty() || inputs.len() > MAX_INPUT_SONGS {
            return Err(Error::Cardinality {
                min: 1,
                max: MAX_INPUT_SONGS,
                got: inputs.len(),
            });
        }
        if version >= self.versions.len() {
            return Err(Error::NotFound(format!("model version v{version}")));
        }
        let mut ids = inputs.to_vec();
        ids.sort_unstable();
        for id in &ids {
            if !self.songs.contains_key(id) {
                return Err(Error::NotFound(format!("song {id}")));
            }
        }
        let id = self.next_session;
        self.next_session += 1;
        let agg_embedding = self.aggregate_embedding(&ids)?;
        let input_similarity = if ids.len() >= 2 {
            let vs: Vec<&[f32]> = ids.iter().map(|i| &self.songs[i].embedding[..]).collect();
            Some(similarity::similarity_score(&self.codebook, &vs)?)
        } else {
            None
        };
        let z_agg = self.aggregate_latent(&ids, rng::derive(seed, &[0]))?;
        let nearest = self
            .targets
            .iter()
            .map(|t| (pair_similarity(&agg_embedding, &t.input_embedding), t))
            .fold(None::<(f64, &TrainingTarget)>, |best, (s, t)| match best {
                Some((bs, _)) if bs >= s => best,
                _ => Some((s, t)),
            })
            .map(|(_, t)| (t.target_id, t.baseline_rating));
        let created_at = self.tick();
        self.sessions.insert(
            id,
            Session {
                id,
                user_id: user.to_string(),
                input_song_ids: ids,
                version,
                seed,
                z_agg,
                nearest_target: nearest.map(|n| n.0),
                nearest_baseline: nearest.and_then(|n| n.1),
                rating_z0: None,
                served: BTreeMap::new(),
                ratings: BTreeMap::new(),
                closed: false,
                created_at,
                agg_embedding,
                input_similarity,
                serves: 0,
            },
        );
        Ok(id)
    }

    fn aggregate_latent(&self, ids: &[SongId], noise_seed: u64) -> Result<Latent> {
        let agg = AggregationConfig::new(&self.sched, self.cfg.strength, noise_seed)?;
        let latents: Vec<(u64, Latent)> = ids
            .iter()
            .map(|id| {
                let z = aggregator::encode_to_latent(&self.songs[id].spec, &self.sched, agg.t_enc, noise_seed)?;
                Ok((*id, z))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<(u64, &Latent)> = latents.iter().map(|(i, z)| (*i, z)).collect();
        aggregator::aggregate_latents(&refs)
    }

    fn open_session(&self, session_id: SessionId) -> Result<&Session> {
        let s = self
            .sessions
            .get(&session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        if s.closed {
            return Err(Error::Expired(format!("session {session_id}")));
        }
        Ok(s)
    }

    /// Serves one song for the session: the matched stored target with the
    /// configured probability while no baseline exists, else a fresh
    /// generation from the session's inputs.
    pub fn generate(&mut self, session_id: SessionId) -> Result<Served> {
        let s = self.open_session(session_id)?;
        let serve_index = s.serves;
        let u: f64 = rng::stream(s.seed, &[0xd15, serve_index]).gen();
        let target = s
            .nearest_target
            .and_then(|t| self.targets.iter().find(|x| x.target_id == t));
        let branch = dispatch_branch(
            u,
            self.cfg.dispatch_probability,
            s.rating_z0.is_some(),
            target.is_some(),
        );
        let version = s.version;
        let ids = s.input_song_ids.clone();
        let agg_embedding = s.agg_embedding.clone();
        let input_similarity = s.input_similarity;
        let (spec, embedding, kind) = match (branch, target) {
            (Branch::OriginalTarget, Some(t)) => {
                let song = &self.songs[&t.song_id];
                (song.spec.clone(), song.embedding.clone(), SongKind::TrainingTarget)
            }
            _ => {
                let noise_seed = rng::derive(s.seed, &[serve_index]);
                let z = if serve_index == 0 {
                    s.z_agg.clone()
                } else {
                    self.aggregate_latent(&ids, noise_seed)?
                };
                let d = &self.versions[version].denoiser;
                let spec = diffusion::denoise_latent(d, &self.sched, &self.spec_cfg, &z)?;
                let emb = similarity::encode_song(&self.vq, &spec)?.v;
                (Arc::new(spec), emb, SongKind::Generated)
            }
        };
        let output_similarity = similarity::similarity_score(&self.codebook, &[&embedding[..], &agg_embedding[..]])?;
        let song_id = self.insert_song(spec.clone(), embedding, kind, Some(version), Some(session_id), None);
        self.serves.insert(
            song_id,
            ServeInfo {
                session_id,
                branch,
                factors: RatingFactors {
                    input_similarity,
                    output_similarity,
                },
                model_version: version,
                input_key: input_key(&ids),
            },
        );
        let s = self.sessions.get_mut(&session_id).expect("session checked above");
        s.serves += 1;
        s.served.insert(song_id, branch);
        Ok(Served {
            song_id,
            spec,
            duration_seconds: self.spec_cfg.clip_duration(),
        })
    }

    fn trust(&self, user: &str) -> f64 {
        self.users.get(user).map_or(1.0, |u| u.trust_weight)
    }

    fn accept(&mut self, mut record: RatingRecord, info: ServeInfo, idempotency_key: Option<String>) -> RatingOutcome {
        if record.submitted_at == 0 {
            record.submitted_at = self.tick();
        } else {
            self.clock = self.clock.max(record.submitted_at);
        }
        let user = record.user_id.clone();
        let stats = self.users.entry(user.clone()).or_insert_with(|| UserStats::new(&user));
        *stats = stats.observe(&record, &self.cfg.trust);
        let rating = compute_rating(&record, &info.factors, stats.trust_weight);
        let seq = self.ratings.len() as u64 + 1;
        let song = record.song_id;
        self.rated.insert((song, user));
        self.by_song.entry(song).or_default().push(self.ratings.len());
        self.ratings.push(RatingEntry {
            seq,
            idempotency_key: idempotency_key.clone(),
            record,
            session_id: Some(info.session_id),
            branch: info.branch,
            model_version: info.model_version,
            input_key: info.input_key,
            factors: info.factors,
        });
        let outcome = RatingOutcome {
            seq,
            rating,
            consensus_count: self.by_song[&song].len(),
            replayed: false,
        };
        if let Some(key) = idempotency_key {
            self.idempotency.insert(
                key,
                RatingOutcome {
                    replayed: true,
                    ..outcome.clone()
                },
            );
        }
        outcome
    }

    fn check_new_rating(&self, record: &RatingRecord, key: &Option<String>) -> Result<Option<RatingOutcome>> {
        if let Some(prev) = key.as_ref().and_then(|k| self.idempotency.get(k)) {
            return Ok(Some(prev.clone()));
        }
        if self.rated.contains(&(record.song_id, record.user_id.clone())) {
            return Err(Error::DuplicateRating {
                song_id: record.song_id,
                user: record.user_id.clone(),
            });
        }
        Ok(None)
    }

    /// Records the session owner's rating of a song served in the session.
    pub fn rate(
        &mut self,
        session_id: SessionId,
        record: RatingRecord,
        idempotency_key: Option<String>,
    ) -> Result<RatingOutcome> {
        if let Some(prev) = self.check_new_rating(&record, &idempotency_key)? {
            return Ok(prev);
        }
        let s = self
            .sessions
            .get(&session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        if s.user_id != record.user_id {
            return Err(Error::Integrity(format!(
                "session {session_id} belongs to another user"
            )));
        }
        let branch = *s.served.get(&record.song_id).ok_or_else(|| {
            Error::Integrity(format!(
                "song {} was not served in session {session_id}",
                record.song_id
            ))
        })?;
        let info = self.serves[&record.song_id].clone();
        let outcome = self.accept(record, info, idempotency_key);
        let s = self.sessions.get_mut(&session_id).expect("session checked above");
        let song_id = self.ratings.last().expect("just pushed").record.song_id;
        if branch == Branch::OriginalTarget && s.rating_z0.is_none() {
            s.rating_z0 = Some(outcome.rating);
        } else {
            s.ratings.insert(song_id, outcome.rating);
        }
        Ok(outcome)
    }

    /// Records an output-agreement rating of a generated song by a user other
    /// than the session owner.
    pub fn rate_agreement(&mut self, record: RatingRecord, idempotency_key: Option<String>) -> Result<RatingOutcome> {
        if let Some(prev) = self.check_new_rating(&record, &idempotency_key)? {
            return Ok(prev);
        }
        let info = self
            .serves
            .get(&record.song_id)
            .filter(|i| i.branch == Branch::Generated)
            .ok_or_else(|| Error::Integrity(format!("song {} is not a served generation", record.song_id)))?
            .clone();
        if self.sessions[&info.session_id].user_id == record.user_id {
            return Err(Error::Integrity("session owners rate through their session".into()));
        }
        Ok(self.accept(record, info, idempotency_key))
    }

    /// Trust-weighted consensus over every rating of a song, using each
    /// rater's current trust.
    pub fn consensus(&self, song_id: SongId) -> Option<Consensus> {
        let idx = self.by_song.get(&song_id)?;
        let rated: Vec<(f64, f64)> = idx
            .iter()
            .map(|&i| {
                let e = &self.ratings[i];
                let trust = self.trust(&e.record.user_id);
                (compute_rating(&e.record, &e.factors, trust), trust)
            })
            .collect();
        consensus_rating(&rated).ok()
    }

    fn confidence(&self, song_id: SongId) -> f64 {
        let idx = &self.by_song[&song_id];
        let (mut num, mut den) = (0.0, 0.0);
        for &i in idx {
            let e = &self.ratings[i];
            let w = self.trust(&e.record.user_id);
            num += w * compute_confidence(&e.record, &self.cfg.omega);
            den += w;
        }
        if den > 0.0 {
            (num / den).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    /// Closes the session and promotes every generated song whose consensus
    /// beats the session baseline.
    pub fn close_session(&mut self, session_id: SessionId) -> Result<Vec<TargetId>> {
        let s = self
            .sessions
            .get(&session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        if s.closed {
            return Ok(Vec::new());
        }
        let baseline = session_baseline(s.rating_z0, s.nearest_baseline);
        let inputs = s.input_song_ids.clone();
        let input_embedding = s.agg_embedding.clone();
        let generated: Vec<SongId> = s
            .served
            .iter()
            .filter(|(_, b)| **b == Branch::Generated)
            .map(|(id, _)| *id)
            .collect();
        let mut promoted = Vec::new();
        for song_id in generated {
            let Some(c) = self.consensus(song_id) else { continue };
            if !should_promote(&c, baseline, self.cfg.min_trusted_weight, self.cfg.min_mean_trust) {
                continue;
            }
            let omega = self.confidence(song_id);
            let created_at = self.tick();
            let target_id = self.next_target;
            self.next_target += 1;
            let song = &self.songs[&song_id];
            self.targets.push(TrainingTarget {
                target_id,
                input_song_ids: inputs.clone(),
                song_id,
                embedding: song.embedding.clone(),
                input_embedding: input_embedding.clone(),
                baseline_rating: Some(c.rating),
                omega,
                created_version: song.model_version.unwrap_or(0),
                created_at,
            });
            promoted.push(target_id);
        }
        self.sessions.get_mut(&session_id).expect("checked").closed = true;
        Ok(promoted)
    }

    /// Whether `user` already has a rating for the song.
    pub fn has_rated(&self, song_id: SongId, user: &str) -> bool {
        self.rated.contains(&(song_id, user.to_string()))
    }

    /// Session in which a song was served.
    pub fn serving_session(&self, song_id: SongId) -> Option<SessionId> {
        self.serves.get(&song_id).map(|i| i.session_id)
    }

    pub fn open_sessions(&self) -> Vec<SessionId> {
        let mut ids: Vec<SessionId> = self.sessions.values().filter(|s| !s.closed).map(|s| s.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Removes stale and near-duplicate targets from the whole set.
    pub fn purge(&mut self) -> Vec<TargetId> {
        let (kept, removed) = purge_cycle_by(&self.targets, self.head().index, &self.cfg.purge, |a, b| {
            self.pair_score(a, b)
        });
        self.retain_targets(&kept);
        removed.iter().map(|t| t.target_id).collect()
    }

    /// Codebook similarity score of two song embeddings.
    pub fn pair_score(&self, a: &[f32], b: &[f32]) -> f64 {
        similarity::similarity_score(&self.codebook, &[a, b]).unwrap_or(0.0)
    }

    fn retain_targets(&mut self, kept: &[TrainingTarget]) {
        let keep: HashSet<TargetId> = kept.iter().map(|t| t.target_id).collect();
        self.targets.retain(|t| keep.contains(&t.target_id));
    }

    /// Top-K of the head version's targets, purged, checked against the
    /// minimum, and packaged as a training job against the head parameters.
    pub fn prepare_retrain(&mut self, k: Option<usize>) -> Result<RetrainPlan> {
        let head = self.head().clone();
        let k = k.unwrap_or(self.cfg.top_k);
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let candidates: Vec<TrainingTarget> = self
            .targets
            .iter()
            .filter(|t| t.created_version == head.index)
            .cloned()
            .collect();
        let selected = select_topk(&candidates, k);
        let (kept, removed) = purge_cycle_by(&selected, head.index, &self.cfg.purge, |a, b| self.pair_score(a, b));
        let removed_ids: Vec<TargetId> = removed.iter().map(|t| t.target_id).collect();
        self.targets.retain(|t| !removed_ids.contains(&t.target_id));
        if kept.len() < self.cfg.min_targets.max(1) {
            return Ok(RetrainPlan::Deferred {
                available: kept.len(),
                required: self.cfg.min_targets.max(1),
                removed: removed_ids,
            });
        }
        let dataset = kept
            .iter()
            .map(|t| WeightedSample::new(Latent::clean(&self.songs[&t.song_id].spec), t.omega))
            .collect::<Result<Vec<_>>>()?;
        let mut train = self.cfg.finetune;
        train.seed = rng::derive(train.seed, &[head.index as u64 + 1]);
        Ok(RetrainPlan::Ready(RetrainJob {
            parent_version: head.index,
            base: head.denoiser.clone(),
            dataset,
            selected: kept.iter().map(|t| t.target_id).collect(),
            removed: removed_ids,
            sched: self.sched.clone(),
            train,
        }))
    }

    /// Publishes the result of a job prepared against the current head.
    pub fn publish(&mut self, job: &RetrainJob, denoiser: Denoiser) -> Result<usize> {
        if job.parent_version != self.head().index {
            return Err(Error::Integrity(format!(
                "retrain was prepared against v{} but head is v{}",
                job.parent_version,
                self.head().index
            )));
        }
        self.publish_version(denoiser, job.selected.len())
    }

    fn publish_version(&mut self, denoiser: Denoiser, n_targets: usize) -> Result<usize> {
        if denoiser.arch() != self.head().denoiser.arch() {
            return Err(Error::IncompatibleCheckpoint(
                "architecture differs from the lineage".into(),
            ));
        }
        let index = self.versions.len();
        let created_at = self.tick();
        self.versions.push(ModelVersion {
            index,
            denoiser: Arc::new(denoiser),
            parent: Some(index - 1),
            n_targets,
            created_at,
        });
        Ok(index)
    }

    /// Prepare, train and publish in one call.
    pub fn retrain(&mut self, k: Option<usize>) -> Result<RetrainPlan> {
        let plan = self.prepare_retrain(k)?;
        if let RetrainPlan::Ready(job) = &plan {
            let d = job.run()?;
            self.publish(job, d)?;
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, UNetArch};
    use crate::similarity::VqArch;

    fn engine(cfg: LoopConfig) -> Engine {
        let sched = make_schedule(100, 1e-4, 0.02, 5).unwrap();
        let spec_cfg = SpectrogramConfig::with_size(8);
        let arch = VqArch {
            size: 8,
            widths: [2, 2, 2],
            dim: 4,
            codes: 4,
        };
        let fresh = VqModel::new(arch, 3).unwrap();
        let vq = VqModel::from_params(arch, fresh.params().to_vec(), 1).unwrap();
        let d = Denoiser::new(UNetArch::new(8, [2, 2, 2], 4).unwrap(), 5).unwrap();
        Engine::new(cfg, sched, spec_cfg, vq, d, 11).unwrap()
    }

    fn spec(seed: u64) -> Spectrogram {
        let v = rng::gaussian_vec(&mut rng::stream(seed, &[1]), 64)
            .into_iter()
            .map(|x| (x * 0.5).clamp(-1.0, 1.0))
            .collect();
        Spectrogram::new(v, SpectrogramConfig::with_size(8)).unwrap()
    }

    fn rec(e: &Engine, song: SongId, user: &str, stars: f64) -> RatingRecord {
        RatingRecord::new(song, user, stars, e.clip_duration(), e.clip_duration(), 0).unwrap()
    }

    #[test]
    fn cold_start_generates_and_promotes() {
        let mut e = engine(LoopConfig::default());
        let a = e.add_song(spec(1), None).unwrap();
        let b = e.add_song(spec(2), None).unwrap();
        let s = e.start_session("ann", &[b, a]).unwrap();
        assert_eq!(e.session(s).unwrap().input_song_ids, vec![a, b]);
        assert_eq!(e.session(s).unwrap().nearest_target, None);
        let served = e.generate(s).unwrap();
        assert_eq!(e.song(served.song_id).unwrap().kind, SongKind::Generated);
        let r = rec(&e, served.song_id, "ann", 4.0);
        e.rate(s, r, None).unwrap();
        let promoted = e.close_session(s).unwrap();
        assert_eq!(promoted.len(), 1);
        assert_eq!(e.targets()[0].input_song_ids, vec![a, b]);
        assert!(matches!(e.generate(s), Err(Error::Expired(_))));
    }

    #[test]
    fn input_cardinality_and_unknown_songs() {
        let mut e = engine(LoopConfig::default());
        let ids: Vec<SongId> = (0..4).map(|i| e.add_song(spec(i), None).unwrap()).collect();
        assert!(matches!(
            e.start_session("u", &[]),
            Err(Error::Cardinality { got: 0, .. })
        ));
        assert!(matches!(
            e.start_session("u", &ids),
            Err(Error::Cardinality { got: 4, .. })
        ));
        assert!(matches!(e.start_session("u", &[999]), Err(Error::NotFound(_))));
    }

    #[test]
    fn exact_match_target_dispatch_and_baseline() {
        let mut e = engine(LoopConfig::default());
        let a = e.add_song(spec(1), None).unwrap();
        let s = e.start_session("ann", &[a]).unwrap();
        let g = e.generate(s).unwrap();
        e.rate(s, rec(&e, g.song_id, "ann", 5.0), None).unwrap();
        let t = e.close_session(s).unwrap()[0];

        let mut original = 0;
        for i in 0..400 {
            let s = e.start_session(&format!("u{i}"), &[a]).unwrap();
            assert_eq!(e.session(s).unwrap().nearest_target, Some(t));
            let served = e.generate(s).unwrap();
            if e.song(served.song_id).unwrap().kind == SongKind::TrainingTarget {
                original += 1;
                let user = e.session(s).unwrap().user_id.clone();
                e.rate(s, rec(&e, served.song_id, &user, 2.0), None).unwrap();
                assert!(e.session(s).unwrap().rating_z0.is_some());
                for _ in 0..5 {
                    let next = e.generate(s).unwrap();
                    assert_eq!(e.song(next.song_id).unwrap().kind, SongKind::Generated);
                }
            }
        }
        assert!((70..=130).contains(&original), "{original}");
    }

    #[test]
    fn rating_integrity() {
        let mut e = engine(LoopConfig::default());
        let a = e.add_song(spec(1), None).unwrap();
        let s = e.start_session("ann", &[a]).unwrap();
        let g = e.generate(s).unwrap();
        assert!(matches!(
            e.rate(s, rec(&e, a, "ann", 3.0), None),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            e.rate(s, rec(&e, g.song_id, "bob", 3.0), None),
            Err(Error::Integrity(_))
        ));
        let first = e.rate(s, rec(&e, g.song_id, "ann", 3.0), Some("k1".into())).unwrap();
        let again = e.rate(s, rec(&e, g.song_id, "ann", 3.0), Some("k1".into())).unwrap();
        assert!(again.replayed && again.seq == first.seq);
        assert_eq!(e.ratings().len(), 1);
        assert!(matches!(
            e.rate(s, rec(&e, g.song_id, "ann", 4.0), Some("k2".into())),
            Err(Error::DuplicateRating { .. })
        ));
        e.rate_agreement(rec(&e, g.song_id, "bob", 2.0), None).unwrap();
        let g2 = e.generate(s).unwrap();
        assert!(matches!(
            e.rate_agreement(rec(&e, g2.song_id, "ann", 2.0), None),
            Err(Error::Integrity(_))
        ));
        assert_eq!(e.consensus(g.song_id).unwrap().weight, 2.0);
    }

    #[test]
    fn promotion_requires_strictly_better_consensus() {
        let mut e = engine(LoopConfig::default());
        let a = e.add_song(spec(1), None).unwrap();
        let s = e.start_session("ann", &[a]).unwrap();
        let g = e.generate(s).unwrap();
        e.rate(s, rec(&e, g.song_id, "ann", 3.0), None).unwrap();
        e.close_session(s).unwrap();
        let baseline = e.targets()[0].baseline_rating.unwrap();

        let s = e.start_session("bob", &[a]).unwrap();
        e.sessions.get_mut(&s).unwrap().rating_z0 = Some(baseline + 1.0);
        let g = e.generate(s).unwrap();
        e.rate(s, rec(&e, g.song_id, "bob", 5.0), None).unwrap();
        assert!(e.close_session(s).unwrap().is_empty());
    }

    #[test]
    fn retrain_defers_then_publishes() {
        let mut cfg = LoopConfig {
            min_targets: 2,
            ..LoopConfig::default()
        };
        cfg.finetune.epochs = 1;
        let mut e = engine(cfg);
        let a = e.add_song(spec(1), None).unwrap();
        let b = e.add_song(spec(2), None).unwrap();
        let s = e.start_session("ann", &[a]).unwrap();
        let g = e.generate(s).unwrap();
        e.rate(s, rec(&e, g.song_id, "ann", 2.0), None).unwrap();
        e.close_session(s).unwrap();
        assert!(matches!(
            e.prepare_retrain(None).unwrap(),
            RetrainPlan::Deferred {
                available: 1,
                required: 2,
                ..
            }
        ));
        let s = e.start_session("bob", &[b]).unwrap();
        let g = e.generate(s).unwrap();
        e.rate(s, rec(&e, g.song_id, "bob", 5.0), None).unwrap();
        assert_eq!(e.close_session(s).unwrap().len(), 1);
        e.config_mut().purge.similarity_threshold = 1.0;
        let RetrainPlan::Ready(job) = e.prepare_retrain(None).unwrap() else {
            panic!("expected a job")
        };
        let d = job.run().unwrap();
        assert_eq!(e.publish(&job, d.clone()).unwrap(), 1);
        assert_eq!(e.head().parent, Some(0));
        assert!(matches!(e.publish(&job, d), Err(Error::Integrity(_))));
    }
}
