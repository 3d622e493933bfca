use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use loopweaver::hcloop::{Engine, RatingEntry, SessionId};
use loopweaver::store::{DataDir, Manifest, RatingsLog};
use rand::rngs::OsRng;
use rand::Rng;
use serde::Serialize;

use crate::config::ServiceConfig;
use crate::error::{ApiError, ApiResult, ConfigError};

/// Seconds since the Unix epoch, replaceable in tests.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiSession {
    pub session_id: SessionId,
    pub user_id: String,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RetrainState {
    Idle,
    Running { parent_version: usize, targets: usize },
    Published { version: usize },
    Failed { message: String },
}

pub(crate) struct Store {
    pub dir: DataDir,
    pub manifest: Mutex<Manifest>,
    pub log: Mutex<RatingsLog>,
}

pub(crate) struct Shared {
    pub cfg: ServiceConfig,
    pub engine: Mutex<Engine>,
    pub store: Option<Store>,
    pub tokens: Mutex<HashMap<String, ApiSession>>,
    pub retrain: Mutex<RetrainState>,
    pub clock: Clock,
}

/// Shared handle passed to every request handler.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Shared>);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl AppState {
    /// In-memory state around an existing engine.
    pub fn new(cfg: ServiceConfig, engine: Engine) -> Self {
        Self::build(cfg, engine, None)
    }

    /// State persisted to `dir`. The engine should have been loaded from it.
    pub fn with_store(cfg: ServiceConfig, engine: Engine, dir: DataDir) -> Result<Self, ConfigError> {
        let manifest = dir.load_manifest()?;
        let log = RatingsLog::open(dir.ratings_path())?;
        let store = Store {
            dir,
            manifest: Mutex::new(manifest),
            log: Mutex::new(log),
        };
        Ok(Self::build(cfg, engine, Some(store)))
    }

    /// Loads the engine from the configured data directory.
    pub fn open(cfg: ServiceConfig) -> Result<Self, ConfigError> {
        let root = cfg
            .data_dir
            .clone()
            .ok_or_else(|| ConfigError::Invalid("data_dir is not set".into()))?;
        let dir = DataDir::open(root)?;
        let engine = dir.load_engine(cfg.hcloop.clone(), cfg.seed)?;
        Self::with_store(cfg, engine, dir)
    }

    fn build(cfg: ServiceConfig, engine: Engine, store: Option<Store>) -> Self {
        Self(Arc::new(Shared {
            cfg,
            engine: Mutex::new(engine),
            store,
            tokens: Mutex::new(HashMap::new()),
            retrain: Mutex::new(RetrainState::Idle),
            clock: system_clock(),
        }))
    }

    pub fn with_clock(self, clock: Clock) -> Self {
        let shared = Arc::try_unwrap(self.0).unwrap_or_else(|_| panic!("with_clock called on a shared state"));
        Self(Arc::new(Shared { clock, ..shared }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.cfg
    }

    pub fn now(&self) -> u64 {
        (self.0.clock)()
    }

    pub fn engine(&self) -> MutexGuard<'_, Engine> {
        lock(&self.0.engine)
    }

    pub fn retrain_state(&self) -> RetrainState {
        lock(&self.0.retrain).clone()
    }

    pub(crate) fn retrain_slot(&self) -> MutexGuard<'_, RetrainState> {
        lock(&self.0.retrain)
    }

    pub(crate) fn store(&self) -> Option<&Store> {
        self.0.store.as_ref()
    }

    /// Resolves a bearer key to its user.
    pub(crate) fn user_for_key(&self, key: &str) -> Option<&str> {
        self.0.cfg.api_keys.get(key).map(String::as_str)
    }

    pub(crate) fn is_admin_key(&self, key: &str) -> bool {
        self.0.cfg.admin_keys.iter().any(|k| k == key)
    }

    /// Issues a fresh 128-bit token for an engine session.
    pub(crate) fn issue_token(&self, session_id: SessionId, user_id: &str) -> String {
        let token = format!("{:032x}", OsRng.gen::<u128>());
        let session = ApiSession {
            session_id,
            user_id: user_id.to_string(),
            expires_at: self.now().saturating_add(self.0.cfg.session_ttl_secs),
        };
        lock(&self.0.tokens).insert(token.clone(), session);
        token
    }

    /// Looks up a live token owned by `user`. Expired tokens close their
    /// session and answer 410.
    pub(crate) fn session_for(&self, token: &str, user: &str) -> ApiResult<SessionId> {
        let now = self.now();
        let mut tokens = lock(&self.0.tokens);
        let s = tokens
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown session token"))?;
        if s.expires_at <= now {
            tokens.remove(token);
            drop(tokens);
            self.close_sessions(&[s.session_id])?;
            return Err(ApiError::new(axum::http::StatusCode::GONE, "session has expired"));
        }
        if s.user_id != user {
            return Err(ApiError::forbidden("session belongs to another user"));
        }
        Ok(s.session_id)
    }

    pub(crate) fn drop_token(&self, token: &str) {
        lock(&self.0.tokens).remove(token);
    }

    /// Closes every session whose token has expired.
    pub fn sweep_expired(&self) -> ApiResult<usize> {
        let now = self.now();
        let expired: Vec<SessionId> = {
            let mut tokens = lock(&self.0.tokens);
            let dead: Vec<String> = tokens
                .iter()
                .filter(|(_, s)| s.expires_at <= now)
                .map(|(k, _)| k.clone())
                .collect();
            dead.iter()
                .filter_map(|k| tokens.remove(k))
                .map(|s| s.session_id)
                .collect()
        };
        self.close_sessions(&expired)?;
        Ok(expired.len())
    }

    pub(crate) fn close_sessions(&self, ids: &[SessionId]) -> ApiResult<usize> {
        if ids.is_empty() {
            return Ok(0);
        }
        let mut engine = self.engine();
        let mut promoted = 0;
        for &id in ids {
            promoted += engine.close_session(id)?.len();
        }
        self.persist(&engine)?;
        Ok(promoted)
    }

    /// Writes new songs, versions and targets to the data directory.
    pub(crate) fn persist(&self, engine: &Engine) -> ApiResult<()> {
        if let Some(store) = self.store() {
            let mut m = lock(&store.manifest);
            store.dir.sync_engine(engine, &mut m)?;
        }
        Ok(())
    }

    pub(crate) fn append_rating(&self, entry: &RatingEntry) -> ApiResult<()> {
        if let Some(store) = self.store() {
            lock(&store.log).append(entry)?;
        }
        Ok(())
    }

    /// Stores an audio file next to a song and records it in the manifest.
    pub(crate) fn attach_audio(&self, song_id: u64, wav: &[u8]) -> ApiResult<()> {
        let Some(store) = self.store() else {
            return Ok(());
        };
        let rel = format!("songs/{song_id}.wav");
        loopweaver::store::write_atomic(&store.dir.path(&rel), wav)?;
        let mut m = lock(&store.manifest);
        let rec = m
            .songs
            .iter_mut()
            .find(|s| s.song_id == song_id)
            .ok_or_else(|| ApiError::internal(format!("song {song_id} missing from manifest")))?;
        rec.audio = Some(rel);
        store.dir.save_manifest(&m)?;
        Ok(())
    }

    /// Stored audio for a song, when one was uploaded or synthesized.
    pub(crate) fn stored_audio(&self, song_id: u64) -> Option<Vec<u8>> {
        let store = self.store()?;
        let rel = lock(&store.manifest)
            .songs
            .iter()
            .find(|s| s.song_id == song_id)
            .and_then(|s| s.audio.clone())?;
        std::fs::read(store.dir.path(&rel)).ok()
    }
}
