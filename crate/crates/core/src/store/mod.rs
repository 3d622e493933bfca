//! On-disk formats and the data directory layout.
//!
//! * `SPG1` spectrograms: magic, `u16` width, `u16` height, row-major `f32` LE.
//! * `DNZ1` / `VQE1` checkpoints: magic, `u16` format version, `u32`-prefixed
//!   UTF-8 architecture descriptor, `u64` parameter count, `f32` LE params.
//! * Ratings: one JSON object per line, append-only.
//! * Manifest: a JSON document listing songs, versions and targets.

mod metrics;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::{metrics_from_rows, render_table, snapshot_metrics, SongMetrics, VersionMetrics};

use crate::diffusion::{Denoiser, ScheduleConfig, UNetArch};
use crate::error::{Error, Result};
use crate::hcloop::{
    Engine, EngineSnapshot, LoopConfig, RatingEntry, SessionId, Song, SongId, SongKind, TrainingTarget,
};
use crate::similarity::{parse_vq_descriptor, VqModel};
use crate::spectral::{Spectrogram, SpectrogramConfig};

pub const SPG_MAGIC: [u8; 4] = *b"SPG1";
pub const CHECKPOINT_VERSION: u16 = 1;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::storage(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(format_err(
                self.pos,
                format!("truncated {what}: expected {n} bytes, found {rest}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Reads exactly the rest of the buffer as `count` floats.
    fn f32s_to_end(&mut self, count: u64, what: &str) -> Result<Vec<f32>> {
        let rest = (self.bytes.len() - self.pos) as u64;
        if count.checked_mul(4) != Some(rest) {
            return Err(format_err(
                self.pos,
                format!(
                    "{what}: header declares {count} values ({} bytes), payload has {rest} bytes",
                    count.saturating_mul(4)
                ),
            ));
        }
        let out = self.bytes[self.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        self.pos = self.bytes.len();
        Ok(out)
    }
}

pub fn encode_spectrogram(spec: &Spectrogram) -> Vec<u8> {
    let n = spec.size() as u16;
    let mut out = Vec::with_capacity(8 + spec.values().len() * 4);
    out.extend_from_slice(&SPG_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for v in spec.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes an `SPG1` buffer whose grid must match `cfg.size`.
pub fn decode_spectrogram(bytes: &[u8], cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != SPG_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected SPG1")));
    }
    let w = r.u16("width")? as usize;
    let h = r.u16("height")? as usize;
    if w != cfg.size || h != cfg.size {
        return Err(format_err(
            4,
            format!("grid {w}x{h} does not match configured {0}x{0}", cfg.size),
        ));
    }
    let values = r.f32s_to_end((w * h) as u64, "spectrogram payload")?;
    if let Some(i) = values.iter().position(|v| !(-1.0..=1.0).contains(v)) {
        return Err(format_err(8 + 4 * i, format!("value {} outside [-1, 1]", values[i])));
    }
    Spectrogram::new(values, *cfg)
}

pub fn save_spectrogram(path: &Path, spec: &Spectrogram) -> Result<()> {
    write_atomic(path, &encode_spectrogram(spec))
}

pub fn load_spectrogram(path: &Path, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    decode_spectrogram(&read_file(path)?, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Denoiser,
    Vq,
}

impl CheckpointKind {
    pub fn magic(self) -> [u8; 4] {
        match self {
            Self::Denoiser => *b"DNZ1",
            Self::Vq => *b"VQE1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub descriptor: String,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let d = self.descriptor.as_bytes();
        let mut out = Vec::with_capacity(18 + d.len() + self.params.len() * 4);
        out.extend_from_slice(&self.kind.magic());
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(d.len() as u32).to_le_bytes());
        out.extend_from_slice(d);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], kind: CheckpointKind) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != kind.magic() {
            let other = [CheckpointKind::Denoiser, CheckpointKind::Vq]
                .into_iter()
                .find(|k| k.magic() == magic);
            return Err(match other {
                Some(k) => Error::IncompatibleCheckpoint(format!("expected a {kind:?} checkpoint, found {k:?}")),
                None => format_err(0, format!("bad magic {magic:?}")),
            });
        }
        let version = r.u16("format version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(4, format!("unsupported format version {version}")));
        }
        let len = r.u32("descriptor length")? as usize;
        let start = r.pos;
        let descriptor = std::str::from_utf8(r.take(len, "descriptor")?)
            .map_err(|e| format_err(start + e.valid_up_to(), "descriptor is not UTF-8"))?
            .to_string();
        let count = r.u64("parameter count")?;
        let params = r.f32s_to_end(count, "parameters")?;
        Ok(Self {
            kind,
            descriptor,
            params,
        })
    }
}

pub fn denoiser_checkpoint(d: &Denoiser) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Denoiser,
        descriptor: d.descriptor(),
        params: d.params().to_vec(),
    }
}

pub fn denoiser_from_checkpoint(c: &Checkpoint) -> Result<Denoiser> {
    let arch: UNetArch = c.descriptor.parse()?;
    if arch.n_params() != c.params.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} needs {} parameters, checkpoint has {}",
            c.descriptor,
            arch.n_params(),
            c.params.len()
        )));
    }
    Denoiser::from_params(arch, c.params.clone())
}

pub fn save_denoiser(path: &Path, d: &Denoiser) -> Result<()> {
    write_atomic(path, &denoiser_checkpoint(d).encode())
}

/// Loads a denoiser, optionally insisting on an architecture.
pub fn load_denoiser(path: &Path, expected: Option<&UNetArch>) -> Result<Denoiser> {
    let d = denoiser_from_checkpoint(&Checkpoint::decode(&read_file(path)?, CheckpointKind::Denoiser)?)?;
    match expected {
        Some(arch) if arch != d.arch() => Err(Error::IncompatibleCheckpoint(format!(
            "expected {arch}, found {}",
            d.arch()
        ))),
        _ => Ok(d),
    }
}

pub fn vq_checkpoint(m: &VqModel) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Vq,
        descriptor: m.descriptor(),
        params: m.params().to_vec(),
    }
}

pub fn vq_from_checkpoint(c: &Checkpoint) -> Result<VqModel> {
    let (arch, epochs) = parse_vq_descriptor(&c.descriptor)?;
    if arch.n_params() != c.params.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{arch} needs {} parameters, checkpoint has {}",
            arch.n_params(),
            c.params.len()
        )));
    }
    VqModel::from_params(arch, c.params.clone(), epochs)
}

pub fn save_vq(path: &Path, m: &VqModel) -> Result<()> {
    write_atomic(path, &vq_checkpoint(m).encode())
}

pub fn load_vq(path: &Path) -> Result<VqModel> {
    vq_from_checkpoint(&Checkpoint::decode(&read_file(path)?, CheckpointKind::Vq)?)
}

/// Append-only ratings log. A torn tail left by a crash is dropped on open.
pub struct RatingsLog {
    path: PathBuf,
    file: File,
    last_seq: u64,
}

impl RatingsLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        }
        let existing = scan_ratings(&path, |_| true)?;
        if path.exists() {
            let bytes = read_file(&path)?;
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep < bytes.len() {
                log::warn!("{}: dropping {} torn bytes", path.display(), bytes.len() - keep);
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(|e| Error::storage(&path, e))?;
                f.set_len(keep as u64).map_err(|e| Error::storage(&path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::storage(&path, e))?;
        Ok(Self {
            path,
            file,
            last_seq: existing.last().map_or(0, |e| e.seq),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Appends one entry as a single write; sequence numbers must increase.
    pub fn append(&mut self, entry: &RatingEntry) -> Result<u64> {
        if entry.seq <= self.last_seq {
            return Err(Error::Integrity(format!(
                "rating sequence {} does not follow {}",
                entry.seq, self.last_seq
            )));
        }
        let mut line = serde_json::to_vec(entry).map_err(|e| Error::Validation(e.to_string()))?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::storage(&self.path, e))?;
        self.last_seq = entry.seq;
        Ok(entry.seq)
    }
}

/// Reads the log in append order, keeping entries accepted by `filter`.
/// A missing file is an empty log; an unterminated final line is skipped.
pub fn scan_ratings(path: &Path, filter: impl Fn(&RatingEntry) -> bool) -> Result<Vec<RatingEntry>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::storage(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::storage(path, e))?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            log::warn!("{}: skipping torn final record at byte {offset}", path.display());
            break;
        }
        if !line.trim().is_empty() {
            let entry: RatingEntry =
                serde_json::from_str(&line).map_err(|e| format_err(offset, format!("bad rating record: {e}")))?;
            if filter(&entry) {
                out.push(entry);
            }
        }
        offset += n;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongRecord {
    pub song_id: SongId,
    pub kind: SongKind,
    /// Relative to the data directory.
    pub spectrogram: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre_id: Option<u32>,
    pub created_at: u64,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub index: usize,
    #[serde(default)]
    pub parent: Option<usize>,
    pub n_targets: usize,
    pub created_at: u64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    pub spectrogram: SpectrogramConfig,
    pub schedule: ScheduleConfig,
    /// Relative path of the VQ checkpoint once trained.
    pub vq: Option<String>,
    pub songs: Vec<SongRecord>,
    pub versions: Vec<VersionRecord>,
    pub targets: Vec<TrainingTarget>,
}

/// A data directory holding the manifest, spectrograms, checkpoints and the
/// ratings log.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["songs", "models"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::storage(&p, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn ratings_path(&self) -> PathBuf {
        self.root.join("ratings.jsonl")
    }

    pub fn has_manifest(&self) -> bool {
        self.manifest_path().exists()
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::NotFound(format!("{} (run `corpus` first)", path.display())));
        }
        let bytes = read_file(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| format_err(e.column(), format!("manifest: {e}")))
    }

    pub fn save_manifest(&self, m: &Manifest) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(m).map_err(|e| Error::Validation(e.to_string()))?;
        write_atomic(&self.manifest_path(), &bytes)
    }

    /// Writes a song's spectrogram and returns its manifest record.
    pub fn put_song(&self, song: &Song) -> Result<SongRecord> {
        let rel = format!("songs/{}.spg", song.id);
        save_spectrogram(&self.path(&rel), &song.spec)?;
        Ok(SongRecord {
            song_id: song.id,
            kind: song.kind,
            spectrogram: rel,
            audio: None,
            model_version: song.model_version,
            session_id: song.session_id,
            genre_id: song.genre_id,
            created_at: song.created_at,
            embedding: song.embedding.clone(),
        })
    }

    pub fn load_song(&self, rec: &SongRecord, cfg: &SpectrogramConfig) -> Result<Song> {
        Ok(Song {
            id: rec.song_id,
            kind: rec.kind,
            spec: std::sync::Arc::new(load_spectrogram(&self.path(&rec.spectrogram), cfg)?),
            embedding: rec.embedding.clone(),
            model_version: rec.model_version,
            session_id: rec.session_id,
            genre_id: rec.genre_id,
            created_at: rec.created_at,
        })
    }

    pub fn version_path(index: usize) -> String {
        format!("models/v{index}.dnz")
    }

    /// Rebuilds an engine from the manifest, checkpoints and ratings log.
    pub fn load_engine(&self, cfg: LoopConfig, seed: u64) -> Result<Engine> {
        let m = self.load_manifest()?;
        let vq_rel =
            m.vq.as_ref()
                .ok_or_else(|| Error::NotReady("no VQ checkpoint (run `train-vq`)".into()))?;
        let vq = load_vq(&self.path(vq_rel))?;
        let first = m
            .versions
            .first()
            .ok_or_else(|| Error::NotReady("no base model (run `train-base`)".into()))?;
        let base = load_denoiser(&self.path(&first.checkpoint), None)?;
        let arch = *base.arch();
        let mut engine = Engine::new(cfg, m.schedule.build()?, m.spectrogram, vq, base, seed)?;
        for v in &m.versions[1..] {
            let d = load_denoiser(&self.path(&v.checkpoint), Some(&arch))?;
            engine.publish_restored(d, v.n_targets)?;
        }
        for rec in &m.songs {
            engine.restore_song(self.load_song(rec, &m.spectrogram)?)?;
        }
        engine.restore(EngineSnapshot {
            targets: m.targets.clone(),
            ratings: scan_ratings(&self.ratings_path(), |_| true)?,
        })?;
        Ok(engine)
    }

    /// Writes songs, versions and targets the manifest does not yet hold.
    pub fn sync_engine(&self, engine: &Engine, m: &mut Manifest) -> Result<()> {
        let known: std::collections::HashSet<SongId> = m.songs.iter().map(|s| s.song_id).collect();
        for song in engine.songs().filter(|s| !known.contains(&s.id)) {
            m.songs.push(self.put_song(song)?);
        }
        for v in &engine.versions()[m.versions.len().min(engine.versions().len())..] {
            let rel = Self::version_path(v.index);
            save_denoiser(&self.path(&rel), &v.denoiser)?;
            m.versions.push(VersionRecord {
                index: v.index,
                parent: v.parent,
                n_targets: v.n_targets,
                created_at: v.created_at,
                checkpoint: rel,
            });
        }
        m.targets = engine.targets().to_vec();
        self.save_manifest(m)
    }
}
