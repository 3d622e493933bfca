use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use loopweaver::diffusion::{self, Denoiser, Latent, UNetArch, WeightedSample};
use loopweaver::hcloop::{RetrainPlan, SongKind};
use loopweaver::simrater::{self, ExperimentSetup};
use loopweaver::spectral::{self, Spectrogram, SpectrogramConfig};
use loopweaver::store::{self, render_table, snapshot_metrics, DataDir, Manifest, SongRecord, VersionRecord};
use loopweaver::{rng, similarity, Error as CoreError};
use loopweaver_service::AppState;
use serde::Serialize;

use crate::config::Config;
use crate::lock::DirLock;
use crate::{Cli, Command, CorpusArgs, EpochArgs, ReportArgs, RetrainArgs, ServeArgs, SimulateArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.setup.seed = seed;
        cfg.service.seed = seed;
    }
    if let Some(s) = cli.strength {
        cfg.service.hcloop.strength = s;
        cfg.experiment.hcloop.strength = s;
    }
    cfg.service.validate()?;
    cfg.experiment.validate()?;
    let root = cli.data_dir.as_path();
    match cli.command {
        Command::Corpus(a) => corpus(root, &mut cfg, a),
        Command::TrainBase(a) => train_base(root, &mut cfg, a),
        Command::TrainVq(a) => train_vq(root, &mut cfg, a),
        Command::Serve(a) => serve(root, cfg, a),
        Command::Simulate(a) => simulate(root, cfg, a),
        Command::Retrain(a) => retrain(root, &cfg, a),
        Command::Report(a) => report(root, a),
        Command::Purge => purge(root, &cfg),
    }
}

fn corpus(root: &Path, cfg: &mut Config, a: CorpusArgs) -> Result<()> {
    let _lock = DirLock::acquire(root)?;
    let setup = &mut cfg.setup;
    setup.corpus_size = a.n.unwrap_or(setup.corpus_size);
    setup.genres = a.genres.unwrap_or(setup.genres);
    setup.size = a.size.unwrap_or(setup.size);
    let dir = DataDir::open(root)?;
    if dir.has_manifest() && !dir.load_manifest()?.songs.is_empty() {
        bail!("{} already holds a corpus", root.display());
    }
    let spec_cfg = SpectrogramConfig::with_size(setup.size);
    let songs = spectral::make_corpus(setup.corpus_size, setup.genres, setup.seed, &spec_cfg)?;
    let mut m = Manifest {
        spectrogram: spec_cfg,
        schedule: cfg.experiment.schedule,
        ..Manifest::default()
    };
    for (i, (recipe, clip, spec)) in songs.iter().enumerate() {
        let id = i as u64 + 1;
        let spg = format!("songs/{id}.spg");
        let wav = format!("songs/{id}.wav");
        store::save_spectrogram(&dir.path(&spg), spec)?;
        store::write_atomic(&dir.path(&wav), &spectral::wav_bytes(clip)?)?;
        m.songs.push(SongRecord {
            song_id: id,
            kind: SongKind::UserInput,
            spectrogram: spg,
            audio: Some(wav),
            model_version: None,
            session_id: None,
            genre_id: Some(recipe.genre_id),
            created_at: 0,
            embedding: Vec::new(),
        });
    }
    dir.save_manifest(&m)?;
    println!(
        "wrote {} songs in {} genres ({}x{}) to {}",
        m.songs.len(),
        setup.genres,
        setup.size,
        setup.size,
        root.display()
    );
    Ok(())
}

fn corpus_specs(dir: &DataDir, m: &Manifest) -> Result<Vec<Spectrogram>> {
    let specs = m
        .songs
        .iter()
        .filter(|s| s.kind == SongKind::UserInput)
        .map(|s| store::load_spectrogram(&dir.path(&s.spectrogram), &m.spectrogram))
        .collect::<Result<Vec<_>, _>>()?;
    if specs.is_empty() {
        bail!("the corpus is empty (run `corpus` first)");
    }
    Ok(specs)
}

fn train_base(root: &Path, cfg: &mut Config, a: EpochArgs) -> Result<()> {
    let _lock = DirLock::acquire(root)?;
    let dir = DataDir::open(root)?;
    let mut m = dir.load_manifest()?;
    if m.versions.len() > 1 {
        bail!("the lineage already has {} fine-tuned versions", m.versions.len() - 1);
    }
    let specs = corpus_specs(&dir, &m)?;
    let dataset = specs
        .iter()
        .map(|s| WeightedSample::new(Latent::clean(s), 1.0))
        .collect::<Result<Vec<_>, _>>()?;
    let seed = cfg.setup.seed;
    let mut train = cfg.setup.base;
    train.epochs = a.epochs.unwrap_or(train.epochs);
    train.seed = rng::derive(seed, &[0xbb]);
    let init = Denoiser::new(UNetArch::desk(m.spectrogram.size), rng::derive(seed, &[0xba]))?;
    let sched = m.schedule.build()?;
    let start = Instant::now();
    let base = diffusion::train_with_progress(&init, &dataset, &sched, &train, |epoch, loss| {
        log::info!("epoch {}/{}: loss {loss:.5}", epoch + 1, train.epochs);
    })?;
    let rel = DataDir::version_path(0);
    store::save_denoiser(&dir.path(&rel), &base)?;
    m.versions = vec![VersionRecord {
        index: 0,
        parent: None,
        n_targets: 0,
        created_at: 0,
        checkpoint: rel.clone(),
    }];
    dir.save_manifest(&m)?;
    println!(
        "trained v0 on {} songs in {:.1}s -> {rel}",
        dataset.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train_vq(root: &Path, cfg: &mut Config, a: EpochArgs) -> Result<()> {
    let _lock = DirLock::acquire(root)?;
    let dir = DataDir::open(root)?;
    let mut m = dir.load_manifest()?;
    let specs = corpus_specs(&dir, &m)?;
    let mut vq_cfg = cfg.setup.vq;
    vq_cfg.epochs = a.epochs.unwrap_or(vq_cfg.epochs);
    let start = Instant::now();
    let refs: Vec<&Spectrogram> = specs.iter().collect();
    let vq = similarity::train_vqvae(&refs, &vq_cfg, rng::derive(cfg.setup.seed, &[0x7a]))?;
    let rel = "models/vq.vqe".to_string();
    store::save_vq(&dir.path(&rel), &vq)?;
    for rec in &mut m.songs {
        let spec = store::load_spectrogram(&dir.path(&rec.spectrogram), &m.spectrogram)?;
        rec.embedding = similarity::encode_song(&vq, &spec)?.v;
    }
    m.vq = Some(rel.clone());
    dir.save_manifest(&m)?;
    println!(
        "trained VQ on {} songs in {:.1}s, embedded {} songs -> {rel}",
        specs.len(),
        start.elapsed().as_secs_f64(),
        m.songs.len()
    );
    Ok(())
}

fn serve(root: &Path, cfg: Config, a: ServeArgs) -> Result<()> {
    let _lock = DirLock::acquire(root)?;
    let mut svc = cfg.service;
    svc.data_dir = Some(root.to_path_buf());
    svc.port = a.port.unwrap_or(svc.port);
    svc.bind = a.bind.unwrap_or(svc.bind);
    svc.static_dir = a.static_dir.or(svc.static_dir);
    svc.validate()?;
    let state = AppState::open(svc).context("loading the data directory")?;
    tokio::runtime::Runtime::new()?
        .block_on(loopweaver_service::serve(state))
        .context("serving")
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    mean_ratings: Vec<f64>,
    utility: Vec<f64>,
    monotone: bool,
    promoted: usize,
    seconds: f64,
}

fn simulate(root: &Path, mut cfg: Config, a: SimulateArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let exp = &mut cfg.experiment;
    if let Some(f) = a.adversarial {
        exp.population.adversarial_fraction = f;
    }
    if let Some(n) = a.raters {
        exp.population.size = n;
    }
    exp.validate()?;
    let out = if a.out.is_absolute() {
        a.out.clone()
    } else {
        root.join(&a.out)
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let start = Instant::now();
    let setup = ExperimentSetup::build(&cfg.setup, &exp.schedule)?;
    log::info!("setup built in {:.1}s", start.elapsed().as_secs_f64());
    let mut summaries = Vec::new();
    for seed in cfg.setup.seed..cfg.setup.seed + a.seeds {
        let t = Instant::now();
        let report = simrater::run_experiment(&setup, exp, seed)?;
        simrater::write_report(&report, &out.join(format!("seed-{seed}.txt")))?;
        let s = SeedSummary {
            seed,
            mean_ratings: report.mean_ratings(),
            utility: report.utility.clone(),
            monotone: report.is_monotone(),
            promoted: report.total_promoted(),
            seconds: t.elapsed().as_secs_f64(),
        };
        let ratings: Vec<String> = s.mean_ratings.iter().map(|r| format!("{r:.3}")).collect();
        println!(
            "seed {seed}: ratings {} monotone {} promoted {} ({:.0}s)",
            ratings.join(" / "),
            s.monotone,
            s.promoted,
            s.seconds
        );
        summaries.push(s);
    }
    let gains: Vec<f64> = summaries
        .iter()
        .filter_map(|s| Some(s.mean_ratings.last()? - s.mean_ratings.first()?))
        .collect();
    let monotone = summaries.iter().filter(|s| s.monotone).count();
    println!(
        "monotone on {monotone} of {} seeds, mean first-to-last change {:+.3}",
        summaries.len(),
        gains.iter().sum::<f64>() / gains.len().max(1) as f64
    );
    let path = out.join("summary.json");
    store::write_atomic(&path, &serde_json::to_vec_pretty(&summaries)?)?;
    println!("reports in {}", out.display());
    Ok(())
}

fn retrain(root: &Path, cfg: &Config, a: RetrainArgs) -> Result<()> {
    let _lock = DirLock::acquire(root)?;
    let dir = DataDir::open(root)?;
    let mut m = dir.load_manifest()?;
    let mut engine = dir.load_engine(cfg.service.hcloop.clone(), cfg.service.seed)?;
    let plan = engine.prepare_retrain(a.k)?;
    match plan {
        RetrainPlan::Deferred {
            available,
            required,
            removed,
        } => {
            dir.sync_engine(&engine, &mut m)?;
            println!(
                "deferred: {available} targets after purging {}, {required} required",
                removed.len()
            );
        }
        RetrainPlan::Ready(job) => {
            let start = Instant::now();
            let d = job.run()?;
            let v = engine.publish(&job, d)?;
            dir.sync_engine(&engine, &mut m)?;
            println!(
                "published v{v} from v{} on {} targets ({} purged) in {:.1}s",
                job.parent_version,
                job.selected.len(),
                job.removed.len(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn report(root: &Path, a: ReportArgs) -> Result<()> {
    let dir = DataDir::open(root)?;
    let m = dir.load_manifest()?;
    let ratings = store::scan_ratings(&dir.ratings_path(), |_| true)?;
    let mut snapshots = Vec::new();
    for v in &m.versions {
        match snapshot_metrics(&ratings, v.index, v.created_at) {
            Ok(s) => snapshots.push(s),
            Err(CoreError::EmptyInput(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&snapshots)?);
    } else if snapshots.is_empty() {
        println!("no ratings of generated songs yet");
    } else {
        print!("{}", render_table(&snapshots));
    }
    Ok(())
}

fn purge(root: &Path, cfg: &Config) -> Result<()> {
    let _lock = DirLock::acquire(root)?;
    let dir = DataDir::open(root)?;
    let mut m = dir.load_manifest()?;
    let mut engine = dir.load_engine(cfg.service.hcloop.clone(), cfg.service.seed)?;
    let removed = engine.purge();
    dir.sync_engine(&engine, &mut m)?;
    println!("removed {} targets, {} remain", removed.len(), engine.targets().len());
    Ok(())
}
