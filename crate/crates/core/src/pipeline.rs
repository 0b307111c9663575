//! End-to-end orchestration: reference segmentation, label transfer,
//! per-episode refinement and dataset compilation, plus the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::{read_episode, write_episode, write_segmentation, Episode, Label, Segment, Segmentation};
use crate::downsample::{self, compile_episode, AccelPlan, HorizonMode, ReplicaEpisode};
use crate::error::{Error, Result};
use crate::features::build_features;
use crate::geometry::primary_relation;
use crate::provider::{self, build_request};
use crate::segmentation::refine;
use crate::transfer::transfer_episode;

pub const EPISODE_SUFFIX: &str = ".episode.jsonl";
pub const SEGMENTS_SUFFIX: &str = ".segments.json";

/// Episode files in `dir`, sorted by file name.
pub fn list_episode_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_episode = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(EPISODE_SUFFIX));
        if is_episode && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_corpus(dir: impl AsRef<Path>, pool: &rayon::ThreadPool) -> Result<Vec<Episode>> {
    let files = list_episode_files(&dir)?;
    pool.install(|| files.par_iter().map(read_episode).collect())
}

pub fn build_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub cost: f64,
    pub band_halfwidth: usize,
    pub path_len: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledEpisode {
    pub segmentation: Segmentation,
    /// `None` for the reference episode.
    pub alignment: Option<AlignmentSummary>,
}

/// Refines the reference labels, transfers them to every other episode and
/// refines each result. `reference` indexes into `episodes`.
pub fn label_corpus(
    episodes: &[Episode],
    reference: usize,
    seg0: &Segmentation,
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<LabeledEpisode>> {
    let rel_cfg = cfg.relation_config();
    let ep0 = &episodes[reference];
    let seg0 = refine(seg0, ep0, primary_relation(ep0, &rel_cfg).as_ref(), &cfg.stability, &cfg.gripper)
        .map_err(|e| e.in_stage("refine", &ep0.id))?;

    let feats = pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| build_features(ep).map_err(|e| e.in_stage("features", &ep.id)))
            .collect::<Result<Vec<_>>>()
    })?;

    pool.install(|| {
        episodes
            .par_iter()
            .enumerate()
            .map(|(k, ep)| {
                if k == reference {
                    return Ok(LabeledEpisode {
                        segmentation: seg0.clone(),
                        alignment: None,
                    });
                }
                let tr = transfer_episode(&seg0, &feats[reference], &feats[k], &cfg.transfer)
                    .map_err(|e| e.in_stage("transfer", &ep.id))?;
                let mut transferred = tr.segmentation;
                transferred.episode_id = ep.id.clone();
                let segmentation = refine(
                    &transferred,
                    ep,
                    primary_relation(ep, &rel_cfg).as_ref(),
                    &cfg.stability,
                    &cfg.gripper,
                )
                .map_err(|e| e.in_stage("refine", &ep.id))?;
                Ok(LabeledEpisode {
                    segmentation,
                    alignment: Some(AlignmentSummary {
                        cost: tr.path.cost,
                        band_halfwidth: tr.path.band_halfwidth,
                        path_len: tr.path.pairs.len(),
                    }),
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaEntry {
    pub id: String,
    pub file: String,
    pub replica: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub id: String,
    pub frames: usize,
    pub casual_fraction: f64,
    pub compression_ratio: f64,
    pub predicted_ratio: f64,
    pub effective_horizon: usize,
    pub segments: Vec<Segment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentSummary>,
    pub replicas: Vec<ReplicaEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// The only run-dependent field.
    pub generated_at_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<PipelineConfig>,
    pub plan: AccelPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_episode: Option<String>,
    /// Dataset-level `K'`: the median of the per-episode values.
    pub effective_horizon: usize,
    pub source_frames: usize,
    pub replica_frames: usize,
    pub episodes: Vec<EpisodeEntry>,
}

pub struct Compiled {
    pub manifest: Manifest,
    /// Replica episodes ready to be written, keyed by file name.
    pub replicas: Vec<(String, Episode)>,
}

pub fn replica_file_name(source_id: &str, replica: usize) -> String {
    format!("{source_id}_r{replica}{EPISODE_SUFFIX}")
}

fn casual_fraction(seg: &Segmentation, len: usize) -> f64 {
    let casual: usize = seg
        .segments
        .iter()
        .filter(|s| s.label == Label::Casual)
        .map(Segment::len)
        .sum();
    casual as f64 / len.max(1) as f64
}

/// Builds every replica and the manifest body for labeled episodes.
pub fn compile(
    episodes: &[Episode],
    labeled: &[LabeledEpisode],
    plan: &AccelPlan,
    pool: &rayon::ThreadPool,
) -> Result<Compiled> {
    plan.validate()?;
    if episodes.len() != labeled.len() {
        return Err(Error::Validation(format!(
            "{} episodes but {} segmentations",
            episodes.len(),
            labeled.len()
        )));
    }
    let per_episode: Vec<(EpisodeEntry, Vec<(String, Episode)>)> = pool.install(|| {
        episodes
            .par_iter()
            .zip(labeled)
            .map(|(ep, lab)| {
                let seg = &lab.segmentation;
                if seg.episode_id != ep.id {
                    return Err(Error::Validation(format!(
                        "segmentation for {} paired with episode {}",
                        seg.episode_id, ep.id
                    ))
                    .in_stage("compile", &ep.id));
                }
                let reps: Vec<ReplicaEpisode> =
                    compile_episode(ep, seg, plan).map_err(|e| e.in_stage("compile", &ep.id))?;
                let horizon = downsample::rescale_horizon(ep, plan.chunk_horizon, &reps[0].retained, plan.horizon_mode)
                    .map_err(|e| e.in_stage("horizon", &ep.id))?;
                let mut files = Vec::with_capacity(reps.len());
                let mut entries = Vec::with_capacity(reps.len());
                for r in &reps {
                    let name = replica_file_name(&ep.id, r.replica);
                    let episode = r.to_episode(ep).ok_or_else(|| {
                        Error::Validation(format!("replica {} is empty", r.id)).in_stage("compile", &ep.id)
                    })?;
                    entries.push(ReplicaEntry {
                        id: r.id.clone(),
                        file: name.clone(),
                        replica: r.replica,
                        frames: r.len(),
                    });
                    files.push((name, episode));
                }
                let f_c = casual_fraction(seg, ep.len());
                Ok((
                    EpisodeEntry {
                        id: ep.id.clone(),
                        frames: ep.len(),
                        casual_fraction: f_c,
                        compression_ratio: downsample::compression_ratio(ep.len(), &reps),
                        predicted_ratio: downsample::predicted_ratio(f_c, plan.n_precision, plan.n_casual),
                        effective_horizon: horizon,
                        segments: seg.segments.clone(),
                        alignment: lab.alignment.clone(),
                        replicas: entries,
                    },
                    files,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut horizons: Vec<usize> = per_episode.iter().map(|(e, _)| e.effective_horizon).collect();
    horizons.sort_unstable();
    let effective_horizon = match plan.horizon_mode {
        HorizonMode::Half => plan.chunk_horizon.div_ceil(2),
        HorizonMode::Geometric => horizons.get(horizons.len().saturating_sub(1) / 2).copied().unwrap_or(plan.chunk_horizon),
    };
    let source_frames = episodes.iter().map(Episode::len).sum();
    let replica_frames = per_episode
        .iter()
        .flat_map(|(e, _)| e.replicas.iter().map(|r| r.frames))
        .sum();
    let (entries, files): (Vec<_>, Vec<_>) = per_episode.into_iter().unzip();
    Ok(Compiled {
        manifest: Manifest {
            tool: "espada".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            generated_at_unix: 0,
            config_hash: None,
            config: None,
            plan: plan.clone(),
            reference_episode: None,
            effective_horizon,
            source_frames,
            replica_frames,
            episodes: entries,
        },
        replicas: files.into_iter().flatten().collect(),
    })
}

/// Tracks written files so a failed run can remove them again.
#[derive(Default)]
struct OutputWriter {
    written: Vec<PathBuf>,
}

impl OutputWriter {
    fn track(&mut self, path: PathBuf, res: Result<()>) -> Result<()> {
        if res.is_ok() || path.exists() {
            self.written.push(path);
        }
        res
    }

    fn rollback(&self) {
        for p in self.written.iter().rev() {
            if let Err(e) = fs::remove_file(p) {
                log::warn!("could not remove partial output {}: {e}", p.display());
            }
        }
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `segments/`, `replicas/` and `manifest.json` under `out_dir`.
/// On failure every file written so far is removed.
pub fn write_outputs(
    out_dir: &Path,
    segmentations: &[Segmentation],
    compiled: &Compiled,
    timestamp: bool,
) -> Result<PathBuf> {
    let seg_dir = out_dir.join("segments");
    let rep_dir = out_dir.join("replicas");
    ensure_dir(&seg_dir)?;
    ensure_dir(&rep_dir)?;
    let mut w = OutputWriter::default();
    let res = (|| {
        for seg in segmentations {
            let p = seg_dir.join(format!("{}{SEGMENTS_SUFFIX}", seg.episode_id));
            w.track(p.clone(), write_segmentation(seg, &p))?;
        }
        for (name, ep) in &compiled.replicas {
            let p = rep_dir.join(name);
            w.track(p.clone(), write_episode(ep, &p))?;
        }
        let mut manifest = compiled.manifest.clone();
        if timestamp {
            manifest.generated_at_unix = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or_default();
        }
        let p = out_dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        w.track(p.clone(), fs::write(&p, text).map_err(|e| Error::io(&p, e)))?;
        Ok(p)
    })();
    if res.is_err() {
        w.rollback();
    }
    res
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
    /// Record the wall-clock time in the manifest.
    pub timestamp: bool,
}

#[derive(Debug)]
pub struct RunSummary {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

fn reference_index(episodes: &[Episode], cfg: &PipelineConfig) -> Result<usize> {
    match &cfg.reference_episode {
        Some(id) => episodes
            .iter()
            .position(|e| &e.id == id)
            .ok_or_else(|| Error::Lookup(format!("reference episode {id} not found"))),
        None if episodes.is_empty() => Err(Error::Validation(format!(
            "no episodes in {}",
            cfg.dataset_dir.display()
        ))),
        None => Ok(0),
    }
}

/// Reference labels from the configured provider, or from
/// `<id>.segments.json` next to the episodes.
pub fn reference_segmentation(ep0: &Episode, cfg: &PipelineConfig, log_dir: &Path) -> Result<Segmentation> {
    if let Some(pc) = &cfg.provider {
        let (max_chars, decimals) = provider::request_budget(pc);
        let (req, _) = build_request(
            ep0,
            &cfg.task_summary,
            &cfg.relation_config(),
            &cfg.stability,
            max_chars,
            decimals,
        )?;
        return provider::fetch_segmentation(&req, pc, Some(log_dir));
    }
    let fixture = cfg.dataset_dir.join(format!("{}{SEGMENTS_SUFFIX}", ep0.id));
    if fixture.is_file() {
        let body = fs::read_to_string(&fixture).map_err(|e| Error::io(&fixture, e))?;
        return provider::parse_response(&body, &ep0.id, ep0.len());
    }
    Err(Error::Validation(format!(
        "no segmentation source for reference episode {}: configure a provider or add {}",
        ep0.id,
        fixture.display()
    )))
}

pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let pool = build_pool(opts.jobs)?;
    let episodes = load_corpus(&cfg.dataset_dir, &pool)?;
    let reference = reference_index(&episodes, cfg)?;
    let ep0 = &episodes[reference];
    log::info!("{} episodes, reference {}", episodes.len(), ep0.id);

    let seg0 = reference_segmentation(ep0, cfg, &opts.out_dir.join("provider_log"))
        .map_err(|e| e.in_stage("segment", &ep0.id))?;
    let labeled = label_corpus(&episodes, reference, &seg0, cfg, &pool)?;
    let mut compiled = compile(&episodes, &labeled, &cfg.plan, &pool)?;
    compiled.manifest.config_hash = Some(cfg.hash()?);
    compiled.manifest.config = Some(cfg.clone());
    compiled.manifest.reference_episode = Some(ep0.id.clone());

    let segs: Vec<Segmentation> = labeled.into_iter().map(|l| l.segmentation).collect();
    ensure_dir(&opts.out_dir)?;
    let manifest_path = write_outputs(&opts.out_dir, &segs, &compiled, opts.timestamp)?;
    Ok(RunSummary {
        manifest_path,
        manifest: compiled.manifest,
    })
}
