//! `espada` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use espada_core::config::PipelineConfig;
use espada_core::dataset::{read_episode, read_segmentation, write_segmentation, Episode, Segmentation};
use espada_core::downsample::HorizonMode;
use espada_core::dtw::write_path;
use espada_core::features::{build_features, write_features};
use espada_core::geometry::{all_relations, primary_relation, write_relations};
use espada_core::inspect::{inspect, render_svg};
use espada_core::pipeline::{
    self, build_pool, compile, list_episode_files, run_pipeline, LabeledEpisode, RunOptions, EPISODE_SUFFIX,
    SEGMENTS_SUFFIX,
};
use espada_core::provider::{self, build_request, ProviderConfig};
use espada_core::segmentation::refine;
use espada_core::synth::{self, SynthSpec};
use espada_core::transfer::transfer_episode;
use espada_core::{Error, Result};

#[derive(Parser)]
#[command(name = "espada", version, about = "Segment-aware acceleration of robot demonstration datasets")]
struct Cli {
    /// Pipeline configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the CPU count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for synthetic data generation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every episode and segmentation file in a directory.
    Validate { dir: PathBuf },
    /// Export gripper-object distance series of an episode.
    Relate {
        episode: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        head_camera: Option<String>,
    },
    /// Ask the configured provider to segment one episode.
    Segment {
        episode: PathBuf,
        /// Provider config JSON (`{"kind":"file"|"http"|"mock",...}`).
        #[arg(long)]
        provider: Option<PathBuf>,
        #[arg(long)]
        task_summary: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where HTTP requests and responses are logged.
        #[arg(long, default_value = "provider_log")]
        log_dir: PathBuf,
    },
    /// Propagate reference labels to target episodes.
    Transfer {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        /// Target episode files.
        #[arg(required = true)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        snap_window: Option<usize>,
        /// Also write `<ref>__<target>.path.json`.
        #[arg(long)]
        dump_path: bool,
        /// Also write feature matrices (`.features.bin` + `.features.json`).
        #[arg(long)]
        dump_features: bool,
    },
    /// Coverage completion, stability rules and gripper-event forcing.
    #[command(alias = "segment-refine")]
    Refine {
        episode: PathBuf,
        segments: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        stability: StabilityArgs,
    },
    /// Compile replicas and a manifest from episodes and full-coverage labels.
    Accelerate {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory holding `<id>.segments.json` for every episode.
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        n_precision: Option<usize>,
        #[arg(long)]
        n_casual: Option<usize>,
        #[arg(long)]
        chunk_horizon: Option<usize>,
        #[arg(long, value_enum)]
        horizon_mode: Option<HorizonArg>,
    },
    /// Per-segment report, optionally with an SVG timeline.
    Inspect {
        episode: PathBuf,
        segments: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the whole pipeline on a dataset directory.
    Pipeline {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        provider: Option<PathBuf>,
        /// Leave the manifest timestamp at 0.
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Generate a synthetic corpus with ground-truth labels.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        episodes: usize,
        #[arg(long, default_value_t = 600)]
        frames: usize,
        #[arg(long, default_value_t = 6)]
        joints: usize,
        #[arg(long, default_value_t = 1)]
        grippers: usize,
        #[arg(long)]
        noise: Option<f64>,
    },
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    min_segment_len: Option<usize>,
    #[arg(long)]
    merge_gap: Option<usize>,
    #[arg(long)]
    hysteresis: Option<usize>,
    #[arg(long)]
    micro_len: Option<usize>,
    #[arg(long)]
    lookahead: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long)]
    dbscan_eps: Option<usize>,
    #[arg(long)]
    dbscan_min_pts: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HorizonArg {
    Half,
    Geometric,
}

impl From<HorizonArg> for HorizonMode {
    fn from(h: HorizonArg) -> Self {
        match h {
            HorizonArg::Half => HorizonMode::Half,
            HorizonArg::Geometric => HorizonMode::Geometric,
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl StabilityArgs {
    fn apply(self, cfg: &mut PipelineConfig) {
        set(&mut cfg.stability.min_segment_len, self.min_segment_len);
        set(&mut cfg.stability.merge_gap, self.merge_gap);
        set(&mut cfg.stability.hysteresis, self.hysteresis);
        set(&mut cfg.stability.micro_len, self.micro_len);
        set(&mut cfg.gripper.lookahead, self.lookahead);
        set(&mut cfg.gripper.threshold, self.threshold);
        set(&mut cfg.gripper.pad, self.pad);
        set(&mut cfg.gripper.dbscan_eps, self.dbscan_eps);
        set(&mut cfg.gripper.dbscan_min_pts, self.dbscan_min_pts);
    }
}

/// `dir/name.episode.jsonl` → `dir/name<suffix>`
fn sibling(episode: &Path, suffix: &str) -> PathBuf {
    let name = episode.file_name().and_then(|n| n.to_str()).unwrap_or("episode");
    let stem = name.strip_suffix(EPISODE_SUFFIX).unwrap_or(name);
    episode.with_file_name(format!("{stem}{suffix}"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_provider(path: &Path) -> Result<ProviderConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_validate(dir: &Path) -> Result<bool> {
    let files = list_episode_files(dir)?;
    if files.is_empty() {
        log::warn!("no {EPISODE_SUFFIX} files in {}", dir.display());
        println!("0 episodes OK");
        return Ok(true);
    }
    let mut ok = 0;
    let mut env_failure = None;
    let mut lengths = std::collections::BTreeMap::new();
    for f in &files {
        match read_episode(f) {
            Ok(ep) => {
                println!("ok    {} ({} frames)", f.display(), ep.len());
                lengths.insert(ep.id.clone(), ep.len());
                ok += 1;
            }
            Err(e) => {
                println!("FAIL  {}: {e}", f.display());
                if e.is_environmental() {
                    env_failure = Some(e);
                }
            }
        }
    }
    let mut seg_failures = 0;
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut seg_files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(SEGMENTS_SUFFIX)))
        .collect();
    seg_files.sort();
    for f in &seg_files {
        let res = read_segmentation(f).and_then(|s| match lengths.get(&s.episode_id) {
            Some(&len) => s.validate_within(len),
            None => Ok(()),
        });
        match res {
            Ok(()) => println!("ok    {}", f.display()),
            Err(e) => {
                println!("FAIL  {}: {e}", f.display());
                seg_failures += 1;
            }
        }
    }
    if let Some(e) = env_failure {
        return Err(e);
    }
    let failed = files.len() - ok;
    if failed == 0 && seg_failures == 0 {
        println!("{ok} episodes OK");
        Ok(true)
    } else {
        println!("{failed} of {} episodes failed, {seg_failures} segmentation file(s) failed", files.len());
        Ok(false)
    }
}

fn cmd_transfer(
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
    reference: &Path,
    segments: &Path,
    targets: &[PathBuf],
    out_dir: &Path,
    dump_path: bool,
    dump_features: bool,
) -> Result<()> {
    let ep0 = read_episode(reference)?;
    let seg0 = read_segmentation(segments)?;
    if seg0.episode_id != ep0.id {
        return Err(Error::Validation(format!(
            "segmentation is for {}, reference episode is {}",
            seg0.episode_id, ep0.id
        )));
    }
    create_dir(out_dir)?;
    let f0 = build_features(&ep0)?;
    if dump_features {
        write_features(
            &f0,
            out_dir.join(format!("{}.features.bin", ep0.id)),
            out_dir.join(format!("{}.features.json", ep0.id)),
        )?;
    }
    pool.install(|| {
        targets.par_iter().try_for_each(|t| -> Result<()> {
            let ep = read_episode(t)?;
            let fk = build_features(&ep).map_err(|e| e.in_stage("features", &ep.id))?;
            let mut tr = transfer_episode(&seg0, &f0, &fk, &cfg.transfer).map_err(|e| e.in_stage("transfer", &ep.id))?;
            tr.segmentation.episode_id = ep.id.clone();
            write_segmentation(&tr.segmentation, out_dir.join(format!("{}{SEGMENTS_SUFFIX}", ep.id)))?;
            if dump_path {
                write_path(&tr.path, cfg.transfer.rho, out_dir.join(format!("{}__{}.path.json", ep0.id, ep.id)))?;
            }
            if dump_features {
                write_features(
                    &fk,
                    out_dir.join(format!("{}.features.bin", ep.id)),
                    out_dir.join(format!("{}.features.json", ep.id)),
                )?;
            }
            println!("{}: {} segments, cost {:.4}, b={}", ep.id, tr.segmentation.segments.len(), tr.path.cost, tr.path.band_halfwidth);
            Ok(())
        })
    })
}

fn cmd_accelerate(
    cfg: &PipelineConfig,
    pool: &rayon::ThreadPool,
    dataset: &Path,
    segments: &Path,
    out_dir: &Path,
) -> Result<()> {
    let episodes: Vec<Episode> = pipeline::load_corpus(dataset, pool)?;
    let labeled = episodes
        .iter()
        .map(|ep| {
            let p = segments.join(format!("{}{SEGMENTS_SUFFIX}", ep.id));
            Ok(LabeledEpisode {
                segmentation: read_segmentation(&p)?,
                alignment: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut compiled = compile(&episodes, &labeled, &cfg.plan, pool)?;
    compiled.manifest.config_hash = Some(cfg.hash()?);
    compiled.manifest.config = Some(cfg.clone());
    create_dir(out_dir)?;
    let segs: Vec<Segmentation> = labeled.into_iter().map(|l| l.segmentation).collect();
    let path = pipeline::write_outputs(out_dir, &segs, &compiled, true)?;
    let m = &compiled.manifest;
    println!(
        "{} replicas, {} -> {} frames, K'={}; manifest {}",
        compiled.replicas.len(),
        m.source_frames,
        m.replica_frames,
        m.effective_horizon,
        path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let pool = build_pool(cli.jobs)?;
    match cli.command {
        Command::Validate { dir } => return cmd_validate(&dir),
        Command::Relate { episode, out, head_camera } => {
            set(&mut cfg.head_camera, head_camera);
            let ep = read_episode(&episode)?;
            let pairs = all_relations(&ep, &cfg.relation_config());
            let out = out.unwrap_or_else(|| sibling(&episode, ".relations.json"));
            write_relations(&pairs, &out)?;
            for p in &pairs {
                println!("{} / {} @ {}: {} of {} frames valid", p.gripper_label, p.object_label, p.camera_id, p.valid_count(), ep.len());
            }
            println!("wrote {}", out.display());
        }
        Command::Segment {
            episode,
            provider,
            task_summary,
            out,
            log_dir,
        } => {
            if let Some(p) = provider {
                cfg.provider = Some(load_provider(&p)?);
            }
            set(&mut cfg.task_summary, task_summary);
            let pc = cfg
                .provider
                .clone()
                .ok_or_else(|| Error::Config("no segmentation source: pass --provider or set provider in --config".into()))?;
            let ep = read_episode(&episode)?;
            let (max_chars, decimals) = provider::request_budget(&pc);
            let (req, budget) =
                build_request(&ep, &cfg.task_summary, &cfg.relation_config(), &cfg.stability, max_chars, decimals)?;
            log::info!("sampling {} frames of {} chars each", budget.k_samples, budget.per_frame_chars);
            let seg = provider::fetch_segmentation(&req, &pc, Some(&log_dir))?;
            let out = out.unwrap_or_else(|| sibling(&episode, SEGMENTS_SUFFIX));
            write_segmentation(&seg, &out)?;
            println!("{}: {} segments -> {}", ep.id, seg.segments.len(), out.display());
        }
        Command::Transfer {
            reference,
            segments,
            targets,
            out_dir,
            rho,
            snap_window,
            dump_path,
            dump_features,
        } => {
            set(&mut cfg.transfer.rho, rho);
            set(&mut cfg.transfer.snap_window, snap_window);
            cfg.validate()?;
            cmd_transfer(&cfg, &pool, &reference, &segments, &targets, &out_dir, dump_path, dump_features)?;
        }
        Command::Refine {
            episode,
            segments,
            out,
            stability,
        } => {
            stability.apply(&mut cfg);
            cfg.validate()?;
            let ep = read_episode(&episode)?;
            let seg = read_segmentation(&segments)?;
            if seg.episode_id != ep.id {
                return Err(Error::Validation(format!(
                    "segmentation is for {}, episode is {}",
                    seg.episode_id, ep.id
                )));
            }
            let rel = primary_relation(&ep, &cfg.relation_config());
            let refined = refine(&seg, &ep, rel.as_ref(), &cfg.stability, &cfg.gripper)?;
            let out = out.unwrap_or(segments);
            write_segmentation(&refined, &out)?;
            println!("{}: {} segments -> {}", ep.id, refined.segments.len(), out.display());
        }
        Command::Accelerate {
            dataset,
            segments,
            out_dir,
            n_precision,
            n_casual,
            chunk_horizon,
            horizon_mode,
        } => {
            set(&mut cfg.plan.n_precision, n_precision);
            set(&mut cfg.plan.n_casual, n_casual);
            set(&mut cfg.plan.chunk_horizon, chunk_horizon);
            set(&mut cfg.plan.horizon_mode, horizon_mode.map(Into::into));
            cfg.validate()?;
            cmd_accelerate(&cfg, &pool, &dataset, &segments, &out_dir)?;
        }
        Command::Inspect {
            episode,
            segments,
            svg,
            json,
        } => {
            let ep = read_episode(&episode)?;
            let seg = read_segmentation(&segments)?;
            let report = inspect(&ep, &seg, &cfg.relation_config(), &cfg.gripper)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
            if let Some(p) = svg {
                fs::write(&p, render_svg(&report)).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            }
        }
        Command::Pipeline {
            dataset,
            out_dir,
            provider,
            no_timestamp,
        } => {
            set(&mut cfg.dataset_dir, dataset);
            if let Some(p) = provider {
                cfg.provider = Some(load_provider(&p)?);
            }
            let summary = run_pipeline(
                &cfg,
                &RunOptions {
                    out_dir,
                    jobs: cli.jobs,
                    timestamp: !no_timestamp,
                },
            )?;
            let m = &summary.manifest;
            for e in &m.episodes {
                println!(
                    "{}: {} frames, {} segments, casual {:.0}%, ratio {:.2}x",
                    e.id,
                    e.frames,
                    e.segments.len(),
                    100.0 * e.casual_fraction,
                    e.compression_ratio
                );
            }
            println!(
                "{} -> {} frames, K'={}; manifest {}",
                m.source_frames,
                m.replica_frames,
                m.effective_horizon,
                summary.manifest_path.display()
            );
        }
        Command::Synth {
            out_dir,
            episodes,
            frames,
            joints,
            grippers,
            noise,
        } => {
            let mut spec = SynthSpec {
                episodes,
                frames,
                joints,
                grippers,
                ..Default::default()
            };
            set(&mut spec.noise, noise);
            let corpus = synth::generate(cli.seed, &spec)?;
            let written = synth::write_corpus(&corpus, &out_dir)?;
            println!("wrote {} files to {}", written.len(), out_dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_environmental() { 2 } else { 1 })
        }
    }
}
