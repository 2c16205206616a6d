//! `gmrw`: train, track, evaluate and visualise.

mod flowviz;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use gmrw::config::RunConfig;
use gmrw::data::{self, fixtures, ClipCycle, ClipSource, DatasetSample, SpriteSource};
use gmrw::metrics::{evaluate, sample_queries_strided, GroundTruthTrackSet};
use gmrw::model::Model;
use gmrw::objective::expected_flow;
use gmrw::trackio::{read_track_file, write_track_file, TrackRecord};
use gmrw::tracker::{track, TrackMode};
use gmrw::train::{loss_log_row, Trainer, LOSS_LOG_HEADER};
use gmrw::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gmrw", version, about = "Self-supervised point tracking")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `optimizer.seed` (and the scene seed for `generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint, loss log and effective config.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        /// Use identity labels and the same crop for both directions.
        #[arg(long)]
        no_label_warp: bool,
        #[arg(long)]
        no_smoothness: bool,
        #[arg(long, value_parser = parse_stride)]
        train_stride: Option<usize>,
        /// Checkpoint path; overrides `output.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for checkpoint, loss log and config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track query points through a directory of frames.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// Track file whose lines carry at least `id` and `query`.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, visible_alias = "eval-stride", value_parser = parse_stride)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted tracks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the expected motion between two frames as a colour image.
    Flowviz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 0)]
        from: usize,
        #[arg(long, default_value_t = 1)]
        to: usize,
        #[arg(long, value_parser = parse_stride)]
        stride: Option<usize>,
        /// Flow magnitude in pixels mapped to full saturation; defaults to
        /// the larger of the field's maximum and 8.
        #[arg(long)]
        max_flow: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic clip with ground-truth and query track files.
    Generate {
        #[arg(long, value_enum, default_value_t = Scene::Sprites)]
        scene: Scene,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Chained,
    Direct,
}

impl From<Mode> for TrackMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Chained => TrackMode::Chained,
            Mode::Direct => TrackMode::Direct,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scene {
    Sprites,
    Static,
    Teleport,
    Occlusion,
}

fn parse_stride(s: &str) -> std::result::Result<usize, String> {
    match s.parse() {
        Ok(v @ (1 | 2 | 4)) => Ok(v),
        _ => Err(format!("unsupported stride {s:?}; expected 1, 2 or 4")),
    }
}

/// Usage problems exit with 1, everything else with 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GMRW_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.optimizer.seed = seed;
        config.data.scene.seed = seed;
    }
    match cli.command {
        Command::Train { steps, no_label_warp, no_smoothness, train_stride, checkpoint, out } => {
            if let Some(n) = steps {
                config.optimizer.steps = n;
            }
            if no_label_warp {
                config.augment.label_warp = false;
            }
            if no_smoothness {
                config.objective.use_smoothness = false;
            }
            if let Some(s) = train_stride {
                config.training.train_stride = s;
            }
            if let Some(dir) = &out {
                fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
                config.output.checkpoint = dir.join("model.ckpt");
                config.output.loss_log = dir.join("loss.csv");
            }
            if let Some(path) = checkpoint {
                config.output.checkpoint = path;
            }
            config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            cmd_train(&config)?;
        }
        Command::Track { checkpoint, frames, queries, mode, stride, out } => {
            if let Some(m) = mode {
                config.tracker.mode = m.into();
            }
            if let Some(s) = stride {
                config.tracker.eval_stride = Some(s);
            }
            let model = load_model(&checkpoint, cli.config.as_ref().map(|_| &config))?;
            let clip = data::load_frame_directory(&frames, config.data.resize_to.map(|[h, w]| (h, w)))?;
            let queries = read_track_file(&queries, false)?;
            let records = cmd_track(&model, &clip, &queries, &config)?;
            write_track_file(&out, &records)?;
            info!("wrote {} tracks to {}", records.len(), out.display());
        }
        Command::Eval { pred, gt, out } => {
            let report = cmd_eval(&read_track_file(&pred, true)?, &read_track_file(&gt, true)?, &config)?;
            print!("{report}");
            if let Some(path) = out {
                fs::write(&path, &report).map_err(|e| io_error(&path, e))?;
            }
        }
        Command::Flowviz { checkpoint, frames, from, to, stride, max_flow, out } => {
            let model = load_model(&checkpoint, cli.config.as_ref().map(|_| &config))?;
            let clip = data::load_frame_directory(&frames, config.data.resize_to.map(|[h, w]| (h, w)))?;
            if from >= clip.len() || to >= clip.len() {
                return Err(Failure::Usage(format!("frame pair ({from}, {to}) outside a {}-frame clip", clip.len())));
            }
            let stride = stride.unwrap_or(config.tracker.stride());
            let (ab, _) = model.pair_transitions(clip.frame(from), clip.frame(to), stride)?;
            let grid = gmrw::grid::grid_coordinates(clip.height(), clip.width(), stride)?;
            let flow = expected_flow(&ab, &grid)?;
            flowviz::render(&flow, max_flow).save(&out).map_err(|e| Error::Image { path: out.clone(), source: e })?;
            info!("wrote {}", out.display());
        }
        Command::Generate { scene, out } => {
            cmd_generate(scene, &config, &out)?;
        }
    }
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(Error::io(path, e))
}

/// Loads a checkpoint and, when a config was given, checks that its model
/// section matches the checkpoint.
fn load_model(path: &Path, config: Option<&RunConfig>) -> Result<Model> {
    let model = Model::load(path)?;
    if let Some(c) = config {
        if c.model_config() != model.config {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different backbone/matcher configuration",
                path.display()
            )));
        }
    }
    Ok(model)
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let model = Model::new(&config.model_config(), config.optimizer.seed)?;
    let mut source: Box<dyn ClipSource> = match &config.data.frames_dir {
        Some(dir) => {
            let clip = data::load_frame_directory(dir, config.data.resize_to.map(|[h, w]| (h, w)))?;
            Box::new(ClipCycle::new(vec![clip])?)
        }
        None => Box::new(SpriteSource { config: config.data.scene.clone() }),
    };
    let effective = config.output.checkpoint.with_extension("toml");
    config.save(&effective)?;
    let log_path = &config.output.loss_log;
    let mut log = BufWriter::new(File::create(log_path).map_err(|e| Error::io(log_path, e))?);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(log_path, e))?;
    info!("training {} parameters for {} steps", model.params.numel(), config.optimizer.steps);
    let mut trainer = Trainer::new(model, &config.train_config())?;
    let every = config.output.checkpoint_every;
    trainer.run(source.as_mut(), |step, report, model| {
        writeln!(log, "{}", loss_log_row(step, report)).map_err(|e| Error::io(log_path, e))?;
        if every > 0 && (step + 1) % every == 0 {
            let path = config.output.checkpoint.with_extension(format!("step{}.ckpt", step + 1));
            model.save(&path)?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(log_path, e))?;
    trainer.model.save(&config.output.checkpoint)?;
    info!("wrote {}", config.output.checkpoint.display());
    Ok(())
}

fn cmd_track(model: &Model, clip: &gmrw::clip::VideoClip, queries: &[TrackRecord], config: &RunConfig) -> Result<Vec<TrackRecord>> {
    let points: Vec<_> = queries.iter().map(TrackRecord::query_point).collect();
    info!("tracking {} queries over {} frames ({:?}, stride {})", points.len(), clip.len(), config.tracker.mode, config.tracker.stride());
    let tracks = track(clip, &points, model, &config.tracker)?;
    let size = (clip.height(), clip.width());
    Ok(queries.iter().zip(&points).zip(&tracks).map(|((r, q), t)| TrackRecord::new(r.id, q, size, t)).collect())
}

/// Pairs predictions with ground truth by id and renders the report.
fn cmd_eval(pred: &[TrackRecord], gt: &[TrackRecord], config: &RunConfig) -> Result<String> {
    let Some(first) = gt.first() else {
        return Err(Error::EmptyInput("ground truth has no tracks".into()));
    };
    let size = first.size.ok_or_else(|| Error::Config("ground truth lacks the `size` field".into()))?;
    let mut by_id: std::collections::HashMap<u64, &TrackRecord> = pred.iter().map(|r| (r.id, r)).collect();
    let mut truth = GroundTruthTrackSet { queries: Vec::new(), tracks: Vec::new() };
    let mut tracks = Vec::new();
    for g in gt {
        let p = by_id.remove(&g.id).ok_or_else(|| Error::Config(format!("no prediction for id {}", g.id)))?;
        truth.queries.push(g.query_point());
        truth.tracks.push(g.track());
        tracks.push(p.track());
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::Config(format!("prediction id {extra} has no ground truth")));
    }
    let report = evaluate(&tracks, &truth, (size[1], size[0]), &config.metrics)?;
    Ok(report.to_text(&config.metrics))
}

fn cmd_generate(scene: Scene, config: &RunConfig, out: &Path) -> Result<()> {
    let s = &config.data.scene;
    let canvas = s.canvas_size[0];
    let sample: DatasetSample = match scene {
        Scene::Sprites => data::generate_sprite_clip(s)?,
        Scene::Static => fixtures::static_scene(canvas, s.num_frames, s.seed)?,
        Scene::Teleport => fixtures::teleport(canvas, s.num_frames, s.seed)?,
        Scene::Occlusion => fixtures::occlusion(canvas, s.num_frames, s.seed)?,
    };
    data::save_frames(&sample.clip, &out.join("frames"))?;
    let truth = sample_queries_strided(&sample.tracks, config.metrics.query_stride)?;
    let size = (sample.clip.height(), sample.clip.width());
    let records: Vec<_> = truth
        .queries
        .iter()
        .zip(&truth.tracks)
        .enumerate()
        .map(|(i, (q, t))| TrackRecord::new(i as u64, q, size, t))
        .collect();
    write_track_file(&out.join("gt.jsonl"), &records)?;
    let queries: Vec<_> = records.iter().map(|r| TrackRecord { xy: Vec::new(), visible: Vec::new(), ..r.clone() }).collect();
    write_track_file(&out.join("queries.jsonl"), &queries)?;
    info!("wrote {} frames and {} queries to {}", sample.clip.len(), records.len(), out.display());
    Ok(())
}
