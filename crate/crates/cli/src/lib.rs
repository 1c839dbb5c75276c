//! Command-line front end: synthesis, ESI conversion, training, tracking,
//! evaluation, gradient checks and timing.

pub mod config;
pub mod scene;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use lfesi::esi::{esi_video, write_pfm, write_png_normalized, EsiFrame};
use lfesi::gas::relation_pbm;
use lfesi::gradcheck::check_tracker;
use lfesi::lf::{generate_synthetic, load_lightfield, save_lightfield, GroundTruth, StorageFormat};
use lfesi::params::ParamStore;
use lfesi::track::{
    esi_sequence, eval_sot, format_sig, read_results, relation_maps, toy_video, track_step,
    train_toy, write_results, BBox, ToyVideo, Tracker, TrackerState,
};
use lfesi::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{keys_help, Group, RunConfig};
use scene::parse_scene;

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "LF_ESI_THREADS";

pub const SCENE_FILE: &str = "scene.lft";
pub const GT_FILE: &str = "gt.txt";
pub const CHECKPOINT_FILE: &str = "model.atin";
pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Parser, Debug)]
#[command(
    name = "lfesi",
    version,
    about = "Light-field structure images and an attention tracker"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value config file; repeatable, later files win.
    #[arg(long = "config", value_name = "FILE")]
    pub files: Vec<PathBuf>,
    /// Single key=value override applied after all files; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.files, &self.sets)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic light field from a scene file.
    Synth {
        /// Scene description (key=value).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for scene.lft, gt.txt and disparity PFMs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert a light field to per-frame structure images.
    Esi {
        /// Packed .lft file or manifest directory.
        #[arg(long)]
        lf: PathBuf,
        /// Output directory for esi_tNNNN.pfm files.
        #[arg(long)]
        out: PathBuf,
        /// Also write 16-bit PNGs scaled by each frame's maximum.
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the tracker on synthetic toy videos or rendered scenes.
    Train {
        /// Scene directory with scene.lft and gt.txt; repeatable. Without
        /// any, toy videos are generated from the config.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Output directory for model.atin, run.cfg and loss.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Track the target through a scene from its first-frame box.
    Track {
        /// Checkpoint written by `train`. Its sibling run.cfg is read when
        /// no --config is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene directory with scene.lft and gt.txt.
        #[arg(long)]
        data: PathBuf,
        /// Results file: one `t cx cy w h score` line per frame.
        #[arg(long)]
        out: PathBuf,
        /// Write the relation matrices of the first tracked frame as PBM
        /// bitmaps into this directory.
        #[arg(long, value_name = "DIR")]
        dump_relations: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a results file against ground truth (initial frame excluded).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth file written by `synth`.
        #[arg(long)]
        gt: PathBuf,
        /// Metrics report (key=value).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every trainable parameter group.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time ESI conversion, one training step and one tracking step.
    Bench {
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

const SCENE_HELP: &str = "Scene file keys: t u v h w c gain background \
layer.N.rect=left,top,w,h layer.N.disparity layer.N.velocity=vx,vy \
layer.N.texture=constant:v|checker:cell,lo,hi|noise:cell,lo,hi layer.N.tint=r,g,b";

/// The clap command with per-subcommand config key listings attached.
pub fn command() -> clap::Command {
    let all_model = [Group::Esi, Group::Model];
    Cli::command()
        .mut_subcommand("synth", |c| c.after_help(SCENE_HELP))
        .mut_subcommand("esi", |c| c.after_help(keys_help(&[Group::Esi], &[])))
        .mut_subcommand("train", |c| {
            c.after_help(keys_help(
                &[
                    Group::Esi,
                    Group::Model,
                    Group::Train,
                    Group::Toy,
                    Group::Track,
                ],
                &[],
            ))
        })
        .mut_subcommand("track", |c| {
            c.after_help(keys_help(&[Group::Esi, Group::Model, Group::Track], &[]))
        })
        .mut_subcommand("eval", |c| c.after_help(keys_help(&[Group::Track], &[])))
        .mut_subcommand("gradcheck", |c| {
            c.after_help(keys_help(&[Group::Model, Group::GradCheck], &["seed"]))
        })
        .mut_subcommand("bench", |c| c.after_help(keys_help(&all_model, &["seed"])))
}

pub fn parse_args() -> Cli {
    let matches = command().get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

/// A check that ran to completion and failed.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// 0 success, 1 internal or numeric failure, 2 input or validation failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
        if cause.downcast_ref::<CheckFailed>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

/// Sizes the global thread pool from `LF_ESI_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Esi { lf, out, png, cfg } => cmd_esi(&lf, &out, png, &cfg.load()?),
        Command::Train { data, out, cfg } => cmd_train(&data, &out, &cfg.load()?),
        Command::Track {
            checkpoint,
            data,
            out,
            dump_relations,
            cfg,
        } => cmd_track(
            checkpoint.as_deref(),
            &data,
            &out,
            dump_relations.as_deref(),
            &cfg,
        ),
        Command::Eval { pred, gt, out, cfg } => cmd_eval(&pred, &gt, out.as_deref(), &cfg.load()?),
        Command::Gradcheck { cfg } => cmd_gradcheck(&cfg.load()?),
        Command::Bench { repeats, cfg } => cmd_bench(repeats, &cfg.load()?),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())).into())
}

pub fn frame_name(prefix: &str, t: usize, ext: &str) -> String {
    format!("{prefix}_t{t:04}.{ext}")
}

pub fn cmd_synth(spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let (scene, dims) =
        parse_scene(&read_text(spec)?).with_context(|| format!("scene {}", spec.display()))?;
    let (lf, gt) = generate_synthetic(&scene, dims, seed)?;
    create_dir(out)?;
    save_lightfield(&lf, out.join(SCENE_FILE), StorageFormat::Packed)?;
    fs::write(out.join(GT_FILE), gt.to_text())
        .with_context(|| format!("cannot write {GT_FILE}"))?;
    for (t, d) in gt.disparity.iter().enumerate() {
        let frame = EsiFrame::from_plane(d.clone(), gt.height, gt.width)?;
        write_pfm(&frame, out.join(frame_name("disparity", t, "pfm")))?;
    }
    println!(
        "synth: T={} U={} V={} H={} W={} C={} layers={} -> {}",
        dims.t,
        dims.u,
        dims.v,
        dims.h,
        dims.w,
        dims.c,
        scene.layers.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_esi(lf_path: &Path, out: &Path, png: bool, cfg: &RunConfig) -> Result<()> {
    let esi = cfg.esi_config()?;
    let lf = load_lightfield(lf_path)?;
    let frames = esi_video(&lf, &esi)?;
    create_dir(out)?;
    for f in &frames {
        write_pfm(f, out.join(frame_name("esi", f.t, "pfm")))?;
        if png {
            write_png_normalized(f, out.join(frame_name("esi", f.t, "png")))?;
        }
        let (min, max, mean) = f.stats();
        println!(
            "frame={} variant={} min={} max={} mean={}",
            f.t,
            esi.variant,
            format_sig(min),
            format_sig(max),
            format_sig(mean)
        );
    }
    Ok(())
}

/// Loads a scene directory as normalised ESI frames with the target boxes.
pub fn load_scene_dir(dir: &Path, cfg: &RunConfig) -> Result<ToyVideo> {
    let lf = load_lightfield(dir.join(SCENE_FILE))?;
    let boxes = GroundTruth::boxes_from_text(&read_text(&dir.join(GT_FILE))?)?;
    let layer = cfg.target_layer;
    let target: Vec<[f64; 4]> = boxes
        .iter()
        .map(|frame| {
            frame.get(layer).copied().ok_or_else(|| {
                Error::Config(format!("target_layer {layer} is not in {}", dir.display()))
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(esi_sequence(&lf, &target, &cfg.esi_config()?)?)
}

pub fn toy_dataset(cfg: &RunConfig) -> Result<Vec<ToyVideo>> {
    let toy = cfg.toy_config()?;
    (0..cfg.toy_videos as u64)
        .map(|k| Ok(toy_video(&toy, cfg.toy_seed + k)?))
        .collect()
}

pub fn cmd_train(data: &[PathBuf], out: &Path, cfg: &RunConfig) -> Result<()> {
    let tcfg = cfg.tracker_config()?;
    let train = cfg.train_config()?;
    let videos = if data.is_empty() {
        toy_dataset(cfg)?
    } else {
        data.iter()
            .map(|d| load_scene_dir(d, cfg))
            .collect::<Result<_>>()?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Tracker::new(tcfg, &mut rng)?;
    let trace = train_toy(&mut model, &videos, &train)?;
    create_dir(out)?;
    model.params.save(out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(RUN_CONFIG_FILE), cfg.to_text()).context("cannot write run.cfg")?;
    let mut csv = String::from("step,total,ssl,cls,reg\n");
    for r in &trace {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            format_sig(r.total),
            format_sig(r.ssl),
            format_sig(r.cls),
            format_sig(r.reg)
        ));
    }
    fs::write(out.join(LOSS_FILE), csv).context("cannot write loss.csv")?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "train: {} steps, loss {} -> {}, params {} -> {}",
            trace.len(),
            format_sig(first.total),
            format_sig(last.total),
            model.params.scalar_count(),
            out.display()
        );
    }
    Ok(())
}

/// Builds the model of `cfg` and fills it from a checkpoint.
pub fn load_tracker(checkpoint: &Path, cfg: &RunConfig) -> Result<Tracker> {
    let stored = ParamStore::load(checkpoint)?;
    let mut model = Tracker::new(cfg.tracker_config()?, &mut ChaCha8Rng::seed_from_u64(0))?;
    let problems = model.params.load_from(&stored);
    if !problems.is_empty() {
        bail!(Error::Config(format!(
            "checkpoint {} does not fit the configured model: {}",
            checkpoint.display(),
            problems.join(", ")
        )));
    }
    Ok(model)
}

pub fn cmd_track(
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    dump: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let Some(checkpoint) = checkpoint else {
        bail!(Error::Config("track needs --checkpoint".into()));
    };
    if !checkpoint.is_file() {
        bail!(Error::Config(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let mut args = args.clone();
    if args.files.is_empty() {
        let sibling = checkpoint.with_file_name(RUN_CONFIG_FILE);
        if sibling.is_file() {
            args.files.push(sibling);
        }
    }
    let cfg = args.load()?;
    let model = load_tracker(checkpoint, &cfg)?;
    let video = load_scene_dir(data, &cfg)?;
    let init = video.boxes[0];
    let mut state = TrackerState::init(&model, &video.frames[0], video.h, video.w, init)?;
    if let (Some(dir), Some(next)) = (dump, video.frames.get(1)) {
        create_dir(dir)?;
        for (l, w) in relation_maps(&model, &state, next)?.iter().enumerate() {
            let path = dir.join(format!("relation_l{l}.pbm"));
            fs::write(&path, relation_pbm(w))
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    let mut rows: Vec<(BBox, f64)> = vec![(init, 1.0)];
    for f in &video.frames[1..] {
        rows.push(track_step(&model, &mut state, f)?);
    }
    write_results(out, &rows)?;
    println!("track: {} frames -> {}", rows.len(), out.display());
    Ok(())
}

pub fn cmd_eval(pred: &Path, gt: &Path, out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let rows = read_results(pred)?;
    let boxes = GroundTruth::boxes_from_text(&read_text(gt)?)?;
    let layer = cfg.target_layer;
    let gt_boxes: Vec<BBox> = boxes
        .iter()
        .map(|f| {
            f.get(layer).map(|b| BBox::from_array(*b)).ok_or_else(|| {
                Error::Config(format!(
                    "target_layer {layer} is missing from {}",
                    gt.display()
                ))
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    if rows.len() != gt_boxes.len() {
        bail!(Error::Shape(format!(
            "{} predicted frames for {} ground-truth frames",
            rows.len(),
            gt_boxes.len()
        )));
    }
    if rows.len() < 2 {
        bail!(Error::Invalid(
            "evaluation needs at least two frames".into()
        ));
    }
    let pred: Vec<BBox> = rows[1..].iter().map(|r| r.0).collect();
    let m = eval_sot(&pred, &gt_boxes[1..])?;
    let report = m.to_report();
    print!("{report}");
    if let Some(out) = out {
        fs::write(out, &report).with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let tcfg = cfg.tracker_config()?;
    let check = cfg.gradcheck_options()?;
    let reports = check_tracker(&tcfg, cfg.train.seed, &check)?;
    let mut failing = Vec::new();
    for (name, r) in &reports {
        println!(
            "gradcheck {name}: {} tensors, {} entries, max rel err {} (tol {}) {}",
            r.params.len(),
            r.checked(),
            format_sig(r.max_rel_err()),
            format_sig(r.tol),
            if r.passed() { "ok" } else { "FAIL" }
        );
        failing.extend(r.failing().into_iter().map(|p| format!("{name}:{p}")));
    }
    if !failing.is_empty() {
        bail!(CheckFailed(format!(
            "failing parameters: {}",
            failing.join(", ")
        )));
    }
    Ok(())
}

pub fn cmd_bench(repeats: usize, cfg: &RunConfig) -> Result<()> {
    let repeats = repeats.max(1);
    let toy = cfg.toy_config()?;
    let (spec, dims) = lfesi::track::toy_scene(&toy, cfg.toy_seed);
    let (lf, _) = generate_synthetic(&spec, dims, cfg.toy_seed)?;
    let esi = cfg.esi_config()?;
    let t0 = Instant::now();
    for _ in 0..repeats {
        esi_video(&lf, &esi)?;
    }
    let per = t0.elapsed().as_secs_f64() / repeats as f64;
    println!(
        "bench esi: {} frames of {}x{} in {} ms per video ({} threads)",
        dims.t,
        dims.h,
        dims.w,
        format_sig(per * 1e3),
        rayon::current_num_threads()
    );

    let videos = vec![toy_video(&toy, cfg.toy_seed)?];
    let mut model = Tracker::new(
        cfg.tracker_config()?,
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?;
    let mut train = cfg.train_config()?;
    train.steps = repeats;
    let t0 = Instant::now();
    train_toy(&mut model, &videos, &train)?;
    let per = t0.elapsed().as_secs_f64() / repeats as f64;
    println!("bench train: {} ms per step", format_sig(per * 1e3));

    let v = &videos[0];
    let mut state = TrackerState::init(&model, &v.frames[0], v.h, v.w, v.boxes[0])?;
    let t0 = Instant::now();
    for k in 0..repeats {
        track_step(&model, &mut state, &v.frames[1 + k % (v.frames.len() - 1)])?;
    }
    let per = t0.elapsed().as_secs_f64() / repeats as f64;
    println!("bench track: {} ms per frame", format_sig(per * 1e3));
    Ok(())
}
