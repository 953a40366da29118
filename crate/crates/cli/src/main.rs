use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use segd_core::config::KvConfig;
use segd_core::evaluation::{evaluate, EvalReport};
use segd_core::geodesic::distance_map;
use segd_core::mvol;
use segd_core::phantom::{generate, support_template, PhantomSpec};
use segd_core::pipeline::{run_pipeline, run_stage, PipelineConfig, Stage};
use segd_core::preprocess::template_from_labels;
use segd_core::render::{encode_gray, encode_rgb, gray_image, heatmap, overlay, OVERLAY_ALPHA};
use segd_core::scribble::ScribbleSet;
use segd_core::tps::{make_warp_steps, warp_volume, ControlPoints, SetId, WarpMode};
use segd_core::tracker::{load_seeds, SeedPoint};
use segd_core::volume::window_to_image;
use segd_core::{Label, LabelVolume, SliceAxis, Volume};

#[derive(Parser)]
#[command(name = "segd", version, about = "Wrapped-body CT segmentation pipeline")]
struct Cli {
    /// Seed for every random choice (phantom, mixture initialization, warps).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Parallel workers; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic wrapped-body volume and its ground truth.
    Phantom(PhantomArgs),
    /// Label exterior air, support, metal and hollow space.
    Preprocess(PreprocessArgs),
    /// Split the remaining voxels into wrap and body per frame.
    Geodesic(GeodesicArgs),
    /// Refine the body with chunked volumetric GrabCut.
    Grabcut(GrabcutArgs),
    /// Keep only body segments that belong to a track.
    Track(TrackArgs),
    /// Run all stages and optionally score against ground truth.
    Pipeline(PipelineArgs),
    /// Thin-plate-spline warp of a volume and its ground truth.
    Warp(WarpArgs),
    /// Per-frame body IoU report.
    Eval(EvalArgs),
    /// Start the interactive session service.
    Serve(ServeArgs),
    /// Write one slice as PNG, optionally with a label overlay.
    Export(ExportArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Support template output; defaults to <out>_template.mvol.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Volume size as nx,ny,nz.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    /// Spurious tissue lumps injected into the wrap.
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Support template; defaults to <in>_template.mvol when present.
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Args)]
struct GeodesicArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Preprocess labels.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the averaged distance map of this frame as a heatmap.
    #[arg(long, requires = "heatmap")]
    heatmap_frame: Option<usize>,
    #[arg(long, requires = "heatmap_frame")]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct GrabcutArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Geodesic labels.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scribbles: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    /// GrabCut labels.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed file with lines frame,x,y.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Start a track on every unmatched large segment.
    #[arg(long)]
    auto_init: bool,
    /// Track table output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Ground truth; enables report.csv and iou.png.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long)]
    scribbles: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    auto_init: bool,
    /// Stop after GrabCut.
    #[arg(long)]
    no_track: bool,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires = "gt_out")]
    gt: Option<PathBuf>,
    #[arg(long, requires = "gt")]
    gt_out: Option<PathBuf>,
    /// Control points x,y,x',y' per line; defaults to a perturbed 3x4 grid.
    #[arg(long)]
    points: Option<PathBuf>,
    /// single, or a per-frame set 1-4.
    #[arg(long, default_value = "single")]
    set: String,
    /// Largest grid displacement per axis when no points file is given.
    #[arg(long, default_value_t = 8.0)]
    max_shift: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, default_value = "")]
    tag: String,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    project: PathBuf,
    #[arg(long, default_value_t = segd_service::DEFAULT_PORT)]
    port: u16,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "axial")]
    axis: String,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Display window as center,width in HU.
    #[arg(long, value_parser = parse_window, default_value = "-200,1600")]
    window: (f64, f64),
    /// Label volume to overlay.
    #[arg(long)]
    labels: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
    <[usize; 3]>::try_from(v).map_err(|_| "expected nx,ny,nz".to_string())
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (c, w) = s.split_once(',').ok_or("expected center,width")?;
    let c: f64 = c.trim().parse().map_err(|_| format!("bad center '{c}'"))?;
    let w: f64 = w.trim().parse().map_err(|_| format!("bad width '{w}'"))?;
    if w.is_nan() || w <= 0.0 {
        return Err("width must be positive".into());
    }
    Ok((c, w))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_kv(&KvConfig::load(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => PipelineConfig::default(),
    };
    cfg.grabcut.seed = cli.seed;
    match cli.command {
        Command::Phantom(a) => phantom(a, cli.seed),
        Command::Preprocess(a) => {
            let v = load_volume(&a.input)?;
            attach_template(&mut cfg, a.template.as_deref(), &a.input)?;
            let out = run_stage(Stage::Preprocess, &v, None, &cfg, &ScribbleSet::default(), &[], None)?;
            save_labels(&out.labels, &a.out)
        }
        Command::Geodesic(a) => geodesic(a, &cfg),
        Command::Grabcut(a) => {
            let v = load_volume(&a.input)?;
            let labels = load_labels(&a.labels)?;
            let scribbles = load_scribbles(a.scribbles.as_deref())?;
            let out = run_stage(Stage::Grabcut, &v, Some(&labels), &cfg, &scribbles, &[], None)?;
            save_labels(&out.labels, &a.out)
        }
        Command::Track(a) => track(a, &mut cfg),
        Command::Pipeline(a) => pipeline(a, &mut cfg),
        Command::Warp(a) => warp(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => {
            let session = segd_service::Session::open(&a.project).with_context(|| format!("opening {}", a.project.display()))?;
            tokio::runtime::Runtime::new()?.block_on(segd_service::serve(session, a.port))?;
            Ok(())
        }
        Command::Export(a) => export(a),
    }
}

fn load_volume(p: &Path) -> Result<Volume> {
    mvol::load_volume(p).with_context(|| format!("reading volume {}", p.display()))
}

fn load_labels(p: &Path) -> Result<LabelVolume> {
    mvol::load_labels(p).with_context(|| format!("reading labels {}", p.display()))
}

fn save_labels(l: &LabelVolume, p: &Path) -> Result<()> {
    mvol::save_labels(l, p).with_context(|| format!("writing {}", p.display()))
}

fn load_scribbles(p: Option<&Path>) -> Result<ScribbleSet> {
    match p {
        Some(p) => ScribbleSet::load(p).with_context(|| format!("reading scribbles {}", p.display())),
        None => Ok(ScribbleSet::default()),
    }
}

fn load_seed_file(p: Option<&Path>) -> Result<Vec<SeedPoint>> {
    match p {
        Some(p) => load_seeds(p).with_context(|| format!("reading seeds {}", p.display())),
        None => Ok(Vec::new()),
    }
}

/// `<dir>/<stem>_template.mvol` next to a volume file.
fn sidecar_template(volume: &Path) -> PathBuf {
    let stem = volume.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    volume.with_file_name(format!("{stem}_template.mvol"))
}

fn attach_template(cfg: &mut PipelineConfig, explicit: Option<&Path>, volume: &Path) -> Result<()> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let side = sidecar_template(volume);
            if !side.exists() {
                log::warn!("no support template given or found at {}; support detection skipped", side.display());
                return Ok(());
            }
            side
        }
    };
    cfg.preprocess.template = Some(template_from_labels(&load_labels(&path)?)?);
    Ok(())
}

fn phantom(a: PhantomArgs, seed: u64) -> Result<()> {
    let mut spec = PhantomSpec { seed, ..PhantomSpec::default() }.with_distractors(a.distractors);
    if let Some(d) = a.dims {
        spec.dims = d;
    }
    if a.noiseless {
        spec = spec.noiseless();
    }
    let p = generate(&spec)?;
    mvol::save_volume(&p.volume, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    save_labels(&p.truth, &a.gt)?;
    if let Some(t) = support_template(&spec) {
        save_labels(&t, &a.template.unwrap_or_else(|| sidecar_template(&a.out)))?;
    }
    Ok(())
}

fn geodesic(a: GeodesicArgs, cfg: &PipelineConfig) -> Result<()> {
    let v = load_volume(&a.input)?;
    let pre = load_labels(&a.labels)?;
    let out = run_stage(Stage::Geodesic, &v, Some(&pre), cfg, &ScribbleSet::default(), &[], None)?;
    save_labels(&out.labels, &a.out)?;
    if let (Some(z), Some(path)) = (a.heatmap_frame, a.heatmap) {
        if z >= v.frame_count() {
            bail!("heatmap frame {z} outside 0..{}", v.frame_count());
        }
        let field = distance_map(&v.axial(z), &pre.axial(z), &cfg.geodesic)?;
        fs::write(&path, encode_rgb(&heatmap(&field))?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn track(a: TrackArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let labels = load_labels(&a.labels)?;
    let seeds = load_seed_file(a.seeds.as_deref())?;
    cfg.tracker.auto_init |= a.auto_init;
    // tracking reads labels only; the volume argument just fixes the shape
    let shape = Volume::filled(labels.dims(), labels.spacing(), 0)?;
    let out = run_stage(Stage::Track, &shape, Some(&labels), cfg, &ScribbleSet::default(), &seeds, None)?;
    save_labels(&out.labels, &a.out)?;
    if let (Some(p), Some(r)) = (a.report, out.report) {
        fs::write(&p, r).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn write_report(report: &EvalReport, csv: &Path, plot: Option<&Path>) -> Result<()> {
    fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    if let Some(p) = plot {
        fs::write(p, encode_rgb(&report.plot(640, 320))?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn pipeline(a: PipelineArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let v = load_volume(&a.input)?;
    attach_template(cfg, a.template.as_deref(), &a.input)?;
    cfg.tracker.auto_init |= a.auto_init;
    let scribbles = load_scribbles(a.scribbles.as_deref())?;
    let seeds = load_seed_file(a.seeds.as_deref())?;
    let gt = a.gt.as_deref().map(load_labels).transpose()?;
    if let Some(g) = &gt {
        g.check_matches(&v)?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let last = if a.no_track { Stage::Grabcut } else { Stage::Track };
    let progress = |s: Stage, f: f64| {
        if f == 0.0 {
            log::info!("stage {s} started");
        }
    };
    let result = run_pipeline(&v, cfg, &scribbles, &seeds, last, Some(&progress))?;
    for (stage, out) in &result.stages {
        save_labels(&out.labels, &a.out.join(format!("{}.mvol", stage.name())))?;
        if let Some(r) = &out.report {
            fs::write(a.out.join("tracks.txt"), r)?;
        }
    }
    save_labels(result.final_labels(), &a.out.join("labels.mvol"))?;
    if let Some(g) = gt {
        let tag = if a.no_track { "w/o tracking" } else { "with tracking" };
        let report = evaluate(result.final_labels(), &g, Label::Body, tag)?;
        write_report(&report, &a.out.join("report.csv"), Some(&a.out.join("iou.png")))?;
        if let Some(o) = report.overall {
            println!("overall body IoU {o:.4}");
        }
    }
    Ok(())
}

fn warp(a: WarpArgs, seed: u64) -> Result<()> {
    let v = load_volume(&a.input)?;
    let gt = a.gt.as_deref().map(load_labels).transpose()?;
    let [nx, ny, nz] = v.dims();
    let cp = match &a.points {
        Some(p) => ControlPoints::load(p).with_context(|| format!("reading control points {}", p.display()))?,
        None => ControlPoints::perturbed_grid(nx, ny, a.max_shift, seed),
    };
    let mode = if a.set == "single" {
        WarpMode::Single(cp.fit()?)
    } else {
        let id: SetId = a.set.parse()?;
        WarpMode::PerFrame(make_warp_steps(&cp.src, &cp.dst, nz)?.set(id)?)
    };
    let (wv, wl) = warp_volume(&v, gt.as_ref(), &mode)?;
    mvol::save_volume(&wv, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let (Some(l), Some(p)) = (wl, a.gt_out) {
        save_labels(&l, &p)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = load_labels(&a.pred)?;
    let gt = load_labels(&a.gt)?;
    let report = evaluate(&pred, &gt, Label::Body, &a.tag)?;
    match &a.csv {
        Some(p) => write_report(&report, p, a.plot.as_deref())?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let v = load_volume(&a.input)?;
    let axis: SliceAxis = a.axis.parse()?;
    let gray = window_to_image(&v.slice(axis, a.index)?, a.window.0, a.window.1)?;
    let bytes = match &a.labels {
        Some(p) => {
            let l = load_labels(p)?;
            l.check_matches(&v)?;
            encode_rgb(&overlay(&gray, &l.slice(axis, a.index)?, OVERLAY_ALPHA))?
        }
        None => encode_gray(&gray_image(&gray))?,
    };
    fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))
}
