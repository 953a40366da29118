//! Session state for one project directory.
//!
//! Layout: `volume.mvol` (required), `template.mvol` and `config.txt`
//! (optional), `scribbles.txt`, `seeds.txt`, and `labels/<stage>.mvol` for
//! every completed stage.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use segd_core::config::KvConfig;
use segd_core::mvol;
use segd_core::pipeline::{run_stage, PipelineConfig, Stage, StageOutput};
use segd_core::preprocess::template_from_labels;
use segd_core::render::{encode_gray, encode_rgb, gray_image, overlay, OVERLAY_ALPHA};
use segd_core::scribble::{ScribbleClass, ScribbleRecord, ScribbleSet};
use segd_core::tracker::{load_seeds, seeds_to_text, SeedPoint};
use segd_core::volume::window_to_image;
use segd_core::{LabelVolume, SegError, SliceAxis, Volume};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Prerequisite(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error(transparent)]
    Core(#[from] SegError),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

/// Default display window (center, width) in HU.
pub const DEFAULT_WINDOW: (f64, f64) = (-200.0, 1600.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageInfo {
    pub status: Status,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Info {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub stages: BTreeMap<String, StageInfo>,
    pub scribbles: usize,
    pub seeds: usize,
    pub running: Option<u64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ScribbleJson {
    pub frame: usize,
    pub class: String,
    pub radius: f64,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ScribblePost {
    pub records: Vec<ScribbleJson>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
pub struct SeedJson {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SeedPost {
    pub seeds: Vec<SeedJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PostOutcome {
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: Vec<Rejection>,
    pub total: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JobInfo {
    pub job: u64,
    pub stage: String,
    pub status: Status,
    pub progress: f64,
    pub error: Option<String>,
}

/// Non-negative progress stored as f64 bits; the bit order of non-negative
/// floats matches their numeric order, so `fetch_max` keeps it monotone.
#[derive(Debug, Default)]
pub struct Progress(AtomicU64);

impl Progress {
    pub fn advance(&self, f: f64) {
        self.0.fetch_max(f.clamp(0.0, 1.0).to_bits(), Ordering::Relaxed);
    }

    pub fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }
}

#[derive(Debug)]
struct Job {
    stage: Stage,
    status: Status,
    progress: Arc<Progress>,
    error: Option<String>,
}

/// Everything a background worker needs to run one stage.
pub struct RunTicket {
    pub job: u64,
    pub stage: Stage,
    volume: Arc<Volume>,
    input: Option<Arc<LabelVolume>>,
    config: PipelineConfig,
    scribbles: ScribbleSet,
    seeds: Vec<SeedPoint>,
    pub progress: Arc<Progress>,
}

impl RunTicket {
    /// Runs the stage; blocking and CPU-bound.
    pub fn execute(&self) -> segd_core::Result<StageOutput> {
        let progress = self.progress.clone();
        let cb = move |_: Stage, f: f64| progress.advance(f);
        run_stage(self.stage, &self.volume, self.input.as_deref(), &self.config, &self.scribbles, &self.seeds, Some(&cb))
    }
}

pub struct Session {
    dir: PathBuf,
    volume: Arc<Volume>,
    config: PipelineConfig,
    labels: HashMap<Stage, Arc<LabelVolume>>,
    status: HashMap<Stage, (Status, Option<String>)>,
    scribbles: ScribbleSet,
    scribble_keys: HashSet<String>,
    seeds: Vec<SeedPoint>,
    running: Option<u64>,
    jobs: HashMap<u64, Job>,
    next_job: u64,
}

fn labels_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join("labels").join(format!("{}.mvol", stage.name()))
}

impl Session {
    pub fn open(dir: impl AsRef<Path>) -> ServiceResult<Self> {
        let dir = dir.as_ref().to_path_buf();
        let vpath = dir.join("volume.mvol");
        if !vpath.exists() {
            return Err(ServiceError::NotFound(format!("no volume at {}", vpath.display())));
        }
        let volume = mvol::load_volume(&vpath)?;
        let cpath = dir.join("config.txt");
        let mut config =
            if cpath.exists() { PipelineConfig::from_kv(&KvConfig::load(&cpath)?)? } else { PipelineConfig::default() };
        let tpath = dir.join("template.mvol");
        if tpath.exists() {
            config.preprocess.template = Some(template_from_labels(&mvol::load_labels(&tpath)?)?);
        }
        let spath = dir.join("scribbles.txt");
        let scribbles = if spath.exists() { ScribbleSet::load(&spath)? } else { ScribbleSet::default() };
        let scribble_keys = scribbles.records.iter().map(ScribbleRecord::to_line).collect();
        let seeds_path = dir.join("seeds.txt");
        let seeds = if seeds_path.exists() { load_seeds(&seeds_path)? } else { Vec::new() };
        let mut labels = HashMap::new();
        let mut status = HashMap::new();
        for s in Stage::ALL {
            let p = labels_path(&dir, s);
            if p.exists() {
                let l = mvol::load_labels(&p)?;
                l.check_matches(&volume)?;
                labels.insert(s, Arc::new(l));
                status.insert(s, (Status::Done, None));
            } else {
                status.insert(s, (Status::Pending, None));
            }
        }
        std::fs::create_dir_all(dir.join("labels")).map_err(SegError::from)?;
        Ok(Session {
            dir,
            volume: Arc::new(volume),
            config,
            labels,
            status,
            scribbles,
            scribble_keys,
            seeds,
            running: None,
            jobs: HashMap::new(),
            next_job: 1,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn config_mut(&mut self) -> &mut PipelineConfig {
        &mut self.config
    }

    pub fn info(&self) -> Info {
        let stages = Stage::ALL
            .into_iter()
            .map(|s| {
                let (status, error) = self.status[&s].clone();
                (s.name().to_string(), StageInfo { status, error })
            })
            .collect();
        Info {
            dims: self.volume.dims(),
            spacing: self.volume.spacing(),
            stages,
            scribbles: self.scribbles.records.len(),
            seeds: self.seeds.len(),
            running: self.running,
        }
    }

    pub fn slice_png(
        &self,
        axis: SliceAxis,
        index: usize,
        window: Option<(f64, f64)>,
        overlay_stage: Option<Stage>,
    ) -> ServiceResult<Vec<u8>> {
        let (c, w) = window.unwrap_or(DEFAULT_WINDOW);
        let gray = window_to_image(&self.volume.slice(axis, index)?, c, w)?;
        match overlay_stage {
            None => Ok(encode_gray(&gray_image(&gray))?),
            Some(s) => {
                let labels = self
                    .labels
                    .get(&s)
                    .ok_or_else(|| ServiceError::NotFound(format!("stage {s} has no labels yet")))?;
                Ok(encode_rgb(&overlay(&gray, &labels.slice(axis, index)?, OVERLAY_ALPHA))?)
            }
        }
    }

    pub fn labels_mvol(&self, stage: Stage) -> ServiceResult<Vec<u8>> {
        let p = labels_path(&self.dir, stage);
        if !self.labels.contains_key(&stage) || !p.exists() {
            return Err(ServiceError::NotFound(format!("stage {stage} has no labels yet")));
        }
        Ok(std::fs::read(p).map_err(SegError::from)?)
    }

    /// Appends valid, not yet seen records and persists the set.
    pub fn add_scribbles(&mut self, post: &ScribblePost) -> ServiceResult<PostOutcome> {
        let dims = self.volume.dims();
        let mut out = PostOutcome { accepted: 0, duplicates: 0, rejected: Vec::new(), total: 0 };
        for (index, r) in post.records.iter().enumerate() {
            let rec = match r.class.parse::<ScribbleClass>() {
                Ok(class) => ScribbleRecord {
                    frame: r.frame,
                    class,
                    radius: r.radius,
                    points: r.points.iter().map(|p| (p[0], p[1])).collect(),
                },
                Err(e) => {
                    out.rejected.push(Rejection { index, reason: e.to_string() });
                    continue;
                }
            };
            if let Err(e) = rec.validate(dims) {
                out.rejected.push(Rejection { index, reason: e.to_string() });
                continue;
            }
            if self.scribble_keys.insert(rec.to_line()) {
                self.scribbles.records.push(rec);
                out.accepted += 1;
            } else {
                out.duplicates += 1;
            }
        }
        if out.accepted > 0 {
            mvol::write_atomic(self.dir.join("scribbles.txt"), self.scribbles.to_text().as_bytes())?;
        }
        out.total = self.scribbles.records.len();
        Ok(out)
    }

    pub fn add_seeds(&mut self, post: &SeedPost) -> ServiceResult<PostOutcome> {
        let [nx, ny, nz] = self.volume.dims();
        let mut out = PostOutcome { accepted: 0, duplicates: 0, rejected: Vec::new(), total: 0 };
        for (index, s) in post.seeds.iter().enumerate() {
            if s.frame >= nz || s.x >= nx || s.y >= ny {
                out.rejected.push(Rejection {
                    index,
                    reason: format!("seed ({}, {}) in frame {} outside volume {nx}x{ny}x{nz}", s.x, s.y, s.frame),
                });
                continue;
            }
            let seed = SeedPoint { frame: s.frame, x: s.x, y: s.y };
            if self.seeds.contains(&seed) {
                out.duplicates += 1;
            } else {
                self.seeds.push(seed);
                out.accepted += 1;
            }
        }
        if out.accepted > 0 {
            mvol::write_atomic(self.dir.join("seeds.txt"), seeds_to_text(&self.seeds).as_bytes())?;
        }
        out.total = self.seeds.len();
        Ok(out)
    }

    /// Claims the single run slot for `stage` after checking prerequisites.
    pub fn begin_run(&mut self, stage: Stage) -> ServiceResult<RunTicket> {
        if let Some(j) = self.running {
            return Err(ServiceError::Conflict(format!("job {j} is still running")));
        }
        let input = match stage.input() {
            Some(prev) => Some(self.labels.get(&prev).cloned().ok_or_else(|| {
                ServiceError::Prerequisite(SegError::Prerequisite { stage: stage.name().into(), needs: prev.name().into() }.to_string())
            })?),
            None => None,
        };
        if stage == Stage::Track && self.seeds.is_empty() && !self.config.tracker.auto_init {
            return Err(ServiceError::Unprocessable(SegError::NoTracks.to_string()));
        }
        let job = self.next_job;
        self.next_job += 1;
        let progress = Arc::new(Progress::default());
        self.jobs.insert(job, Job { stage, status: Status::Running, progress: progress.clone(), error: None });
        self.status.insert(stage, (Status::Running, None));
        self.running = Some(job);
        Ok(RunTicket {
            job,
            stage,
            volume: self.volume.clone(),
            input,
            config: self.config.clone(),
            scribbles: self.scribbles.clone(),
            seeds: self.seeds.clone(),
            progress,
        })
    }

    /// Records a finished run. Labels reach disk by atomic replace before the
    /// in-memory state changes, so a crash keeps the previous outputs.
    pub fn finish_run(&mut self, ticket: &RunTicket, result: segd_core::Result<StageOutput>) {
        let outcome = result.and_then(|out| {
            mvol::save_labels(&out.labels, labels_path(&self.dir, ticket.stage))?;
            if let Some(report) = &out.report {
                mvol::write_atomic(self.dir.join(format!("{}_report.txt", ticket.stage.name())), report.as_bytes())?;
            }
            Ok(out)
        });
        let job = self.jobs.get_mut(&ticket.job).expect("job registered at begin_run");
        match outcome {
            Ok(out) => {
                ticket.progress.advance(1.0);
                job.status = Status::Done;
                self.labels.insert(ticket.stage, Arc::new(out.labels));
                self.status.insert(ticket.stage, (Status::Done, None));
            }
            Err(e) => {
                log::warn!("stage {} failed: {e}", ticket.stage);
                job.status = Status::Failed;
                job.error = Some(e.to_string());
                let prev = if self.labels.contains_key(&ticket.stage) { Status::Done } else { Status::Failed };
                self.status.insert(ticket.stage, (prev, Some(e.to_string())));
            }
        }
        self.running = None;
    }

    pub fn job(&self, id: u64) -> Option<JobInfo> {
        self.jobs.get(&id).map(|j| JobInfo {
            job: id,
            stage: j.stage.name().to_string(),
            status: j.status,
            progress: j.progress.get(),
            error: j.error.clone(),
        })
    }

    pub fn labels(&self, stage: Stage) -> Option<&LabelVolume> {
        self.labels.get(&stage).map(|l| l.as_ref())
    }

    pub fn scribbles(&self) -> &ScribbleSet {
        &self.scribbles
    }

    pub fn seeds(&self) -> &[SeedPoint] {
        &self.seeds
    }
}
