//! Stage sequencing: preprocess, geodesic split, GrabCut, tracking.

use std::fmt;
use std::str::FromStr;

use crate::config::KvConfig;
use crate::error::{Result, SegError};
use crate::geodesic::{geodesic_stage, GeodesicConfig};
use crate::grabcut::{grabcut_volume, GrabCutConfig};
use crate::preprocess::{run_preprocess, PreprocessConfig};
use crate::scribble::ScribbleSet;
use crate::tracker::{run_tracking, SeedPoint, TrackerConfig, TrackingResult};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Geodesic,
    Grabcut,
    Track,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Preprocess, Stage::Geodesic, Stage::Grabcut, Stage::Track];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Geodesic => "geodesic",
            Stage::Grabcut => "grabcut",
            Stage::Track => "track",
        }
    }

    /// The stage whose labels this one consumes.
    pub fn input(self) -> Option<Stage> {
        match self {
            Stage::Preprocess => None,
            Stage::Geodesic => Some(Stage::Preprocess),
            Stage::Grabcut => Some(Stage::Geodesic),
            Stage::Track => Some(Stage::Grabcut),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = SegError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| SegError::InvalidArgument(format!("unknown stage '{s}'")))
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub geodesic: GeodesicConfig,
    pub grabcut: GrabCutConfig,
    pub tracker: TrackerConfig,
}

impl PipelineConfig {
    pub fn known_keys() -> Vec<&'static str> {
        [PreprocessConfig::KEYS, GeodesicConfig::KEYS, GrabCutConfig::KEYS, TrackerConfig::KEYS].concat()
    }

    /// Every stage section from one key=value file; unknown keys are errors.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_known(&Self::known_keys())?;
        Ok(PipelineConfig {
            preprocess: PreprocessConfig::from_kv(kv)?,
            geodesic: GeodesicConfig::from_kv(kv)?,
            grabcut: GrabCutConfig::from_kv(kv)?,
            tracker: TrackerConfig::from_kv(kv)?,
        })
    }
}

/// Stage-level progress: the running stage and its completed fraction.
pub type StageProgress<'a> = &'a (dyn Fn(Stage, f64) + Sync);

/// Labels produced by one stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub labels: LabelVolume,
    /// Track table for the tracking stage.
    pub report: Option<String>,
}

/// Runs a single stage on the previous stage's labels.
pub fn run_stage(
    stage: Stage,
    v: &Volume,
    input: Option<&LabelVolume>,
    cfg: &PipelineConfig,
    scribbles: &ScribbleSet,
    seeds: &[SeedPoint],
    progress: Option<StageProgress>,
) -> Result<StageOutput> {
    let missing = || SegError::Prerequisite {
        stage: stage.name().into(),
        needs: stage.input().map_or("", Stage::name).into(),
    };
    let report = |f: f64| {
        if let Some(p) = progress {
            p(stage, f);
        }
    };
    report(0.0);
    let out = match stage {
        Stage::Preprocess => StageOutput { labels: run_preprocess(v, &cfg.preprocess)?.labels, report: None },
        Stage::Geodesic => StageOutput { labels: geodesic_stage(v, input.ok_or_else(missing)?, &cfg.geodesic)?.labels, report: None },
        Stage::Grabcut => {
            let chunk_done = |done: usize, total: usize| report(done as f64 / total.max(1) as f64);
            let r = grabcut_volume(v, input.ok_or_else(missing)?, scribbles, &cfg.grabcut, Some(&chunk_done))?;
            StageOutput { labels: r.labels, report: None }
        }
        Stage::Track => {
            let labels = input.ok_or_else(missing)?;
            labels.check_matches(v)?;
            let r: TrackingResult = run_tracking(labels, seeds, &cfg.tracker)?;
            StageOutput { report: Some(r.report()), labels: r.labels }
        }
    };
    report(1.0);
    Ok(out)
}

/// Labels after each stage, in stage order.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub stages: Vec<(Stage, StageOutput)>,
}

impl PipelineResult {
    pub fn labels(&self, stage: Stage) -> Option<&LabelVolume> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, o)| &o.labels)
    }

    pub fn final_labels(&self) -> &LabelVolume {
        &self.stages.last().expect("pipeline ran at least one stage").1.labels
    }
}

/// Runs stages up to and including `last`.
pub fn run_pipeline(
    v: &Volume,
    cfg: &PipelineConfig,
    scribbles: &ScribbleSet,
    seeds: &[SeedPoint],
    last: Stage,
    progress: Option<StageProgress>,
) -> Result<PipelineResult> {
    let mut stages: Vec<(Stage, StageOutput)> = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
        let input = stages.last().map(|(_, o)| &o.labels);
        let out = run_stage(stage, v, input, cfg, scribbles, seeds, progress)?;
        stages.push((stage, out));
    }
    Ok(PipelineResult { stages })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("warp".parse::<Stage>().is_err());
        assert_eq!(Stage::Track.input(), Some(Stage::Grabcut));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let kv = KvConfig::parse("lambda=20\nepsilon=0.2\npatch_size=5\nbin_width=5\n").unwrap();
        let c = PipelineConfig::from_kv(&kv).unwrap();
        assert_eq!(c.grabcut.lambda, 20.0);
        assert_eq!(c.tracker.epsilon, 0.2);
        assert_eq!(c.geodesic.patch_size, 5);
        assert_eq!(c.preprocess.bin_width, 5.0);
        assert!(PipelineConfig::from_kv(&KvConfig::parse("lamda=20").unwrap()).is_err());
    }

    #[test]
    fn missing_input_is_prerequisite_error() {
        let v = Volume::filled([4, 4, 2], [1.0; 3], -1000).unwrap();
        let cfg = PipelineConfig::default();
        let e = run_stage(Stage::Geodesic, &v, None, &cfg, &ScribbleSet::default(), &[], None).unwrap_err();
        assert!(matches!(e, SegError::Prerequisite { .. }), "{e}");
    }

    #[test]
    fn stagewise_equals_end_to_end() {
        use crate::phantom::{generate, PhantomSpec};
        let spec = PhantomSpec { dims: [128, 128, 32], ..PhantomSpec::default() };
        let p = generate(&spec).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.tracker.auto_init = true;
        let none = ScribbleSet::default();
        let full = run_pipeline(&p.volume, &cfg, &none, &[], Stage::Track, None).unwrap();
        let mut prev: Option<LabelVolume> = None;
        for s in Stage::ALL {
            let out = run_stage(s, &p.volume, prev.as_ref(), &cfg, &none, &[], None).unwrap();
            assert_eq!(out.labels.labels(), full.labels(s).unwrap().labels(), "{s}");
            prev = Some(out.labels);
        }
    }
}
