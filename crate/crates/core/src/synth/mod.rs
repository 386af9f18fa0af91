//! Seeded synthetic corpus with planted ground truth.
//!
//! Each video carries 15 rubric-feature tracks drawn as piecewise-constant
//! on/off (or level) processes. Learners play each video second by second
//! under Bernoulli hazards for dropout, pause, rewind and skip whose
//! log-intensities are shifted by the active features. Embeddings mix the
//! feature vector (averaged over a short window around the moment) through
//! a random matrix per part, plus a per-video offset and isotropic noise.
//! Everything is a pure function of the config.

mod oracle;
mod write;

pub use oracle::{oracle_metrics, Check, ConformanceReport, PipelineOutputs};
pub use write::{write_corpus, CorpusPaths};

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctml::{features_to_vector, Coder, CtmlRecord, Feature, N_FEATURES};
use crate::events::{Event, EventKind, VideoMeta};
use crate::rng::{derive_seed, keyed_rng};
use crate::signals::WatchInterval;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embed(#[from] crate::embedstore::EmbedError),
}

/// Additive log-intensity shifts of one feature (per unit of its scaled
/// value) on the three behavioral hazards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptEffect {
    pub pause: f64,
    pub rewind: f64,
    pub skip: f64,
}

/// On/off process of a binary feature, or level-segment process of an
/// ordinal one (levels drawn uniformly, `prevalence` unused).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    pub prevalence: f64,
    pub mean_on: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldShift {
    pub field: String,
    /// Parts whose mixing is redrawn for videos of the field.
    pub parts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedHotspot {
    pub video: usize,
    pub start: u32,
    pub width: u32,
    pub pause_log_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub n_courses: usize,
    pub fields: Vec<String>,
    pub runs_per_course: usize,
    pub duration_min: u32,
    pub duration_max: u32,
    pub learners_per_course: usize,
    pub watch_prob: f64,
    pub base_pause: f64,
    pub base_rewind: f64,
    pub base_skip: f64,
    pub base_dropout: f64,
    pub max_seeks_per_session: usize,
    pub rate_change_prob: f64,
    pub effects: BTreeMap<Feature, ConceptEffect>,
    pub tracks: BTreeMap<Feature, TrackSpec>,
    pub parts: Vec<(String, usize)>,
    /// Half-width of the window the embedding averages features over.
    pub embed_window: u32,
    pub embedding_noise: f64,
    pub video_offset_scale: f64,
    /// Embedded moments are `trim, trim + stride, ...`.
    pub embedding_stride: u32,
    pub trim_seconds: u32,
    pub coded_per_video: usize,
    pub human_rated: usize,
    pub rater_noise: f64,
    pub field_shift: Option<FieldShift>,
    pub hotspots: Vec<PlantedHotspot>,
    pub duplicate_pairs: usize,
    pub corruption_rate: f64,
}

/// Which features each part sees, by part name.
pub fn part_features(part: &str) -> Vec<Feature> {
    use Feature::*;
    match part {
        "transcript" => vec![Formula, Signaling, Interactivity, SemanticBreakpoint, Redundancy],
        "slide" => vec![Formula, Screen, StructuredViz, TextObject, VisualComplexity, Redundancy],
        "frames_sparse" => vec![
            Formula,
            Instructor,
            Screen,
            StructuredViz,
            TextObject,
            VisualComplexity,
            Annotating,
            AnimationVideo,
            Photo,
            Showing,
            VisualBreakpoint,
        ],
        _ => Feature::ALL.to_vec(),
    }
}

pub const DEFAULT_PARTS: [&str; 6] = ["transcript", "slide", "frames_sparse", "vlm_layer_1", "vlm_layer_32", "vlm_layer_64"];

pub fn default_effects() -> BTreeMap<Feature, ConceptEffect> {
    let e = |pause, rewind, skip| ConceptEffect { pause, rewind, skip };
    BTreeMap::from([
        (Feature::VisualBreakpoint, e(1.6, 1.2, 0.0)),
        (Feature::Formula, e(0.6, 0.5, -0.3)),
        (Feature::Interactivity, e(0.7, 0.0, 0.0)),
        (Feature::StructuredViz, e(0.3, 0.3, 0.0)),
        (Feature::VisualComplexity, e(0.4, 0.3, 0.0)),
        (Feature::Instructor, e(-0.3, 0.0, 0.5)),
        (Feature::Photo, e(-0.4, 0.0, 0.3)),
    ])
}

pub fn default_tracks() -> BTreeMap<Feature, TrackSpec> {
    use Feature::*;
    let t = |prevalence, mean_on| TrackSpec { prevalence, mean_on };
    BTreeMap::from([
        (Formula, t(0.3, 40.0)),
        (Instructor, t(0.4, 60.0)),
        (Screen, t(0.15, 40.0)),
        (StructuredViz, t(0.25, 40.0)),
        (TextObject, t(0.5, 40.0)),
        (VisualComplexity, t(0.0, 30.0)),
        (Annotating, t(0.1, 15.0)),
        (AnimationVideo, t(0.1, 15.0)),
        (Photo, t(0.1, 20.0)),
        (Showing, t(0.1, 10.0)),
        (VisualBreakpoint, t(0.08, 4.0)),
        (Signaling, t(0.1, 5.0)),
        (Interactivity, t(0.05, 8.0)),
        (SemanticBreakpoint, t(0.06, 4.0)),
        (Redundancy, t(0.0, 30.0)),
    ])
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_videos: 200,
            n_courses: 20,
            fields: vec!["Mathematics".into(), "Biology".into(), "History".into()],
            runs_per_course: 2,
            duration_min: 240,
            duration_max: 480,
            learners_per_course: 500,
            watch_prob: 0.85,
            base_pause: 0.006,
            base_rewind: 0.002,
            base_skip: 0.002,
            base_dropout: 0.0015,
            max_seeks_per_session: 4,
            rate_change_prob: 0.01,
            effects: default_effects(),
            tracks: default_tracks(),
            parts: DEFAULT_PARTS.iter().map(|p| (p.to_string(), 32)).collect(),
            embed_window: 2,
            embedding_noise: 0.5,
            video_offset_scale: 1.0,
            embedding_stride: 5,
            trim_seconds: 30,
            coded_per_video: 30,
            human_rated: 24,
            rater_noise: 0.05,
            field_shift: None,
            hotspots: Vec::new(),
            duplicate_pairs: 0,
            corruption_rate: 0.0,
        }
    }
}

impl SynthConfig {
    /// A scaled-down corpus for quick runs.
    pub fn small(seed: u64) -> Self {
        Self {
            seed,
            n_videos: 24,
            n_courses: 6,
            learners_per_course: 150,
            coded_per_video: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_videos == 0 || self.n_courses == 0 || self.fields.is_empty() {
            return bad("need at least one video, course and field".into());
        }
        if self.n_courses > self.n_videos {
            return bad("more courses than videos".into());
        }
        if self.duration_min <= 120 || self.duration_max < self.duration_min {
            return bad("durations must exceed 120 s and form a range".into());
        }
        if self.duration_min <= 2 * self.trim_seconds + 1 {
            return bad("durations must exceed twice the trim".into());
        }
        let all_finite = self
            .effects
            .values()
            .all(|e| e.pause.is_finite() && e.rewind.is_finite() && e.skip.is_finite());
        if !all_finite {
            return bad("effect sizes must be finite".into());
        }
        for p in [self.base_pause, self.base_rewind, self.base_skip, self.base_dropout] {
            if !(0.0..0.2).contains(&p) {
                return bad(format!("base hazard {p} outside [0, 0.2)"));
            }
        }
        if self.parts.is_empty() || self.parts.iter().any(|(_, d)| *d == 0) {
            return bad("parts need positive widths".into());
        }
        if self.runs_per_course == 0 || self.embedding_stride == 0 {
            return bad("runs_per_course and embedding_stride must be positive".into());
        }
        if self.duplicate_pairs > 0 && self.runs_per_course < 2 {
            return bad("duplicates need at least two runs per course".into());
        }
        if let Some(s) = &self.field_shift {
            if !self.fields.contains(&s.field) {
                return bad(format!("field shift names unknown field {:?}", s.field));
            }
        }
        for h in &self.hotspots {
            if h.video >= self.n_videos {
                return bad(format!("hotspot on video {} of {}", h.video, self.n_videos));
            }
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return bad("corruption_rate must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn effect(&self, f: Feature) -> ConceptEffect {
        self.effects.get(&f).copied().unwrap_or_default()
    }
}

pub fn video_id(i: usize) -> String {
    format!("v{i:04}")
}

pub fn course_id(c: usize) -> String {
    format!("c{c:03}")
}

pub fn run_id(c: usize, r: usize) -> String {
    format!("c{c:03}-r{r}")
}

/// Scaled feature values per second (rubric order).
pub type Track = Vec<[u8; N_FEATURES]>;

fn scaled(values: &[u8; N_FEATURES]) -> [f64; N_FEATURES] {
    let mut out = [0.0; N_FEATURES];
    for f in Feature::ALL {
        let v = f64::from(values[f.index()]);
        out[f.index()] = if f.is_ordinal() { (v - 1.0) / 4.0 } else { v };
    }
    out
}

/// Per-second log-intensity shift from the active features.
fn log_shift(track: &Track, config: &SynthConfig, pick: impl Fn(&ConceptEffect) -> f64) -> Vec<f64> {
    let effects: Vec<(usize, f64)> = Feature::ALL
        .iter()
        .map(|&f| (f.index(), pick(&config.effect(f))))
        .filter(|(_, e)| *e != 0.0)
        .collect();
    track
        .iter()
        .map(|v| {
            let s = scaled(v);
            effects.iter().map(|&(i, e)| e * s[i]).sum()
        })
        .collect()
}

/// Expected pauses per watching learner at each second:
/// `base_pause * exp(sum of active pause effects + hotspot effects)`.
pub fn expected_pause_intensity(track: &Track, config: &SynthConfig, hotspots: &[&PlantedHotspot]) -> Vec<f64> {
    let mut shift = log_shift(track, config, |e| e.pause);
    for h in hotspots {
        let end = (h.start + h.width).min(shift.len() as u32);
        for s in &mut shift[h.start as usize..end as usize] {
            *s += h.pause_log_effect;
        }
    }
    shift.iter().map(|s| (config.base_pause * s.exp()).min(0.5)).collect()
}

fn draw_track(config: &SynthConfig, duration: u32, rng: &mut ChaCha8Rng) -> Track {
    let len = duration as usize;
    let mut track = vec![[0u8; N_FEATURES]; len];
    for f in Feature::ALL {
        let spec = config.tracks.get(&f).copied().unwrap_or(TrackSpec {
            prevalence: 0.0,
            mean_on: 10.0,
        });
        let i = f.index();
        let geometric = |rng: &mut ChaCha8Rng, mean: f64| -> usize {
            let p = (1.0 / mean.max(1.0)).min(1.0);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            1 + (u.ln() / (1.0 - p).ln()).floor().max(0.0) as usize
        };
        if f.is_ordinal() {
            let mut t = 0;
            while t < len {
                let level = rng.random_range(1..=5u8);
                let seg = geometric(rng, spec.mean_on);
                for v in track.iter_mut().skip(t).take(seg) {
                    v[i] = level;
                }
                t += seg;
            }
        } else if spec.prevalence > 0.0 {
            let mean_off = spec.mean_on * (1.0 - spec.prevalence) / spec.prevalence;
            let mut on = rng.random::<f64>() < spec.prevalence;
            let mut t = 0;
            while t < len {
                let seg = geometric(rng, if on { spec.mean_on } else { mean_off });
                if on {
                    for v in track.iter_mut().skip(t).take(seg) {
                        v[i] = 1;
                    }
                }
                t += seg;
                on = !on;
            }
        }
    }
    track
}

/// Ground truth of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub video_id: String,
    pub duration: u32,
    pub field: String,
    pub course_id: String,
    pub tracks: Track,
    /// Expected pauses per second given the realized watch coverage.
    pub expected_pauses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub user_id: String,
    pub video_id: String,
    pub intervals: Vec<WatchInterval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Garbled,
    ZeroSeek,
    OutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// 1-based line number in the written event log.
    pub line: usize,
    pub kind: CorruptionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub videos: Vec<VideoTruth>,
    pub sessions: Vec<SessionTruth>,
    pub duplicate_pairs: Vec<(String, String)>,
    pub corruptions: Vec<Corruption>,
    pub hotspots: Vec<PlantedHotspot>,
}

/// Embedding rows in index order, one `Vec<f32>` per part.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEmbeddings {
    pub parts: Vec<(String, usize)>,
    pub index: Vec<(String, i64)>,
    pub data: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SynthConfig,
    pub metas: Vec<VideoMeta>,
    pub events: Vec<Event>,
    /// The event log as written, including corrupted lines.
    pub event_log: String,
    pub embeddings: SynthEmbeddings,
    /// Adjudicated rubric records of coded moments.
    pub records: Vec<CtmlRecord>,
    /// Two noisy human ratings of a subset of coded moments.
    pub human_ratings: Vec<CtmlRecord>,
    pub truth: GroundTruth,
}

struct VideoPlan {
    index: usize,
    id: String,
    duration: u32,
    course: usize,
    field: String,
    checksum: String,
    duplicate: Option<String>,
}

struct VideoOutput {
    events: Vec<Event>,
    sessions: Vec<SessionTruth>,
    truth: VideoTruth,
}

fn jitter(rng: &mut ChaCha8Rng) -> f64 {
    // keeps rounding on the intended second
    f64::from(rng.random_range(0..40u32)) / 100.0
}

#[allow(clippy::too_many_arguments)]
fn simulate_session(
    config: &SynthConfig,
    plan: &VideoPlan,
    video_id: &str,
    user_id: &str,
    run: &str,
    start_ms: i64,
    hazards: &Hazards,
    rng: &mut ChaCha8Rng,
    events: &mut Vec<Event>,
) -> Vec<WatchInterval> {
    let d = plan.duration as usize;
    let mut wall = start_ms;
    let mut intervals = Vec::new();
    let ev = |kind, from: f64, to: Option<f64>, wall: i64, rate: Option<f64>| Event {
        user_id: user_id.to_string(),
        video_id: video_id.to_string(),
        course_run_id: run.to_string(),
        wall_time_ms: wall,
        kind,
        from_pos: from,
        to_pos: to,
        rate,
    };
    if rng.random::<f64>() < config.rate_change_prob {
        events.push(ev(EventKind::RateChange, 0.0, None, wall, Some(1.5)));
        wall += 1;
    }
    let mut open = 0.0;
    events.push(ev(EventKind::Play, open, None, wall, None));
    let mut pos = 0usize;
    // sub-second phase of the current playback stretch
    let mut frac = 0.0;
    let mut seeks = 0;
    while pos < d {
        wall += 1000;
        let u: f64 = rng.random();
        let hd = config.base_dropout;
        let hp = hazards.pause[pos];
        let hr = if seeks < config.max_seeks_per_session && pos >= 8 { hazards.rewind[pos] } else { 0.0 };
        let hs = if seeks < config.max_seeks_per_session && pos + 6 < d { hazards.skip[pos] } else { 0.0 };
        if u < hd + hp {
            let at = pos as f64 + frac;
            events.push(ev(EventKind::Pause, at, None, wall, None));
            intervals.push(WatchInterval { start: open, end: at });
            if u < hd {
                intervals.retain(|iv| !iv.is_empty());
                return intervals;
            }
            wall += 1000 * rng.random_range(2..30i64);
            events.push(ev(EventKind::Play, at, None, wall, None));
            open = at;
            pos += 1;
        } else if u < hd + hp + hr {
            let lo = pos.saturating_sub(30);
            let hi = pos - 3;
            let cands: Vec<usize> = (lo..=hi).collect();
            let dest = *cands
                .choose_weighted(rng, |&t| hazards.rewind_weight[t])
                .expect("non-empty candidate range");
            let from = pos as f64 + frac;
            frac = jitter(rng);
            let to = dest as f64 + frac;
            events.push(ev(EventKind::SeekBackward, from, Some(to), wall, None));
            intervals.push(WatchInterval { start: open, end: from });
            open = to;
            pos = dest;
            seeks += 1;
        } else if u < hd + hp + hr + hs {
            let target = (pos + rng.random_range(5..=30usize)).min(d - 1);
            let from = pos as f64 + frac;
            frac = jitter(rng);
            let to = target as f64 + frac;
            events.push(ev(EventKind::SeekForward, from, Some(to), wall, None));
            intervals.push(WatchInterval { start: open, end: from });
            open = to;
            pos = target;
            seeks += 1;
        } else {
            pos += 1;
        }
    }
    intervals.push(WatchInterval {
        start: open,
        end: f64::from(plan.duration),
    });
    intervals.retain(|iv| !iv.is_empty());
    intervals
}

struct Hazards {
    pause: Vec<f64>,
    rewind: Vec<f64>,
    rewind_weight: Vec<f64>,
    skip: Vec<f64>,
}

fn simulate_video(config: &SynthConfig, plan: &VideoPlan) -> VideoOutput {
    let mut rng = keyed_rng(config.seed, "video", &[plan.index as u64]);
    let track = draw_track(config, plan.duration, &mut rng);
    let hotspots: Vec<&PlantedHotspot> = config.hotspots.iter().filter(|h| h.video == plan.index).collect();
    let rewind_shift = log_shift(&track, config, |e| e.rewind);
    let skip_shift = log_shift(&track, config, |e| e.skip);
    let hazards = Hazards {
        pause: expected_pause_intensity(&track, config, &hotspots),
        rewind: rewind_shift.iter().map(|s| (config.base_rewind * s.exp()).min(0.5)).collect(),
        rewind_weight: rewind_shift.iter().map(|s| s.exp()).collect(),
        skip: skip_shift.iter().map(|s| (config.base_skip * s.exp()).min(0.5)).collect(),
    };
    let mut events = Vec::new();
    let mut sessions = Vec::new();
    let mut coverage = vec![0.0; plan.duration as usize];
    for l in 0..config.learners_per_course {
        let mut srng = keyed_rng(config.seed, "session", &[plan.index as u64, l as u64]);
        if srng.random::<f64>() >= config.watch_prob {
            continue;
        }
        let run = l % config.runs_per_course;
        let vid = match (&plan.duplicate, run) {
            (Some(dup), 1) => dup.as_str(),
            _ => plan.id.as_str(),
        };
        let user = format!("u{:03}-{l:04}", plan.course);
        let start_ms = 1_700_000_000_000 + plan.index as i64 * 86_400_000 + l as i64 * 7_919;
        let intervals = simulate_session(
            config,
            plan,
            vid,
            &user,
            &run_id(plan.course, run),
            start_ms,
            &hazards,
            &mut srng,
            &mut events,
        );
        for iv in &intervals {
            for t in iv.covered_seconds() {
                if let Some(c) = coverage.get_mut(t as usize) {
                    *c += 1.0;
                }
            }
        }
        sessions.push(SessionTruth {
            user_id: user,
            video_id: vid.to_string(),
            intervals,
        });
    }
    let expected_pauses = coverage.iter().zip(&hazards.pause).map(|(c, h)| c * h).collect();
    VideoOutput {
        events,
        sessions,
        truth: VideoTruth {
            video_id: plan.id.clone(),
            duration: plan.duration,
            field: plan.field.clone(),
            course_id: course_id(plan.course),
            tracks: track,
            expected_pauses,
        },
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Mixing matrix `dim x 15` for a part; columns of features the part does
/// not see are zero.
fn mixing(config: &SynthConfig, part: usize, name: &str, dim: usize, tag: &str) -> Vec<f64> {
    let mut rng = keyed_rng(config.seed, tag, &[part as u64]);
    let visible = part_features(name);
    let mut m = vec![0.0; dim * N_FEATURES];
    for r in 0..dim {
        for f in Feature::ALL {
            let v = gaussian(&mut rng);
            if visible.contains(&f) {
                m[r * N_FEATURES + f.index()] = v;
            }
        }
    }
    m
}

/// Embedding index entries and per-part rows of one video.
type VideoRows = (Vec<(String, i64)>, Vec<Vec<f32>>);

fn window_mean(track: &Track, t: i64, half: u32) -> [f64; N_FEATURES] {
    let lo = (t - i64::from(half)).max(0) as usize;
    let hi = ((t + i64::from(half)) as usize).min(track.len() - 1);
    let mut acc = [0.0; N_FEATURES];
    for v in &track[lo..=hi] {
        for (a, s) in acc.iter_mut().zip(scaled(v)) {
            *a += s;
        }
    }
    let n = (hi - lo + 1) as f64;
    acc.map(|a| a / n)
}

fn embed(config: &SynthConfig, truths: &[VideoTruth]) -> SynthEmbeddings {
    let mixes: Vec<Vec<f64>> = config
        .parts
        .iter()
        .enumerate()
        .map(|(i, (n, d))| mixing(config, i, n, *d, "mixing"))
        .collect();
    let shifted: Vec<Option<Vec<f64>>> = config
        .parts
        .iter()
        .enumerate()
        .map(|(i, (n, d))| {
            config
                .field_shift
                .as_ref()
                .filter(|s| s.parts.contains(n))
                .map(|_| mixing(config, i, n, *d, "mixing-shift"))
        })
        .collect();
    let per_video: Vec<VideoRows> = truths
        .par_iter()
        .enumerate()
        .map(|(vi, truth)| {
            let mut rng = keyed_rng(config.seed, "embed", &[vi as u64]);
            let in_shift = config.field_shift.as_ref().is_some_and(|s| s.field == truth.field);
            let offsets: Vec<Vec<f64>> = config
                .parts
                .iter()
                .map(|(_, d)| (0..*d).map(|_| config.video_offset_scale * gaussian(&mut rng)).collect())
                .collect();
            let mut index = Vec::new();
            let mut data: Vec<Vec<f32>> = vec![Vec::new(); config.parts.len()];
            let last = i64::from(truth.duration - config.trim_seconds);
            let mut t = i64::from(config.trim_seconds);
            while t <= last {
                let c = window_mean(&truth.tracks, t, config.embed_window);
                for (pi, (_, d)) in config.parts.iter().enumerate() {
                    let m = match (&shifted[pi], in_shift) {
                        (Some(alt), true) => alt,
                        _ => &mixes[pi],
                    };
                    for r in 0..*d {
                        let row = &m[r * N_FEATURES..(r + 1) * N_FEATURES];
                        let mix: f64 = row.iter().zip(&c).map(|(a, b)| a * b).sum();
                        let v = mix + offsets[pi][r] + config.embedding_noise * gaussian(&mut rng);
                        data[pi].push(v as f32);
                    }
                }
                index.push((truth.video_id.clone(), t));
                t += i64::from(config.embedding_stride);
            }
            (index, data)
        })
        .collect();
    let mut out = SynthEmbeddings {
        parts: config.parts.clone(),
        index: Vec::new(),
        data: vec![Vec::new(); config.parts.len()],
    };
    for (index, data) in per_video {
        out.index.extend(index);
        for (acc, d) in out.data.iter_mut().zip(data) {
            acc.extend(d);
        }
    }
    out
}

fn code_moments(config: &SynthConfig, truths: &[VideoTruth]) -> (Vec<CtmlRecord>, Vec<CtmlRecord>) {
    let mut records = Vec::new();
    for (vi, truth) in truths.iter().enumerate() {
        let mut rng = keyed_rng(config.seed, "coding", &[vi as u64]);
        let last = i64::from(truth.duration - config.trim_seconds);
        let grid: Vec<i64> = (i64::from(config.trim_seconds)..=last)
            .step_by(config.embedding_stride as usize)
            .collect();
        let mut picked: Vec<i64> = grid
            .choose_multiple(&mut rng, config.coded_per_video.min(grid.len()))
            .copied()
            .collect();
        picked.sort_unstable();
        for t in picked {
            records.push(CtmlRecord {
                video_id: truth.video_id.clone(),
                t,
                coder: Coder::Adjudicated,
                values: truth.tracks[t as usize],
            });
        }
    }
    let mut rng = keyed_rng(config.seed, "human-raters", &[]);
    let rated: Vec<&CtmlRecord> = records.choose_multiple(&mut rng, config.human_rated.min(records.len())).collect();
    let mut humans = Vec::new();
    for coder in [Coder::HumanA, Coder::HumanB] {
        for r in &rated {
            let mut values = r.values;
            for f in Feature::ALL {
                if rng.random::<f64>() < config.rater_noise {
                    let v = &mut values[f.index()];
                    *v = if f.is_ordinal() {
                        if *v == 5 || (*v > 1 && rng.random::<bool>()) {
                            *v - 1
                        } else {
                            *v + 1
                        }
                    } else {
                        1 - *v
                    };
                }
            }
            humans.push(CtmlRecord {
                video_id: r.video_id.clone(),
                t: r.t,
                coder,
                values,
            });
        }
    }
    humans.sort_by(|a, b| (&a.video_id, a.t, a.coder).cmp(&(&b.video_id, b.t, b.coder)));
    (records, humans)
}

fn corrupt(config: &SynthConfig, lines: Vec<String>, plans: &[VideoPlan]) -> (String, Vec<Corruption>) {
    let n_bad = (config.corruption_rate * lines.len() as f64).round() as usize;
    let mut rng = keyed_rng(config.seed, "corruption", &[]);
    let total = lines.len() + n_bad;
    let mut slots: Vec<usize> = rand::seq::index::sample(&mut rng, total, n_bad).into_vec();
    slots.sort_unstable();
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum::<usize>() + 64 * n_bad);
    let mut corruptions = Vec::new();
    let mut src = lines.into_iter();
    let mut next_bad = slots.iter().peekable();
    for i in 0..total {
        if next_bad.peek() == Some(&&i) {
            next_bad.next();
            let plan = &plans[rng.random_range(0..plans.len())];
            let kind = match rng.random_range(0..3) {
                0 => CorruptionKind::Garbled,
                1 => CorruptionKind::ZeroSeek,
                _ => CorruptionKind::OutOfRange,
            };
            let line = match kind {
                CorruptionKind::Garbled => "{\"user_id\": \"u-broken\", \"video_id\": ".to_string(),
                CorruptionKind::ZeroSeek => format!(
                    "{{\"user_id\":\"u-bad\",\"video_id\":\"{}\",\"course_run_id\":\"{}\",\"ts_ms\":1,\"kind\":\"seek\",\"pos\":40.0,\"to_pos\":40.0}}",
                    plan.id,
                    run_id(plan.course, 0)
                ),
                CorruptionKind::OutOfRange => format!(
                    "{{\"user_id\":\"u-bad\",\"video_id\":\"{}\",\"course_run_id\":\"{}\",\"ts_ms\":1,\"kind\":\"pause\",\"pos\":{}.0}}",
                    plan.id,
                    run_id(plan.course, 0),
                    plan.duration + 50
                ),
            };
            out.push_str(&line);
            corruptions.push(Corruption { line: i + 1, kind });
        } else {
            out.push_str(&src.next().expect("line count"));
        }
        out.push('\n');
    }
    (out, corruptions)
}

/// Generates the whole corpus in memory.
pub fn generate(config: &SynthConfig) -> Result<Corpus, SynthError> {
    config.validate()?;
    let plans: Vec<VideoPlan> = (0..config.n_videos)
        .map(|i| {
            let mut rng = keyed_rng(config.seed, "plan", &[i as u64]);
            let course = i % config.n_courses;
            VideoPlan {
                index: i,
                id: video_id(i),
                duration: rng.random_range(config.duration_min..=config.duration_max),
                course,
                field: config.fields[course % config.fields.len()].clone(),
                checksum: format!("{:016x}", derive_seed(config.seed, "checksum", &[i as u64])),
                duplicate: (i < config.duplicate_pairs).then(|| format!("{}-dup", video_id(i))),
            }
        })
        .collect();
    let outputs: Vec<VideoOutput> = plans.par_iter().map(|p| simulate_video(config, p)).collect();

    let mut metas = Vec::new();
    let mut duplicate_pairs = Vec::new();
    for p in &plans {
        let runs: Vec<String> = (0..config.runs_per_course).map(|r| run_id(p.course, r)).collect();
        let meta = VideoMeta {
            video_id: p.id.clone(),
            duration: p.duration,
            content_checksum: p.checksum.clone(),
            field: p.field.clone(),
            course_id: course_id(p.course),
            course_run_ids: runs.clone(),
            language: "en".into(),
        };
        if let Some(dup) = &p.duplicate {
            duplicate_pairs.push((p.id.clone(), dup.clone()));
            metas.push(VideoMeta {
                course_run_ids: runs[..1].to_vec(),
                ..meta.clone()
            });
            metas.push(VideoMeta {
                video_id: dup.clone(),
                course_run_ids: runs[1..].to_vec(),
                ..meta
            });
        } else {
            metas.push(meta);
        }
    }

    let mut events = Vec::new();
    let mut sessions = Vec::new();
    let mut truths = Vec::new();
    for o in outputs {
        events.extend(o.events);
        sessions.extend(o.sessions);
        truths.push(o.truth);
    }
    let mut text = Vec::new();
    crate::events::write_event_log(&events, &mut text)?;
    let lines: Vec<String> = String::from_utf8(text)
        .expect("event log is utf-8")
        .lines()
        .map(str::to_string)
        .collect();
    let (event_log, corruptions) = corrupt(config, lines, &plans);
    let embeddings = embed(config, &truths);
    let (records, human_ratings) = code_moments(config, &truths);
    Ok(Corpus {
        config: config.clone(),
        metas,
        events,
        event_log,
        embeddings,
        records,
        human_ratings,
        truth: GroundTruth {
            seed: config.seed,
            videos: truths,
            sessions,
            duplicate_pairs,
            corruptions,
            hotspots: config.hotspots.clone(),
        },
    })
}

/// Rubric feature vectors of the coded moments, keyed by moment.
pub fn record_vectors(records: &[CtmlRecord]) -> std::collections::HashMap<(String, i64), Vec<f64>> {
    records
        .iter()
        .map(|r| ((r.video_id.clone(), r.t), features_to_vector(r)))
        .collect()
}
