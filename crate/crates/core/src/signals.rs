//! Population-level interaction signals.
//!
//! Per-video event streams become four per-second count series (watch
//! coverage, pause positions, rewind destinations, skip origins). Each is
//! trimmed, normalized by the number of active learners, smoothed,
//! linearly detrended and finally replaced by its within-video percentile
//! rank. Binary top-K labels are derived from the rank series and
//! subsampled into [`Moment`]s.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{classify_seek, round_half_up, Event, EventKind, SeekClass, VideoMeta};
use crate::stats;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("video {video_id} lasts {duration}s; signals need more than {min}s")]
    VideoTooShort {
        video_id: String,
        duration: u32,
        min: u32,
    },
    #[error("expected a series at stage {expected:?}, got {actual:?}")]
    WrongStage { expected: Stage, actual: Stage },
    #[error("series lengths differ ({0} vs {1})")]
    Misaligned(usize, usize),
    #[error("K must be one of 5, 10, 20 (got {0})")]
    UnsupportedK(u32),
    #[error("unknown signal name {0:?}")]
    UnknownSignal(String),
    #[error("signal archive line {line}: {message}")]
    Archive { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Signal {
    Watched,
    PausedAt,
    RewoundTo,
    SkippedFrom,
}

impl Signal {
    pub const ALL: [Signal; 4] = [
        Signal::Watched,
        Signal::PausedAt,
        Signal::RewoundTo,
        Signal::SkippedFrom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Signal::Watched => "Watched",
            Signal::PausedAt => "PausedAt",
            Signal::RewoundTo => "RewoundTo",
            Signal::SkippedFrom => "SkippedFrom",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Signal {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Signal::ALL
            .into_iter()
            .find(|sig| sig.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SignalError::UnknownSignal(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    RawCounts,
    Normalized,
    Smoothed,
    Detrended,
    Rank,
}

/// A per-video series over consecutive integer seconds starting at `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSeries {
    pub video_id: String,
    pub signal: Signal,
    pub stage: Stage,
    pub t0: i64,
    pub values: Vec<f64>,
    /// Stages this series has passed through, oldest first.
    pub history: Vec<Stage>,
}

impl SignalSeries {
    fn advance(&self, stage: Stage, t0: i64, values: Vec<f64>) -> SignalSeries {
        let mut history = self.history.clone();
        history.push(stage);
        SignalSeries {
            video_id: self.video_id.clone(),
            signal: self.signal,
            stage,
            t0,
            values,
            history,
        }
    }

    fn expect_stage(&self, stage: Stage) -> Result<(), SignalError> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(SignalError::WrongStage {
                expected: stage,
                actual: self.stage,
            })
        }
    }

    pub fn value_at(&self, t: i64) -> Option<f64> {
        let i = t - self.t0;
        (i >= 0).then(|| self.values.get(i as usize).copied()).flatten()
    }

    pub fn seconds(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.values.len() as i64).map(move |i| self.t0 + i)
    }
}

/// Processing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    /// Seconds removed at each end of the video.
    pub trim_seconds: u32,
    /// Full width of the centered moving average.
    pub smoothing_window: usize,
    pub subsample_interval: u32,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            trim_seconds: 30,
            smoothing_window: 5,
            subsample_interval: 5,
        }
    }
}

/// Half-open playback interval `[start, end)` in video seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatchInterval {
    pub start: f64,
    pub end: f64,
}

impl WatchInterval {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Integer seconds covered, using rounded endpoints.
    pub fn covered_seconds(&self) -> std::ops::Range<i64> {
        round_half_up(self.start)..round_half_up(self.end)
    }
}

/// Rebuilds playback intervals for one learner on one video from events in
/// wall-time order. A play opens an interval; the next play or pause closes
/// it at its position and a seek closes it at its origin (reopening at the
/// destination). An interval still open at the end runs to the end of the
/// video. Playback rate is taken as 1.0.
pub fn reconstruct_playback(events: &[&Event], duration: f64) -> Vec<WatchInterval> {
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    let close = |out: &mut Vec<WatchInterval>, start: f64, end: f64| {
        let iv = WatchInterval {
            start,
            end: end.min(duration),
        };
        if !iv.is_empty() {
            out.push(iv);
        }
    };
    for ev in events {
        match ev.kind {
            EventKind::Play => {
                if let Some(a) = open {
                    close(&mut out, a, ev.from_pos);
                }
                open = Some(ev.from_pos);
            }
            EventKind::Pause => {
                if let Some(a) = open.take() {
                    close(&mut out, a, ev.from_pos);
                }
            }
            EventKind::SeekForward | EventKind::SeekBackward => {
                if let Some(a) = open {
                    close(&mut out, a, ev.from_pos);
                    open = ev.to_pos;
                }
            }
            EventKind::RateChange => {}
        }
    }
    if let Some(a) = open {
        close(&mut out, a, duration);
    }
    out
}

/// The four raw count series of a video plus the active-learner count,
/// each indexed by second `0..=duration`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSignals {
    pub video_id: String,
    pub duration: u32,
    pub watched: Vec<f64>,
    pub paused: Vec<f64>,
    pub rewound: Vec<f64>,
    pub skipped: Vec<f64>,
    pub active: Vec<f64>,
}

impl RawSignals {
    pub fn series(&self, signal: Signal) -> SignalSeries {
        let values = match signal {
            Signal::Watched => &self.watched,
            Signal::PausedAt => &self.paused,
            Signal::RewoundTo => &self.rewound,
            Signal::SkippedFrom => &self.skipped,
        };
        SignalSeries {
            video_id: self.video_id.clone(),
            signal,
            stage: Stage::RawCounts,
            t0: 0,
            values: values.clone(),
            history: vec![Stage::RawCounts],
        }
    }

    pub fn active_series(&self) -> SignalSeries {
        SignalSeries {
            video_id: self.video_id.clone(),
            signal: Signal::Watched,
            stage: Stage::RawCounts,
            t0: 0,
            values: self.active.clone(),
            history: vec![Stage::RawCounts],
        }
    }
}

fn check_duration(video_id: &str, duration: u32, trim: u32) -> Result<(), SignalError> {
    let min = 2 * trim;
    if duration <= min {
        return Err(SignalError::VideoTooShort {
            video_id: video_id.to_string(),
            duration,
            min,
        });
    }
    Ok(())
}

/// Counts all raw signals for one canonical video. `events` must be sorted
/// by `(user_id, wall_time)` as produced by the events module.
pub fn raw_signals(
    video_id: &str,
    events: &[Event],
    duration: u32,
    trim: u32,
) -> Result<RawSignals, SignalError> {
    check_duration(video_id, duration, trim)?;
    let len = duration as usize + 1;
    let clamp = |t: i64| t.clamp(0, duration as i64) as usize;
    let mut raw = RawSignals {
        video_id: video_id.to_string(),
        duration,
        watched: vec![0.0; len],
        paused: vec![0.0; len],
        rewound: vec![0.0; len],
        skipped: vec![0.0; len],
        active: vec![0.0; len],
    };
    let mut covered = vec![false; len];
    for user_events in events.chunk_by(|a, b| a.user_id == b.user_id) {
        let refs: Vec<&Event> = user_events.iter().collect();
        covered.iter_mut().for_each(|c| *c = false);
        for iv in reconstruct_playback(&refs, f64::from(duration)) {
            for t in iv.covered_seconds() {
                let t = clamp(t);
                raw.watched[t] += 1.0;
                covered[t] = true;
            }
        }
        for (a, c) in raw.active.iter_mut().zip(&covered) {
            if *c {
                *a += 1.0;
            }
        }
        for ev in user_events {
            match ev.kind {
                EventKind::Pause => raw.paused[clamp(round_half_up(ev.from_pos))] += 1.0,
                EventKind::SeekForward | EventKind::SeekBackward => {
                    match classify_seek(ev).expect("seek kinds classify") {
                        SeekClass::RewindToDestination(t) => raw.rewound[clamp(t)] += 1.0,
                        SeekClass::SkipFromOrigin(t) => raw.skipped[clamp(t)] += 1.0,
                    }
                }
                EventKind::Play | EventKind::RateChange => {}
            }
        }
    }
    Ok(raw)
}

/// Raw counts of a single signal.
pub fn raw_counts(
    video_id: &str,
    events: &[Event],
    signal: Signal,
    duration: u32,
) -> Result<SignalSeries, SignalError> {
    Ok(raw_signals(video_id, events, duration, SignalConfig::default().trim_seconds)?.series(signal))
}

/// Step 1: keep seconds `trim ..= duration - trim`.
pub fn trim(series: &SignalSeries, duration: u32, trim: u32) -> Result<SignalSeries, SignalError> {
    check_duration(&series.video_id, duration, trim)?;
    let first = i64::from(trim);
    let last = i64::from(duration) - i64::from(trim);
    let values: Vec<f64> = (first..=last)
        .map(|t| series.value_at(t).unwrap_or(0.0))
        .collect();
    let mut out = series.advance(series.stage, first, values);
    out.history.pop();
    Ok(out)
}

/// Step 2: divide by the active-learner count; seconds without active
/// learners become 0.
pub fn normalize(series: &SignalSeries, active: &[f64]) -> Result<SignalSeries, SignalError> {
    if series.values.len() != active.len() {
        return Err(SignalError::Misaligned(series.values.len(), active.len()));
    }
    let values = series
        .values
        .iter()
        .zip(active)
        .map(|(&v, &a)| if a > 0.0 { v / a } else { 0.0 })
        .collect();
    Ok(series.advance(Stage::Normalized, series.t0, values))
}

/// Step 3: centered moving average of width `window` (odd). Near the edges
/// the window is truncated to the seconds that exist and the weight of the
/// missing neighbours is folded into the center sample. The smoothing
/// matrix is then symmetric with unit row sums, so the series mean is
/// preserved exactly and constant input stays bitwise constant.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let half = window / 2;
    let w = 1.0 / (2 * half + 1) as f64;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let center = values[i];
            let shift: f64 = values[lo..=hi].iter().map(|&v| v - center).sum();
            center + w * shift
        })
        .collect()
}

pub fn smooth(series: &SignalSeries, window: usize) -> SignalSeries {
    series.advance(
        Stage::Smoothed,
        series.t0,
        moving_average(&series.values, window),
    )
}

/// Step 4: subtract the least-squares line fitted over the series' seconds.
pub fn detrend_values(t0: i64, values: &[f64]) -> Vec<f64> {
    let xs: Vec<f64> = (0..values.len()).map(|i| (t0 + i as i64) as f64).collect();
    let fit = stats::ols_line(&xs, values);
    values
        .iter()
        .zip(&xs)
        .map(|(&v, &x)| v - fit.at(x))
        .collect()
}

pub fn detrend(series: &SignalSeries) -> SignalSeries {
    series.advance(
        Stage::Detrended,
        series.t0,
        detrend_values(series.t0, &series.values),
    )
}

/// Step 5: average rank divided by the number of seconds, in `(0, 1]`.
pub fn percentile_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    stats::average_ranks(values)
        .into_iter()
        .map(|r| r / n)
        .collect()
}

pub fn rank(series: &SignalSeries) -> SignalSeries {
    series.advance(Stage::Rank, series.t0, percentile_ranks(&series.values))
}

/// Runs steps 1-5 on a raw count series given the raw active-learner
/// series of the same video.
pub fn preprocess(
    raw: &SignalSeries,
    active: &SignalSeries,
    duration: u32,
    config: &SignalConfig,
) -> Result<SignalSeries, SignalError> {
    raw.expect_stage(Stage::RawCounts)?;
    let trimmed = trim(raw, duration, config.trim_seconds)?;
    let active = trim(active, duration, config.trim_seconds)?;
    let normalized = normalize(&trimmed, &active.values)?;
    let smoothed = smooth(&normalized, config.smoothing_window);
    let detrended = detrend(&smoothed);
    Ok(rank(&detrended))
}

fn check_k(k: u32) -> Result<(), SignalError> {
    if matches!(k, 5 | 10 | 20) {
        Ok(())
    } else {
        Err(SignalError::UnsupportedK(k))
    }
}

/// Binary top-K% labels over the full-resolution rank series.
///
/// A second is positive when its percentile on the `[0, 1]` scale
/// `(rank - 1) / (n - 1)` is at least `1 - K/100`. The comparison is done
/// in exact integer arithmetic on doubled ranks, so for distinct values
/// exactly `n*K/100` seconds are positive whenever that is an integer.
pub fn label_top_k(series: &SignalSeries, k_percent: u32) -> Result<Vec<u8>, SignalError> {
    series.expect_stage(Stage::Rank)?;
    check_k(k_percent)?;
    let n = series.values.len() as i64;
    if n < 2 {
        return Ok(vec![0; n as usize]);
    }
    let k = i64::from(k_percent);
    Ok(series
        .values
        .iter()
        .map(|&v| {
            // v = r / n with r a multiple of 1/2
            let twice_rank = (2.0 * v * n as f64).round() as i64;
            u8::from(100 * (twice_rank - 2) >= 2 * (n - 1) * (100 - k))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelKey {
    pub signal: Signal,
    pub k: u32,
}

impl fmt::Display for LabelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.signal, self.k)
    }
}

impl FromStr for LabelKey {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (sig, k) = s
            .split_once('@')
            .ok_or_else(|| SignalError::UnknownSignal(s.to_string()))?;
        let k: u32 = k
            .parse()
            .map_err(|_| SignalError::UnknownSignal(s.to_string()))?;
        check_k(k)?;
        Ok(LabelKey {
            signal: sig.parse()?,
            k,
        })
    }
}

/// A subsampled `(video, second)` prediction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub video_id: String,
    pub t: i64,
    pub labels: BTreeMap<LabelKey, u8>,
    pub embedding_row: Option<usize>,
    pub field: String,
    pub course_id: String,
}

impl Moment {
    pub fn label(&self, key: LabelKey) -> Option<u8> {
        self.labels.get(&key).copied()
    }
}

/// All rank series and full-resolution labels of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSignals {
    pub meta: VideoMeta,
    pub t0: i64,
    pub ranks: BTreeMap<Signal, Vec<f64>>,
    pub labels: BTreeMap<LabelKey, Vec<u8>>,
}

impl VideoSignals {
    pub fn rank_series(&self, signal: Signal) -> Option<SignalSeries> {
        self.ranks.get(&signal).map(|v| SignalSeries {
            video_id: self.meta.video_id.clone(),
            signal,
            stage: Stage::Rank,
            t0: self.t0,
            values: v.clone(),
            history: vec![Stage::Rank],
        })
    }

    pub fn rank_at(&self, signal: Signal, t: i64) -> Option<f64> {
        let i = usize::try_from(t - self.t0).ok()?;
        self.ranks.get(&signal)?.get(i).copied()
    }

    pub fn last_second(&self) -> i64 {
        self.t0 + self.ranks.values().next().map_or(0, Vec::len) as i64 - 1
    }
}

/// Builds rank series and labels for every signal and K.
pub fn process_video(
    meta: &VideoMeta,
    events: &[Event],
    ks: &[u32],
    config: &SignalConfig,
) -> Result<VideoSignals, SignalError> {
    let raw = raw_signals(&meta.video_id, events, meta.duration, config.trim_seconds)?;
    let active = raw.active_series();
    let mut ranks = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut t0 = i64::from(config.trim_seconds);
    for signal in Signal::ALL {
        let ranked = preprocess(&raw.series(signal), &active, meta.duration, config)?;
        t0 = ranked.t0;
        for &k in ks {
            labels.insert(LabelKey { signal, k }, label_top_k(&ranked, k)?);
        }
        ranks.insert(signal, ranked.values);
    }
    Ok(VideoSignals {
        meta: meta.clone(),
        t0,
        ranks,
        labels,
    })
}

/// Processes every video with events, in parallel, ordered by video id.
/// Videos that are too short are skipped and returned separately.
pub fn process_corpus(
    metas: &[VideoMeta],
    events: &BTreeMap<String, Vec<Event>>,
    ks: &[u32],
    config: &SignalConfig,
) -> (Vec<VideoSignals>, Vec<SignalError>) {
    let empty = Vec::new();
    let mut sorted: Vec<&VideoMeta> = metas.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let results: Vec<Result<VideoSignals, SignalError>> = sorted
        .par_iter()
        .map(|m| {
            let evs = events.get(&m.video_id).unwrap_or(&empty);
            process_video(m, evs, ks, config)
        })
        .collect();
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => skipped.push(e),
        }
    }
    (ok, skipped)
}

/// Moments at `trim, trim + interval, ... <= duration - trim`.
pub fn subsample_moments(video: &VideoSignals, interval: u32) -> Vec<Moment> {
    let last = video.last_second();
    (video.t0..=last)
        .step_by(interval.max(1) as usize)
        .map(|t| {
            let i = (t - video.t0) as usize;
            Moment {
                video_id: video.meta.video_id.clone(),
                t,
                labels: video
                    .labels
                    .iter()
                    .map(|(key, ys)| (*key, ys[i]))
                    .collect(),
                embedding_row: None,
                field: video.meta.field.clone(),
                course_id: video.meta.course_id.clone(),
            }
        })
        .collect()
}

/// Rounds to 9 significant digits so archived values are stable text.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveRecord {
    video_id: String,
    course_id: String,
    field: String,
    duration: u32,
    t0: i64,
    ranks: BTreeMap<Signal, Vec<f64>>,
    labels: BTreeMap<String, Vec<u8>>,
    #[serde(default)]
    meta: Option<VideoMeta>,
}

/// Writes the signal archive: one JSON line per video.
pub fn write_archive<W: Write>(videos: &[VideoSignals], mut out: W) -> io::Result<()> {
    for v in videos {
        let rec = ArchiveRecord {
            video_id: v.meta.video_id.clone(),
            course_id: v.meta.course_id.clone(),
            field: v.meta.field.clone(),
            duration: v.meta.duration,
            t0: v.t0,
            ranks: v
                .ranks
                .iter()
                .map(|(s, vals)| (*s, vals.iter().map(|&x| round_sig9(x)).collect()))
                .collect(),
            labels: v
                .labels
                .iter()
                .map(|(k, ys)| (k.to_string(), ys.clone()))
                .collect(),
            meta: Some(v.meta.clone()),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_archive<R: BufRead>(reader: R) -> Result<Vec<VideoSignals>, SignalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| SignalError::Archive {
            line: i + 1,
            message,
        };
        let rec: ArchiveRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let mut labels = BTreeMap::new();
        for (k, ys) in rec.labels {
            labels.insert(k.parse::<LabelKey>()?, ys);
        }
        let meta = rec.meta.unwrap_or_else(|| VideoMeta {
            video_id: rec.video_id.clone(),
            duration: rec.duration,
            content_checksum: String::from("unknown"),
            field: rec.field.clone(),
            course_id: rec.course_id.clone(),
            course_run_ids: Vec::new(),
            language: String::new(),
        });
        out.push(VideoSignals {
            meta,
            t0: rec.t0,
            ranks: rec.ranks,
            labels,
        });
    }
    Ok(out)
}
