//! Video-interaction event logs: parsing, validation, seek classification
//! and duplicate-video canonicalization.
//!
//! Logs are line-delimited JSON objects with the keys `user_id`,
//! `video_id`, `course_run_id`, `ts_ms`, `kind` (`play`, `pause`, `seek`,
//! `rate`), `pos`, plus `to_pos` for seeks and `rate` for rate changes.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventsError {
    #[error("cannot read event stream: {0}")]
    Io(#[from] io::Error),
    #[error("event is not a seek")]
    NotASeek,
    #[error("invalid video metadata for {video_id}: {reason}")]
    InvalidMeta { video_id: String, reason: String },
    #[error("metadata line {line}: {message}")]
    MetaParse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Play,
    Pause,
    SeekForward,
    SeekBackward,
    RateChange,
}

impl EventKind {
    pub fn is_seek(self) -> bool {
        matches!(self, EventKind::SeekForward | EventKind::SeekBackward)
    }

    fn wire_name(self) -> &'static str {
        match self {
            EventKind::Play => "play",
            EventKind::Pause => "pause",
            EventKind::SeekForward | EventKind::SeekBackward => "seek",
            EventKind::RateChange => "rate",
        }
    }
}

/// One logged video-control action.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub user_id: String,
    pub video_id: String,
    pub course_run_id: String,
    pub wall_time_ms: i64,
    pub kind: EventKind,
    /// Current position for play/pause/rate, origin for seeks.
    pub from_pos: f64,
    /// Destination, seeks only.
    pub to_pos: Option<f64>,
    /// New playback rate, rate changes only.
    pub rate: Option<f64>,
}

/// Metadata sidecar record for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    /// Whole seconds.
    pub duration: u32,
    pub content_checksum: String,
    pub field: String,
    pub course_id: String,
    #[serde(default)]
    pub course_run_ids: Vec<String>,
    #[serde(default)]
    pub language: String,
}

impl VideoMeta {
    pub fn validate(&self) -> Result<(), EventsError> {
        let reason = if self.duration == 0 {
            "duration must be positive"
        } else if self.content_checksum.is_empty() {
            "content checksum is empty"
        } else {
            return Ok(());
        };
        Err(EventsError::InvalidMeta {
            video_id: self.video_id.clone(),
            reason: reason.to_string(),
        })
    }
}

/// Rounds half-up to the integer second a position is attributed to.
pub fn round_half_up(pos: f64) -> i64 {
    (pos + 0.5).floor() as i64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaConfig {
    /// Known durations in seconds. When set, events on unknown videos are
    /// dropped and positions are checked against `duration + tolerance`.
    pub durations: Option<HashMap<String, u32>>,
    pub position_tolerance_ms: u32,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            durations: None,
            position_tolerance_ms: 1000,
        }
    }
}

impl SchemaConfig {
    pub fn with_metadata(metas: &[VideoMeta]) -> Self {
        Self {
            durations: Some(
                metas
                    .iter()
                    .map(|m| (m.video_id.clone(), m.duration))
                    .collect(),
            ),
            ..Self::default()
        }
    }
}

/// Row accounting for one ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: u64,
    pub accepted: u64,
    pub dropped_malformed: u64,
    pub dropped_zero_seek: u64,
    pub dropped_out_of_range: u64,
    pub dropped_unknown_video: u64,
    /// Accepted rate changes; parsed but never used by any signal.
    pub rate_changes: u64,
}

impl IngestReport {
    pub fn dropped(&self) -> u64 {
        self.dropped_malformed
            + self.dropped_zero_seek
            + self.dropped_out_of_range
            + self.dropped_unknown_video
    }

    fn merge(&mut self, other: &IngestReport) {
        self.lines += other.lines;
        self.accepted += other.accepted;
        self.dropped_malformed += other.dropped_malformed;
        self.dropped_zero_seek += other.dropped_zero_seek;
        self.dropped_out_of_range += other.dropped_out_of_range;
        self.dropped_unknown_video += other.dropped_unknown_video;
        self.rate_changes += other.rate_changes;
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WireEvent {
    user_id: String,
    video_id: String,
    course_run_id: String,
    ts_ms: i64,
    kind: String,
    pos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    to_pos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
}

enum LineOutcome {
    Accepted(Event),
    Malformed,
    ZeroSeek,
    OutOfRange,
    UnknownVideo,
}

fn parse_line(line: &[u8], schema: &SchemaConfig) -> LineOutcome {
    let Ok(w) = serde_json::from_slice::<WireEvent>(line) else {
        return LineOutcome::Malformed;
    };
    let finite_pos = |p: f64| p.is_finite() && p >= 0.0;
    if !finite_pos(w.pos) {
        return LineOutcome::Malformed;
    }
    let kind = match (w.kind.as_str(), w.to_pos, w.rate) {
        ("play", None, None) => EventKind::Play,
        ("pause", None, None) => EventKind::Pause,
        ("rate", None, Some(r)) if r.is_finite() && r > 0.0 => EventKind::RateChange,
        ("seek", Some(to), None) if finite_pos(to) => {
            if to > w.pos {
                EventKind::SeekForward
            } else if to < w.pos {
                EventKind::SeekBackward
            } else {
                return LineOutcome::ZeroSeek;
            }
        }
        _ => return LineOutcome::Malformed,
    };
    if let Some(durations) = &schema.durations {
        let Some(&d) = durations.get(&w.video_id) else {
            return LineOutcome::UnknownVideo;
        };
        let limit = f64::from(d) + f64::from(schema.position_tolerance_ms) / 1000.0;
        if w.pos > limit || w.to_pos.is_some_and(|t| t > limit) {
            return LineOutcome::OutOfRange;
        }
    }
    LineOutcome::Accepted(Event {
        user_id: w.user_id,
        video_id: w.video_id,
        course_run_id: w.course_run_id,
        wall_time_ms: w.ts_ms,
        kind,
        from_pos: w.pos,
        to_pos: w.to_pos,
        rate: w.rate,
    })
}

fn parse_lines<'a>(
    lines: impl Iterator<Item = &'a [u8]>,
    schema: &SchemaConfig,
) -> (Vec<Event>, IngestReport) {
    let mut events = Vec::new();
    let mut report = IngestReport::default();
    for raw in lines {
        let line = raw.strip_suffix(b"\r").unwrap_or(raw);
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        report.lines += 1;
        match parse_line(line, schema) {
            LineOutcome::Accepted(ev) => {
                report.accepted += 1;
                if ev.kind == EventKind::RateChange {
                    report.rate_changes += 1;
                }
                events.push(ev);
            }
            LineOutcome::Malformed => report.dropped_malformed += 1,
            LineOutcome::ZeroSeek => report.dropped_zero_seek += 1,
            LineOutcome::OutOfRange => report.dropped_out_of_range += 1,
            LineOutcome::UnknownVideo => report.dropped_unknown_video += 1,
        }
    }
    (events, report)
}

fn sort_events(events: &mut [Event]) {
    // Stable: simultaneous events of one user keep their input order.
    events.sort_by(|a, b| {
        a.user_id
            .cmp(&b.user_id)
            .then(a.wall_time_ms.cmp(&b.wall_time_ms))
    });
}

/// Parses a whole event log. Bad rows are dropped and counted; only an
/// unreadable stream is an error. Events come back sorted by
/// `(user_id, wall_time)`.
pub fn parse_event_log<R: BufRead>(
    mut reader: R,
    schema: &SchemaConfig,
) -> Result<(Vec<Event>, IngestReport), EventsError> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    Ok(parse_event_bytes(&buf, schema, 1))
}

/// Parses an in-memory log split into `shards` contiguous line ranges
/// processed in parallel. Output is identical for every shard count.
pub fn parse_event_bytes(
    bytes: &[u8],
    schema: &SchemaConfig,
    shards: usize,
) -> (Vec<Event>, IngestReport) {
    let ranges = shard_ranges(bytes, shards.max(1));
    let parts: Vec<(Vec<Event>, IngestReport)> = ranges
        .par_iter()
        .map(|&(a, b)| parse_lines(bytes[a..b].split(|&c| c == b'\n'), schema))
        .collect();
    let mut events = Vec::new();
    let mut report = IngestReport::default();
    for (evs, rep) in parts {
        events.extend(evs);
        report.merge(&rep);
    }
    sort_events(&mut events);
    (events, report)
}

fn shard_ranges(bytes: &[u8], shards: usize) -> Vec<(usize, usize)> {
    let mut ranges = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 1..=shards {
        if start >= bytes.len() {
            break;
        }
        let mut end = if s == shards {
            bytes.len()
        } else {
            (bytes.len() * s / shards).max(start)
        };
        while end < bytes.len() && bytes[end] != b'\n' {
            end += 1;
        }
        let end = (end + 1).min(bytes.len());
        ranges.push((start, end));
        start = end;
    }
    ranges
}

/// Writes events back in the log format.
pub fn write_event_log<W: Write>(events: &[Event], mut out: W) -> io::Result<()> {
    for ev in events {
        let w = WireEvent {
            user_id: ev.user_id.clone(),
            video_id: ev.video_id.clone(),
            course_run_id: ev.course_run_id.clone(),
            ts_ms: ev.wall_time_ms,
            kind: ev.kind.wire_name().to_string(),
            pos: ev.from_pos,
            to_pos: ev.to_pos,
            rate: ev.rate,
        };
        serde_json::to_writer(&mut out, &w)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_video_meta<R: BufRead>(reader: R) -> Result<Vec<VideoMeta>, EventsError> {
    let mut metas = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: VideoMeta =
            serde_json::from_str(&line).map_err(|e| EventsError::MetaParse {
                line: i + 1,
                message: e.to_string(),
            })?;
        meta.validate()?;
        metas.push(meta);
    }
    Ok(metas)
}

pub fn write_video_meta<W: Write>(metas: &[VideoMeta], mut out: W) -> io::Result<()> {
    for m in metas {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeekClass {
    /// Backward seek, attributed to its destination second.
    RewindToDestination(i64),
    /// Forward seek, attributed to its origin second.
    SkipFromOrigin(i64),
}

pub fn classify_seek(event: &Event) -> Result<SeekClass, EventsError> {
    match (event.kind, event.to_pos) {
        (EventKind::SeekBackward, Some(to)) => Ok(SeekClass::RewindToDestination(round_half_up(to))),
        (EventKind::SeekForward, Some(_)) => {
            Ok(SeekClass::SkipFromOrigin(round_half_up(event.from_pos)))
        }
        _ => Err(EventsError::NotASeek),
    }
}

/// Maps every video id to the lexicographically smallest id sharing its
/// `(duration, content_checksum)`.
pub fn dedupe_videos(metas: &[VideoMeta]) -> BTreeMap<String, String> {
    let mut groups: BTreeMap<(u32, &str), Vec<&str>> = BTreeMap::new();
    for m in metas {
        groups
            .entry((m.duration, m.content_checksum.as_str()))
            .or_default()
            .push(m.video_id.as_str());
    }
    let mut map = BTreeMap::new();
    for ids in groups.values() {
        let canonical = ids.iter().min().expect("non-empty group");
        for id in ids {
            map.insert((*id).to_string(), (*canonical).to_string());
        }
    }
    map
}

/// Canonical metadata records: one per canonical id, with the run ids of
/// all duplicates merged.
pub fn canonical_metas(metas: &[VideoMeta], canon: &BTreeMap<String, String>) -> Vec<VideoMeta> {
    let mut out: BTreeMap<String, VideoMeta> = BTreeMap::new();
    for m in metas {
        let cid = canon.get(&m.video_id).unwrap_or(&m.video_id);
        if cid == &m.video_id {
            out.entry(cid.clone())
                .and_modify(|e| e.course_run_ids.extend(m.course_run_ids.iter().cloned()))
                .or_insert_with(|| m.clone());
        } else {
            let runs = m.course_run_ids.clone();
            out.entry(cid.clone())
                .and_modify(|e| e.course_run_ids.extend(runs.iter().cloned()))
                .or_insert_with(|| VideoMeta {
                    video_id: cid.clone(),
                    ..m.clone()
                });
        }
    }
    let mut v: Vec<VideoMeta> = out.into_values().collect();
    for m in &mut v {
        m.course_run_ids.sort();
        m.course_run_ids.dedup();
    }
    v
}

/// Groups events per canonical video, rewriting duplicate ids. Each stream
/// stays sorted by `(user_id, wall_time)`.
pub fn group_by_video(
    events: Vec<Event>,
    canon: &BTreeMap<String, String>,
) -> BTreeMap<String, Vec<Event>> {
    let mut out: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for mut ev in events {
        if let Some(c) = canon.get(&ev.video_id) {
            if c != &ev.video_id {
                ev.video_id = c.clone();
            }
        }
        out.entry(ev.video_id.clone()).or_default().push(ev);
    }
    for evs in out.values_mut() {
        sort_events(evs);
    }
    out
}
