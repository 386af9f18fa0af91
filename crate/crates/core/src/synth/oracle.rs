use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::ctml::Feature;
use crate::events::{Event, IngestReport};
use crate::signals::{reconstruct_playback, LabelKey, Signal, VideoSignals};
use crate::stats::pearson;

/// Pipeline artifacts to check against ground truth. Any of them may be
/// missing; the corresponding checks then fail by name.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOutputs<'a> {
    pub ingest: Option<&'a IngestReport>,
    pub canonical: Option<&'a BTreeMap<String, String>>,
    pub events_by_video: Option<&'a BTreeMap<String, Vec<Event>>>,
    pub videos: Option<&'a [VideoSignals]>,
    pub k: u32,
    /// Feature whose planted pause effect the labels should track.
    pub concept: Option<Feature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const MAX_INTERVAL_ERROR: f64 = 1.0;
pub const MIN_HOTSPOT_RECALL: f64 = 0.8;
pub const MIN_LABEL_CORRELATION: f64 = 0.3;

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn missing(name: &str, what: &str) -> Check {
    check(name, false, format!("missing {what}"))
}

/// Compares pipeline outputs with the planted truth.
pub fn oracle_metrics(truth: &GroundTruth, out: PipelineOutputs<'_>) -> ConformanceReport {
    let mut checks = Vec::new();

    checks.push(match out.ingest {
        None => missing("corruption_count", "ingest report"),
        Some(r) => {
            let want = truth.corruptions.len() as u64;
            check(
                "corruption_count",
                r.dropped() == want,
                format!("dropped {} rows, planted {want}", r.dropped()),
            )
        }
    });

    checks.push(match out.canonical {
        None => missing("duplicate_merge", "canonical id map"),
        Some(c) => {
            let merged = truth
                .duplicate_pairs
                .iter()
                .filter(|(a, b)| c.get(a).is_some() && c.get(a) == c.get(b))
                .count();
            check(
                "duplicate_merge",
                merged == truth.duplicate_pairs.len(),
                format!("{merged} of {} duplicate pairs merged", truth.duplicate_pairs.len()),
            )
        }
    });

    checks.push(match out.events_by_video {
        None => missing("interval_reconstruction", "per-video events"),
        Some(evs) => interval_check(truth, evs, out.canonical),
    });

    checks.push(match out.videos {
        None => missing("hotspot_recovery", "video signals"),
        Some(v) => hotspot_check(truth, v, out.k),
    });

    checks.push(match (out.videos, out.concept) {
        (None, _) => missing("label_concept_correlation", "video signals"),
        (_, None) => missing("label_concept_correlation", "concept"),
        (Some(v), Some(f)) => correlation_check(truth, v, out.k, f),
    });

    ConformanceReport { checks }
}

fn interval_check(
    truth: &GroundTruth,
    events: &BTreeMap<String, Vec<Event>>,
    canonical: Option<&BTreeMap<String, String>>,
) -> Check {
    let mut by_session: HashMap<(&str, &str), Vec<&Event>> = HashMap::new();
    for (video, evs) in events {
        for e in evs {
            by_session.entry((video.as_str(), e.user_id.as_str())).or_default().push(e);
        }
    }
    let durations: HashMap<&str, f64> = truth
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), f64::from(v.duration)))
        .collect();
    let mut worst = 0.0f64;
    let mut worst_session = String::new();
    for s in &truth.sessions {
        let video = canonical.and_then(|c| c.get(&s.video_id)).unwrap_or(&s.video_id);
        let duration = durations.get(video.as_str()).copied().unwrap_or(f64::INFINITY);
        let evs = by_session.get(&(video.as_str(), s.user_id.as_str())).cloned().unwrap_or_default();
        let got = reconstruct_playback(&evs, duration);
        let err = if got.len() == s.intervals.len() {
            got.iter()
                .zip(&s.intervals)
                .map(|(a, b)| (a.start - b.start).abs().max((a.end - b.end).abs()))
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        if err > worst {
            worst = err;
            worst_session = format!("{}/{}", s.video_id, s.user_id);
        }
    }
    check(
        "interval_reconstruction",
        worst <= MAX_INTERVAL_ERROR,
        format!(
            "{} sessions, worst endpoint error {worst:.3}s{}",
            truth.sessions.len(),
            if worst_session.is_empty() { String::new() } else { format!(" ({worst_session})") }
        ),
    )
}

fn hotspot_check(truth: &GroundTruth, videos: &[VideoSignals], k: u32) -> Check {
    if truth.hotspots.is_empty() {
        return check("hotspot_recovery", true, "no hotspots planted".into());
    }
    let key = LabelKey {
        signal: Signal::PausedAt,
        k,
    };
    let mut found = 0;
    for h in &truth.hotspots {
        let id = &truth.videos[h.video].video_id;
        let Some(v) = videos.iter().find(|v| &v.meta.video_id == id) else {
            continue;
        };
        let Some(labels) = v.labels.get(&key) else {
            continue;
        };
        let hit = (h.start..h.start + h.width).any(|t| {
            usize::try_from(i64::from(t) - v.t0)
                .ok()
                .and_then(|i| labels.get(i))
                .is_some_and(|&y| y == 1)
        });
        found += usize::from(hit);
    }
    let recall = found as f64 / truth.hotspots.len() as f64;
    check(
        "hotspot_recovery",
        recall >= MIN_HOTSPOT_RECALL,
        format!("{found} of {} hotspots labeled at {key}", truth.hotspots.len()),
    )
}

fn correlation_check(truth: &GroundTruth, videos: &[VideoSignals], k: u32, feature: Feature) -> Check {
    let key = LabelKey {
        signal: Signal::PausedAt,
        k,
    };
    let tracks: HashMap<&str, &super::Track> =
        truth.videos.iter().map(|v| (v.video_id.as_str(), &v.tracks)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for v in videos {
        let (Some(track), Some(labels)) = (tracks.get(v.meta.video_id.as_str()), v.labels.get(&key)) else {
            continue;
        };
        for (i, &y) in labels.iter().enumerate() {
            let t = v.t0 as usize + i;
            if let Some(vals) = track.get(t) {
                xs.push(f64::from(vals[feature.index()]));
                ys.push(f64::from(y));
            }
        }
    }
    if xs.is_empty() {
        return missing("label_concept_correlation", "labeled seconds");
    }
    let r = pearson(&xs, &ys);
    check(
        "label_concept_correlation",
        r >= MIN_LABEL_CORRELATION,
        format!("point-biserial r({}, {key}) = {r:.3} over {} seconds", feature.key(), xs.len()),
    )
}
