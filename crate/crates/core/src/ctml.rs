//! The 15-feature multimedia-learning rubric: records, agreement and
//! associations with interaction signals.
//!
//! Feature order is fixed to the rubric order below and is the order of
//! every feature vector.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::{Signal, VideoSignals};
use crate::stats::{mean, welch_t};

#[derive(Debug, Error)]
pub enum CtmlError {
    #[error("record ({video_id}, {t}) is missing feature {feature}")]
    IncompleteRecord { video_id: String, t: i64, feature: String },
    #[error("record ({video_id}, {t}): {feature} = {value} is out of range")]
    OutOfRange { video_id: String, t: i64, feature: String, value: i64 },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record ({0}, {1}, {2:?})")]
    Duplicate(String, i64, Coder),
    #[error("record ({0}, {1}) does not match a signal moment")]
    Unjoined(String, i64),
    #[error("no overlapping moments between the two rating sets")]
    EmptyJoin,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
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
    Signaling,
    Interactivity,
    SemanticBreakpoint,
    Redundancy,
}

/// Source a rater needs to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// The frame at t.
    CenterFrame,
    /// Frames over [t-10, t+10].
    FrameWindow,
    /// Transcript over [t-10, t+10].
    Transcript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Binary,
    Ordinal { min: u8, max: u8 },
}

pub const N_FEATURES: usize = 15;

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Formula,
        Feature::Instructor,
        Feature::Screen,
        Feature::StructuredViz,
        Feature::TextObject,
        Feature::VisualComplexity,
        Feature::Annotating,
        Feature::AnimationVideo,
        Feature::Photo,
        Feature::Showing,
        Feature::VisualBreakpoint,
        Feature::Signaling,
        Feature::Interactivity,
        Feature::SemanticBreakpoint,
        Feature::Redundancy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            Feature::Formula => "formula",
            Feature::Instructor => "instructor",
            Feature::Screen => "screen",
            Feature::StructuredViz => "structured_viz",
            Feature::TextObject => "text_object",
            Feature::VisualComplexity => "visual_complexity",
            Feature::Annotating => "annotating",
            Feature::AnimationVideo => "animation_video",
            Feature::Photo => "photo",
            Feature::Showing => "showing",
            Feature::VisualBreakpoint => "visual_breakpoint",
            Feature::Signaling => "signaling",
            Feature::Interactivity => "interactivity",
            Feature::SemanticBreakpoint => "semantic_breakpoint",
            Feature::Redundancy => "redundancy",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Feature::Formula => "Formula",
            Feature::Instructor => "Instructor",
            Feature::Screen => "Screen",
            Feature::StructuredViz => "Structured Information Visualization",
            Feature::TextObject => "Text Object",
            Feature::VisualComplexity => "Visual Complexity",
            Feature::Annotating => "Annotating",
            Feature::AnimationVideo => "Animation / Video",
            Feature::Photo => "Photo",
            Feature::Showing => "Showing",
            Feature::VisualBreakpoint => "Visual Breakpoint",
            Feature::Signaling => "Signaling",
            Feature::Interactivity => "Interactivity",
            Feature::SemanticBreakpoint => "Semantic Breakpoint",
            Feature::Redundancy => "Redundancy",
        }
    }

    /// The rubric description, verbatim.
    pub fn description(self) -> &'static str {
        match self {
            Feature::Formula => "Math notation beyond single symbols is visible.",
            Feature::Instructor => "Instructor's head is visible in the video.",
            Feature::Screen => "The user interface of a computer screen is embedded inside the image (e.g., a code editor).",
            Feature::StructuredViz => "A diagram, graph, schematic drawing, or table is on the slide (no formulas, no GUI).",
            Feature::TextObject => "A printed or handwritten sentence, derivation, or bullet point is visible (no labels, titles, footers, text in screenshots or code editors, references).",
            Feature::VisualComplexity => "The amount, complexity, and diversity of textual and graphical content objects visible. Ignore instructors and typical slide elements like logos or titles as elements.",
            Feature::Annotating => "In the frame progression, something new is being written by hand on the slide or typed letter by letter inside an editor (no pens moving without writing).",
            Feature::AnimationVideo => "Embedded videos or built-in animations (e.g., objects, figures, or video footage). Frames showing only lecturer movement, keyboards, hands, pointers, showing or typing or writing new text, or slide transitions do not meet this requirement.",
            Feature::Photo => "The second frame shows or includes a static real-world photograph, e.g., nature, people, objects, scenery (no instructor, hands, keyboard, or pointer, scans of handwritings).",
            Feature::Showing => "The lecturer's hand or pen appears on the slide (no writing or speaking hand gestures).",
            Feature::VisualBreakpoint => "Clear slide transitions or cuts in videos and animations. No additions to the current slide, focus on disappearing content.",
            Feature::Signaling => "(Subtle) hints of the importance of information (\"main\", \"important\", \"interesting\", \"key\", \"noteworthy\", etc.).",
            Feature::Interactivity => "Questions or prompts to the audience and other suggestions to active learning (such as reflections, lookups, or exercises).",
            Feature::SemanticBreakpoint => "The video could be clearly cut at one point where the speaker starts a new point, an example, a summary, an enumeration, a side note.",
            Feature::Redundancy => "Correspondence between the spoken and visible slide content.",
        }
    }

    pub fn scale(self) -> Scale {
        match self {
            Feature::VisualComplexity | Feature::Redundancy => Scale::Ordinal { min: 1, max: 5 },
            _ => Scale::Binary,
        }
    }

    pub fn is_ordinal(self) -> bool {
        matches!(self.scale(), Scale::Ordinal { .. })
    }

    pub fn modalities(self) -> &'static [Modality] {
        use Feature::*;
        match self {
            Formula | Instructor | Screen | StructuredViz | TextObject | VisualComplexity => &[Modality::CenterFrame],
            Annotating | AnimationVideo | Photo | Showing | VisualBreakpoint => &[Modality::FrameWindow],
            Signaling | Interactivity => &[Modality::Transcript],
            SemanticBreakpoint => &[Modality::Transcript, Modality::CenterFrame],
            Redundancy => &[Modality::Transcript, Modality::FrameWindow],
        }
    }

    /// Valid levels in ascending order.
    pub fn levels(self) -> Vec<u8> {
        match self.scale() {
            Scale::Binary => vec![0, 1],
            Scale::Ordinal { min, max } => (min..=max).collect(),
        }
    }

    pub fn contains(self, v: i64) -> bool {
        match self.scale() {
            Scale::Binary => v == 0 || v == 1,
            Scale::Ordinal { min, max } => (i64::from(min)..=i64::from(max)).contains(&v),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Feature {
    type Err = CtmlError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .into_iter()
            .find(|f| f.key() == s)
            .ok_or_else(|| CtmlError::UnknownFeature(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Coder {
    HumanA,
    HumanB,
    Adjudicated,
    Machine,
}

/// One coded moment. Values are indexed by [`Feature::index`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WireRecord", into = "WireRecord")]
pub struct CtmlRecord {
    pub video_id: String,
    pub t: i64,
    pub coder: Coder,
    pub values: [u8; N_FEATURES],
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    video_id: String,
    t: i64,
    coder: Coder,
    #[serde(flatten)]
    features: BTreeMap<String, i64>,
}

impl From<CtmlRecord> for WireRecord {
    fn from(r: CtmlRecord) -> Self {
        WireRecord {
            video_id: r.video_id,
            t: r.t,
            coder: r.coder,
            features: Feature::ALL
                .iter()
                .map(|f| (f.key().to_string(), i64::from(r.values[f.index()])))
                .collect(),
        }
    }
}

impl TryFrom<WireRecord> for CtmlRecord {
    type Error = CtmlError;
    fn try_from(w: WireRecord) -> Result<Self, Self::Error> {
        if let Some(k) = w.features.keys().find(|k| k.parse::<Feature>().is_err()) {
            return Err(CtmlError::UnknownFeature(k.clone()));
        }
        let mut values = [0u8; N_FEATURES];
        for f in Feature::ALL {
            let v = *w.features.get(f.key()).ok_or_else(|| CtmlError::IncompleteRecord {
                video_id: w.video_id.clone(),
                t: w.t,
                feature: f.key().into(),
            })?;
            if !f.contains(v) {
                return Err(CtmlError::OutOfRange {
                    video_id: w.video_id.clone(),
                    t: w.t,
                    feature: f.key().into(),
                    value: v,
                });
            }
            values[f.index()] = v as u8;
        }
        Ok(CtmlRecord {
            video_id: w.video_id,
            t: w.t,
            coder: w.coder,
            values,
        })
    }
}

impl CtmlRecord {
    pub fn get(&self, f: Feature) -> u8 {
        self.values[f.index()]
    }

    /// Builds a record from `(key, value)` pairs, checking completeness and
    /// ranges.
    pub fn from_pairs(
        video_id: &str,
        t: i64,
        coder: Coder,
        pairs: impl IntoIterator<Item = (String, i64)>,
    ) -> Result<Self, CtmlError> {
        CtmlRecord::try_from(WireRecord {
            video_id: video_id.into(),
            t,
            coder,
            features: pairs.into_iter().collect(),
        })
    }
}

/// Binary features as 0/1, ordinal features scaled by `(v - 1) / 4`.
pub fn features_to_vector(r: &CtmlRecord) -> Vec<f64> {
    Feature::ALL
        .iter()
        .map(|&f| {
            let v = f64::from(r.get(f));
            match f.scale() {
                Scale::Binary => v,
                Scale::Ordinal { min, max } => (v - f64::from(min)) / f64::from(max - min),
            }
        })
        .collect()
}

/// Inverse of [`features_to_vector`] on valid vectors.
pub fn vector_to_record(video_id: &str, t: i64, coder: Coder, v: &[f64]) -> Result<CtmlRecord, CtmlError> {
    assert_eq!(v.len(), N_FEATURES, "rubric vectors have 15 entries");
    let pairs = Feature::ALL.iter().map(|&f| {
        let x = v[f.index()];
        let level = match f.scale() {
            Scale::Binary => x.round(),
            Scale::Ordinal { min, max } => x * f64::from(max - min) + f64::from(min),
        };
        (f.key().to_string(), level.round() as i64)
    });
    CtmlRecord::from_pairs(video_id, t, coder, pairs)
}

fn category_index(values: &[u32], categories: &[u32]) -> Vec<usize> {
    values
        .iter()
        .map(|v| {
            categories
                .iter()
                .position(|c| c == v)
                .unwrap_or_else(|| panic!("rating {v} is not among the categories"))
        })
        .collect()
}

/// Cohen's kappa, `(p_o - p_e) / (1 - p_e)`, evaluated from integer counts
/// as `(n*agree - S) / (n^2 - S)` with `S` the sum of marginal products.
/// When both raters are constant on the same category the ratio is 0/0 and
/// 1 is returned.
pub fn cohen_kappa(a: &[u32], b: &[u32], categories: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "rating vectors differ in length");
    let weights = |i: usize, j: usize| i64::from(i != j);
    kappa_counts(a, b, categories, weights)
}

/// Quadratically weighted kappa over ordered `levels`,
/// `1 - sum(w O) / sum(w E)` with `w_ij = (i - j)^2`.
pub fn weighted_kappa(a: &[u32], b: &[u32], levels: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "rating vectors differ in length");
    let weights = |i: usize, j: usize| (i as i64 - j as i64).pow(2);
    kappa_counts(a, b, levels, weights)
}

fn kappa_counts(a: &[u32], b: &[u32], categories: &[u32], w: impl Fn(usize, usize) -> i64) -> f64 {
    let n = a.len() as i64;
    let ia = category_index(a, categories);
    let ib = category_index(b, categories);
    let c = categories.len();
    let mut ca = vec![0i64; c];
    let mut cb = vec![0i64; c];
    let mut observed = 0i64;
    for (&i, &j) in ia.iter().zip(&ib) {
        ca[i] += 1;
        cb[j] += 1;
        observed += w(i, j);
    }
    let mut expected = 0i64;
    for (i, &na) in ca.iter().enumerate() {
        for (j, &nb) in cb.iter().enumerate() {
            expected += w(i, j) * na * nb;
        }
    }
    if expected == 0 {
        return if ia == ib { 1.0 } else { 0.0 };
    }
    (expected - n * observed) as f64 / expected as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub feature: Feature,
    #[serde(with = "crate::stats::json_float")]
    pub kappa: f64,
    pub weighted: bool,
    pub n_items: usize,
}

/// Per-feature agreement between two rating sets joined on `(video_id, t)`;
/// the ordinal features use quadratic weights.
pub fn agreement(a: &[CtmlRecord], b: &[CtmlRecord]) -> Result<Vec<AgreementReport>, CtmlError> {
    let index: HashMap<(&str, i64), &CtmlRecord> = b.iter().map(|r| ((r.video_id.as_str(), r.t), r)).collect();
    let mut pairs: Vec<(&CtmlRecord, &CtmlRecord)> = a
        .iter()
        .filter_map(|r| index.get(&(r.video_id.as_str(), r.t)).map(|o| (r, *o)))
        .collect();
    if pairs.is_empty() {
        return Err(CtmlError::EmptyJoin);
    }
    pairs.sort_by(|x, y| (&x.0.video_id, x.0.t).cmp(&(&y.0.video_id, y.0.t)));
    Ok(Feature::ALL
        .iter()
        .map(|&f| {
            let ra: Vec<u32> = pairs.iter().map(|(x, _)| u32::from(x.get(f))).collect();
            let rb: Vec<u32> = pairs.iter().map(|(_, y)| u32::from(y.get(f))).collect();
            let levels: Vec<u32> = f.levels().into_iter().map(u32::from).collect();
            let (kappa, weighted) = if f.is_ordinal() {
                (weighted_kappa(&ra, &rb, &levels), true)
            } else {
                (cohen_kappa(&ra, &rb, &levels), false)
            };
            AgreementReport {
                feature: f,
                kappa,
                weighted,
                n_items: pairs.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMean {
    pub feature: Feature,
    pub signal: Signal,
    pub level: u8,
    pub n: usize,
    pub mean_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTest {
    pub feature: Feature,
    pub signal: Signal,
    /// Mean rank at level 1 minus mean rank at level 0.
    #[serde(with = "crate::stats::json_float")]
    pub effect: f64,
    #[serde(with = "crate::stats::json_float")]
    pub t_stat: f64,
    #[serde(with = "crate::stats::json_float")]
    pub df: f64,
    #[serde(with = "crate::stats::json_float")]
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationSummary {
    pub levels: Vec<LevelMean>,
    pub tests: Vec<LevelTest>,
}

pub const ASSOCIATION_ALPHA: f64 = 0.01;

/// Mean signal rank per feature level, with Welch tests between the two
/// levels of binary features.
pub fn association_summary(
    records: &[CtmlRecord],
    videos: &[VideoSignals],
    signals: &[Signal],
) -> Result<AssociationSummary, CtmlError> {
    let by_id: HashMap<&str, &VideoSignals> = videos.iter().map(|v| (v.meta.video_id.as_str(), v)).collect();
    let mut out = AssociationSummary::default();
    for &signal in signals {
        let mut ranks = Vec::with_capacity(records.len());
        for r in records {
            let rank = by_id
                .get(r.video_id.as_str())
                .and_then(|v| v.rank_at(signal, r.t))
                .ok_or_else(|| CtmlError::Unjoined(r.video_id.clone(), r.t))?;
            ranks.push(rank);
        }
        for f in Feature::ALL {
            let mut groups: BTreeMap<u8, Vec<f64>> = f.levels().into_iter().map(|l| (l, Vec::new())).collect();
            for (r, &rank) in records.iter().zip(&ranks) {
                groups.get_mut(&r.get(f)).expect("validated level").push(rank);
            }
            for (&level, xs) in &groups {
                out.levels.push(LevelMean {
                    feature: f,
                    signal,
                    level,
                    n: xs.len(),
                    mean_rank: (!xs.is_empty()).then(|| mean(xs)),
                });
            }
            if !f.is_ordinal() {
                if let Some(t) = welch_t(&groups[&1], &groups[&0]) {
                    out.tests.push(LevelTest {
                        feature: f,
                        signal,
                        effect: mean(&groups[&1]) - mean(&groups[&0]),
                        t_stat: t.t,
                        df: t.df,
                        p_value: t.p,
                        significant: t.p < ASSOCIATION_ALPHA,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<CtmlRecord>, CtmlError> {
    let mut out: Vec<CtmlRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CtmlRecord = serde_json::from_str(&line).map_err(|e| CtmlError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert((rec.video_id.clone(), rec.t, rec.coder)) {
            return Err(CtmlError::Duplicate(rec.video_id, rec.t, rec.coder));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(records: &[CtmlRecord], mut out: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
