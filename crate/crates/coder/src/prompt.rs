//! Coding requests and the deterministic chat payload built from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vidpeak_core::ctml::{Feature, Modality, Scale};

use crate::CoderError;

/// A frame as an externally hosted image or an inline base64 payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FrameImage {
    Url { url: String },
    Base64 { media_type: String, data: String },
}

impl FrameImage {
    fn as_url(&self) -> String {
        match self {
            FrameImage::Url { url } => url.clone(),
            FrameImage::Base64 { media_type, data } => format!("data:{media_type};base64,{data}"),
        }
    }
}

/// A frame at `offset` seconds from the moment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub offset: i64,
    pub image: FrameImage,
}

/// One moment to code, with its source payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingRequest {
    pub video_id: String,
    pub t: i64,
    /// Transcript over `[t-10, t+10]`.
    #[serde(default)]
    pub transcript: Option<String>,
    /// Slide text at `t`.
    #[serde(default)]
    pub slide_text: Option<String>,
    /// Frames sampled at one per second over `[t-10, t+10]`.
    #[serde(default)]
    pub frames: Vec<FrameRef>,
    /// Features to code; empty means the full rubric.
    #[serde(default)]
    pub features: Vec<Feature>,
}

impl CodingRequest {
    /// Requested features in rubric order without repeats.
    pub fn requested(&self) -> Vec<Feature> {
        if self.features.is_empty() {
            return Feature::ALL.to_vec();
        }
        let mut f = self.features.clone();
        f.sort();
        f.dedup();
        f
    }

    fn center_frame(&self) -> Option<&FrameRef> {
        self.frames.iter().find(|f| f.offset == 0)
    }

    fn window_frames(&self) -> Vec<&FrameRef> {
        let mut w: Vec<&FrameRef> = self.frames.iter().filter(|f| (-10..=10).contains(&f.offset)).collect();
        w.sort_by_key(|f| f.offset);
        w
    }

    fn has(&self, m: Modality) -> bool {
        match m {
            Modality::CenterFrame => self.center_frame().is_some(),
            Modality::FrameWindow => self.center_frame().is_some() && self.window_frames().len() >= 2,
            Modality::Transcript => self.transcript.as_deref().is_some_and(|s| !s.trim().is_empty()),
        }
    }
}

/// Sampling controls pinned on every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    /// Frames sent when a window is needed, spread evenly over the window
    /// and always including the center frame.
    pub frame_count: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            model: "gpt-5".into(),
            temperature: 0.0,
            seed: Some(0),
            frame_count: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: &str, text: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseFormat {
    #[serde(rename = "type")]
    pub kind: String,
}

/// Chat-completion request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatPayload {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub response_format: ResponseFormat,
}

fn scale_text(f: Feature) -> String {
    match f.scale() {
        Scale::Binary => "0 (absent) or 1 (present)".into(),
        Scale::Ordinal { min, max } => format!("an integer from {min} (lowest) to {max} (highest)"),
    }
}

/// System instructions for a feature list.
pub fn instructions(features: &[Feature]) -> String {
    let mut s = String::from(
        "You code moments of educational lecture videos against a multimedia-learning rubric.\n\
         Rate the central five seconds of the moment, using the surrounding context only to interpret it.\n\n\
         Features:\n",
    );
    for f in features {
        s.push_str(&format!(
            "- \"{}\" ({}): {} Value: {}.\n",
            f.key(),
            f.title(),
            f.description(),
            scale_text(*f)
        ));
    }
    let keys: Vec<String> = features.iter().map(|f| format!("\"{}\"", f.key())).collect();
    s.push_str(&format!(
        "\nRespond with a single JSON object and nothing else. It must have exactly the keys {} \
         and an integer value for each.",
        keys.join(", ")
    ));
    s
}

fn spread(frames: &[&FrameRef], n: usize) -> Vec<usize> {
    if n >= frames.len() {
        return (0..frames.len()).collect();
    }
    let center = frames.iter().position(|f| f.offset == 0).expect("center frame checked");
    let mut picked: Vec<usize> = if n <= 1 {
        vec![center]
    } else {
        (0..n).map(|i| i * (frames.len() - 1) / (n - 1)).collect()
    };
    if !picked.contains(&center) {
        let nearest = picked
            .iter()
            .enumerate()
            .min_by_key(|(_, &p)| p.abs_diff(center))
            .map(|(i, _)| i)
            .expect("non-empty");
        picked[nearest] = center;
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Builds the chat payload for a request. A pure function of its inputs.
pub fn build_prompt(request: &CodingRequest, options: &PromptOptions) -> Result<ChatPayload, CoderError> {
    let features = request.requested();
    let mut needed: BTreeMap<Modality, Feature> = BTreeMap::new();
    for &f in &features {
        for &m in f.modalities() {
            if !request.has(m) {
                return Err(CoderError::IncompletePayload(f.key().to_string()));
            }
            needed.entry(m).or_insert(f);
        }
    }
    let mut content = vec![ContentPart::Text {
        text: format!("Moment: video {} at t = {} s.", request.video_id, request.t),
    }];
    if needed.contains_key(&Modality::Transcript) || needed.is_empty() {
        if let Some(tr) = request.transcript.as_deref().filter(|s| !s.trim().is_empty()) {
            content.push(ContentPart::Text {
                text: format!("Transcript from t-10 s to t+10 s:\n{tr}"),
            });
        }
    }
    if let Some(slide) = request.slide_text.as_deref().filter(|s| !s.trim().is_empty()) {
        content.push(ContentPart::Text {
            text: format!("Slide text at t:\n{slide}"),
        });
    }
    let frames: Vec<&FrameRef> = if needed.contains_key(&Modality::FrameWindow) {
        let window = request.window_frames();
        spread(&window, options.frame_count.max(1)).into_iter().map(|i| window[i]).collect()
    } else if needed.contains_key(&Modality::CenterFrame) {
        request.center_frame().into_iter().collect()
    } else {
        Vec::new()
    };
    for f in frames {
        content.push(ContentPart::Text {
            text: format!("Frame at t{:+} s:", f.offset),
        });
        content.push(ContentPart::ImageUrl {
            image_url: ImageUrl { url: f.image.as_url() },
        });
    }
    Ok(ChatPayload {
        model: options.model.clone(),
        messages: vec![
            ChatMessage::text("system", instructions(&features)),
            ChatMessage {
                role: "user".into(),
                content,
            },
        ],
        temperature: options.temperature,
        seed: options.seed,
        response_format: ResponseFormat {
            kind: "json_object".into(),
        },
    })
}

/// Parses a reply that must be exactly one JSON object with one integer
/// per requested feature, each within its scale.
pub fn parse_reply(text: &str, features: &[Feature]) -> Result<BTreeMap<Feature, u8>, String> {
    let value: serde_json::Value =
        serde_json::from_str(text.trim()).map_err(|e| format!("the reply is not a single JSON object ({e})"))?;
    let obj = value.as_object().ok_or("the reply is JSON but not an object")?;
    let mut problems = Vec::new();
    for k in obj.keys() {
        if !features.iter().any(|f| f.key() == k) {
            problems.push(format!("unexpected key \"{k}\""));
        }
    }
    let mut out = BTreeMap::new();
    for &f in features {
        match obj.get(f.key()) {
            None => problems.push(format!("missing key \"{}\"", f.key())),
            Some(v) => match v.as_i64() {
                Some(n) if f.contains(n) => {
                    out.insert(f, n as u8);
                }
                Some(n) => problems.push(format!("\"{}\" = {n} is outside {}", f.key(), scale_text(f))),
                None => problems.push(format!("\"{}\" must be an integer, got {v}", f.key())),
            },
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(problems.join("; "))
    }
}

/// Follow-up sent after an invalid reply.
pub fn correction_message(problem: &str) -> String {
    format!(
        "Your previous reply could not be accepted: {problem}. \
         Reply again with only the JSON object, using exactly the requested keys and valid integer values."
    )
}
