//! Outline text, LLM prompt construction, rule-based captions and an HTTP
//! captioning client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tagging::{check_coverage, AxisState, TagSegment, Vocab};

pub const PROMPT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");

const NUM_FRAME_SLOT: &str = "{CURRENT_NUM_FRAME}";
const DESCRIPTION_SLOT: &str = "{CURRENT_CAMERA_DESCRIPTION}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outline {
    pub total_frames: usize,
    pub camera_lines: Vec<String>,
    pub character_lines: Vec<String>,
}

impl Outline {
    pub fn camera_text(&self) -> String {
        self.camera_lines.join(", ")
    }

    pub fn character_text(&self) -> String {
        self.character_lines.join(", ")
    }
}

/// Formats segments as "Between frames A and B: label". An empty character
/// list is filled with a single static segment.
pub fn build_outline(cam_segs: &[TagSegment], char_segs: &[TagSegment], n: usize) -> Result<Outline> {
    if n == 0 {
        return Err(Error::MalformedSegments("zero frames".into()));
    }
    check_coverage(cam_segs, n)?;
    let static_fill = [TagSegment::new(0, n - 1, "static")];
    let char_segs = if char_segs.is_empty() { &static_fill[..] } else { char_segs };
    check_coverage(char_segs, n)?;
    Ok(Outline {
        // the header number is the last frame index
        total_frames: n - 1,
        camera_lines: cam_segs.iter().map(|s| s.to_string()).collect(),
        character_lines: char_segs.iter().map(|s| s.to_string()).collect(),
    })
}

/// Parses a comma-joined outline line back into segments.
pub fn parse_outline_line(text: &str) -> Result<Vec<TagSegment>> {
    let bad = || Error::MalformedSegments(format!("cannot parse outline '{text}'"));
    let body = text.strip_prefix("Between frames ").ok_or_else(bad)?;
    body.split(", Between frames ")
        .map(|part| {
            let (range, label) = part.split_once(": ").ok_or_else(bad)?;
            let (a, b) = range.split_once(" and ").ok_or_else(bad)?;
            Ok(TagSegment::new(
                a.parse().map_err(|_| bad())?,
                b.parse().map_err(|_| bad())?,
                label,
            ))
        })
        .collect()
}

/// Instantiates the prompt template. The template names its character slot
/// with the camera placeholder; the second occurrence receives the character
/// outline.
pub fn build_llm_prompt(outline: &Outline) -> String {
    let filled = PROMPT_TEMPLATE.replacen(NUM_FRAME_SLOT, &outline.total_frames.to_string(), 1);
    let filled = filled.replacen(DESCRIPTION_SLOT, &outline.camera_text(), 1);
    filled.replacen(DESCRIPTION_SLOT, &outline.character_text(), 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaptionKind {
    #[serde(rename = "camera")]
    Camera,
    #[serde(rename = "camera-character")]
    CameraCharacter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub kind: CaptionKind,
}

/// Verb phrase for one direction term.
fn camera_verb(term: &str) -> &'static str {
    match term {
        "truck left" => "trucks left",
        "truck right" => "trucks right",
        "boom bottom" => "booms bottom",
        "boom top" => "booms top",
        "push-in" => "pushes in",
        "pull-out" => "pulls out",
        _ => "remains static",
    }
}

fn camera_phrase(state: AxisState) -> String {
    if state.is_static() {
        return "remains static".into();
    }
    let terms = Vocab::Camera.terms();
    state
        .0
        .iter()
        .enumerate()
        .filter(|(_, &s)| s != 0)
        .map(|(a, &s)| camera_verb(terms[a][(s > 0) as usize]))
        .collect::<Vec<_>>()
        .join(" and ")
}

fn character_phrase(state: AxisState) -> String {
    if state.is_static() {
        return "stays static".into();
    }
    let terms = Vocab::Character.terms();
    let dirs: Vec<_> = state
        .0
        .iter()
        .enumerate()
        .filter(|(_, &s)| s != 0)
        .map(|(a, &s)| terms[a][(s > 0) as usize].trim_start_matches("move "))
        .collect();
    format!("moves {}", dirs.join(" and "))
}

fn label_state(label: &str, vocab: Vocab) -> Result<AxisState> {
    AxisState::from_label(label, vocab)
        .ok_or_else(|| Error::MalformedSegments(format!("unknown label '{label}'")))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Phases where both camera and character labels are constant, in order.
fn joint_phases(cam: &[TagSegment], chr: &[TagSegment]) -> Result<Vec<(AxisState, AxisState)>> {
    let mut cuts: Vec<usize> = cam.iter().chain(chr).map(|s| s.start).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let find = |segs: &[TagSegment], f: usize, vocab| -> Result<AxisState> {
        let s = segs
            .iter()
            .find(|s| s.start <= f && f <= s.end)
            .ok_or_else(|| Error::MalformedSegments(format!("frame {f} not covered")))?;
        label_state(&s.label, vocab)
    };
    let mut out: Vec<(AxisState, AxisState)> = Vec::new();
    for f in cuts {
        let p = (find(cam, f, Vocab::Camera)?, find(chr, f, Vocab::Character)?);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Deterministic template caption. With no character segments the caption is
/// camera-only.
pub fn rule_based_caption(cam_segs: &[TagSegment], char_segs: &[TagSegment]) -> Result<Caption> {
    if cam_segs.is_empty() {
        return Err(Error::MalformedSegments("no camera segments".into()));
    }
    if char_segs.is_empty() {
        let mut states: Vec<AxisState> = Vec::new();
        for s in cam_segs {
            let st = label_state(&s.label, Vocab::Camera)?;
            if states.last() != Some(&st) {
                states.push(st);
            }
        }
        let phrases: Vec<_> = states.into_iter().map(camera_phrase).collect();
        return Ok(Caption {
            text: format!("The camera {}.", phrases.join(", then ")),
            kind: CaptionKind::Camera,
        });
    }
    let clauses: Vec<String> = joint_phases(cam_segs, char_segs)?
        .into_iter()
        .map(|(c, h)| {
            if c.is_static() && h.is_static() {
                "the camera remains static".to_string()
            } else {
                format!("while the character {}, the camera {}", character_phrase(h), camera_phrase(c))
            }
        })
        .collect();
    Ok(Caption {
        text: format!("{}.", capitalize(&clauses.join(", then "))),
        kind: CaptionKind::CameraCharacter,
    })
}

/// Camera states named by a rule-based caption, in order of appearance.
pub fn camera_states_from_caption(text: &str) -> Vec<AxisState> {
    let lower = text.to_lowercase();
    let body = lower.trim().trim_end_matches('.');
    let mut out: Vec<AxisState> = Vec::new();
    for clause in body.split(", then ") {
        let phrase = match clause.rfind("the camera ") {
            Some(i) => &clause[i + "the camera ".len()..],
            None => clause,
        };
        let mut st = [0i8; 3];
        let terms = Vocab::Camera.terms();
        for verb in phrase.split(" and ") {
            for (a, pair) in terms.iter().enumerate() {
                for (k, term) in pair.iter().enumerate() {
                    if camera_verb(term) == verb.trim() {
                        st[a] = if k == 1 { 1 } else { -1 };
                    }
                }
            }
        }
        let st = AxisState(st);
        if out.last() != Some(&st) {
            out.push(st);
        }
    }
    out
}

/// Camera labels named by a rule-based caption.
pub fn camera_labels_from_caption(text: &str) -> Vec<String> {
    camera_states_from_caption(text)
        .into_iter()
        .map(|s| s.label(Vocab::Camera))
        .collect()
}

/// Closed word list of the caption templates. Index 0 is padding, 1 unknown.
pub const WORDS: &[&str] = &[
    "<pad>", "<unk>", "the", "camera", "character", "while", "then", "and", "remains", "stays",
    "static", "trucks", "booms", "pushes", "pulls", "moves", "left", "right", "bottom", "top", "in",
    "out", "up", "down", "forward", "backward",
];

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Lowercase alphabetic words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            words: WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Tokenizer {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text)
            .iter()
            .map(|w| self.words.iter().position(|v| v == w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.words.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 of the newline-joined word list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.words.join("\n").as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmClient {
    pub endpoint: String,
    pub key: Option<String>,
    pub timeout: Duration,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl LlmClient {
    pub fn new(endpoint: impl Into<String>, key: Option<String>, timeout_secs: f64) -> Self {
        Self {
            endpoint: endpoint.into(),
            key,
            timeout: Duration::from_secs_f64(timeout_secs.max(0.001)),
            max_tokens: 128,
            temperature: 0.0,
        }
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let body = serde_json::json!({
            "prompt": prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        });
        let resp = req.send_json(body).map_err(|e| self.map_err(e))?;
        let value: serde_json::Value = resp.into_json().map_err(|e| {
            if is_timeout(&e) {
                Error::Timeout(self.timeout.as_secs_f64())
            } else {
                Error::Transport(format!("malformed response: {e}"))
            }
        })?;
        value
            .get("completion")
            .and_then(|c| c.as_str())
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::Transport("response has no string field 'completion'".into()))
    }

    fn map_err(&self, e: ureq::Error) -> Error {
        match e {
            ureq::Error::Status(code, _) => Error::Transport(format!("HTTP status {code}")),
            ureq::Error::Transport(t) => {
                let timed_out = std::error::Error::source(&t)
                    .and_then(|s| s.downcast_ref::<std::io::Error>())
                    .map(is_timeout)
                    .unwrap_or(false)
                    || t.to_string().contains("timed out");
                if timed_out {
                    Error::Timeout(self.timeout.as_secs_f64())
                } else {
                    Error::Transport(t.to_string())
                }
            }
        }
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
    )
}

pub fn llm_caption(endpoint: &str, key: Option<&str>, prompt: &str, timeout_secs: f64) -> Result<Caption> {
    let text = LlmClient::new(endpoint, key.map(str::to_string), timeout_secs).complete(prompt)?;
    if text.is_empty() {
        return Err(Error::Transport("empty completion".into()));
    }
    Ok(Caption {
        text,
        kind: CaptionKind::CameraCharacter,
    })
}
