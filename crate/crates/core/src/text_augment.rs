//! Emotion-ranking text augmentation through a chat-completion endpoint.
//!
//! A transcript is sent to an LLM with a fixed instruction asking for the six
//! emotion labels ranked by likelihood; the parsed ranking is spliced in front
//! of the transcript as `ranking: l1,…,l6 | text: <transcript>`. A keyword
//! mock backend makes everything reproducible without network access.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{label_index, LABEL_NAMES, NUM_CLASSES};

/// Separator between the ranking prefix and the transcript.
pub const SEPARATOR: &str = " | text: ";
const RANKING_PREFIX: &str = "ranking: ";
/// Marker after which the (escaped) transcript appears in the prompt.
const TEXT_MARKER: &str = "\nText: ";

static NETWORK_REQUESTS: AtomicUsize = AtomicUsize::new(0);

/// HTTP requests attempted by any [`HttpBackend`] in this process.
pub fn network_requests() -> usize {
    NETWORK_REQUESTS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("text is empty")]
    EmptyText,
    #[error("label {label:?} appears twice in ranking line {line:?}")]
    DuplicateLabel { label: String, line: String },
    #[error("unknown label {token:?} in ranking line {line:?}")]
    UnknownLabel { token: String, line: String },
    #[error("ranking line {line:?} is missing labels {missing:?}")]
    MissingLabels { missing: Vec<String>, line: String },
    #[error("response contains no ranking line: {response:?}")]
    NoRanking { response: String },
    #[error("malformed augmented transcript: {0:?}")]
    MalformedTranscript(String),
    #[error("backend failed after {attempts} attempt(s) for text {text:?}: {message}")]
    Backend {
        attempts: usize,
        message: String,
        text: String,
    },
    #[error("could not parse the ranking for text {text:?}: {source}")]
    Response { text: String, source: Box<AugmentError> },
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// All six labels, most likely first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelRanking([usize; NUM_CLASSES]);

impl LabelRanking {
    pub fn new(order: [usize; NUM_CLASSES]) -> Option<Self> {
        let set: BTreeSet<usize> = order.iter().copied().collect();
        (set.len() == NUM_CLASSES && set.iter().all(|&c| c < NUM_CLASSES)).then_some(Self(order))
    }

    pub fn order(&self) -> [usize; NUM_CLASSES] {
        self.0
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.iter().map(|&c| LABEL_NAMES[c]).collect()
    }
}

impl std::fmt::Display for LabelRanking {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

impl Serialize for LabelRanking {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelRanking {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        parse_ranking_line(&names.join(",")).map_err(serde::de::Error::custom)
    }
}

/// Escapes `\` and `|` so the separator never occurs inside the transcript.
pub fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('|', "\\|")
}

pub fn unescape(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some(e @ ('\\' | '|')) => out.push(e),
                _ => return Err(AugmentError::MalformedTranscript(text.to_string())),
            }
        } else if c == '|' {
            return Err(AugmentError::MalformedTranscript(text.to_string()));
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

pub fn build_emotion_prompt(text: &str) -> Result<String> {
    if text.trim().is_empty() {
        return Err(AugmentError::EmptyText);
    }
    Ok(format!(
        "Please pay attention to the emotional information in the text below. \
         Rank the following six emotion labels from most likely to least likely \
         for the speaker: {labels}. \
         Answer with one line containing all six labels, comma-separated, most likely first, \
         and nothing else on that line.{TEXT_MARKER}{text}",
        labels = LABEL_NAMES.join(", "),
        text = escape(text),
    ))
}

fn parse_ranking_line(line: &str) -> Result<LabelRanking> {
    let body = line.trim();
    let body = body
        .strip_prefix(RANKING_PREFIX.trim_end())
        .map(str::trim_start)
        .unwrap_or(body);
    let body = body.trim_end_matches('.');
    let mut order = Vec::with_capacity(NUM_CLASSES);
    for token in body.split(',') {
        let t = token.trim().to_lowercase();
        let c = label_index(&t).ok_or_else(|| AugmentError::UnknownLabel {
            token: token.trim().to_string(),
            line: line.to_string(),
        })?;
        if order.contains(&c) {
            return Err(AugmentError::DuplicateLabel {
                label: LABEL_NAMES[c].to_string(),
                line: line.to_string(),
            });
        }
        order.push(c);
    }
    if order.len() != NUM_CLASSES {
        let missing = (0..NUM_CLASSES)
            .filter(|c| !order.contains(c))
            .map(|c| LABEL_NAMES[c].to_string())
            .collect();
        return Err(AugmentError::MissingLabels {
            missing,
            line: line.to_string(),
        });
    }
    Ok(LabelRanking(order.try_into().expect("six labels")))
}

/// The first comma-separated line that is a permutation of the six labels.
/// When no line qualifies, the error of the first comma-bearing line is returned.
pub fn parse_label_ranking(response: &str) -> Result<LabelRanking> {
    let mut first_error = None;
    for line in response.lines().filter(|l| l.contains(',')) {
        match parse_ranking_line(line) {
            Ok(r) => return Ok(r),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    Err(first_error.unwrap_or_else(|| AugmentError::NoRanking {
        response: response.to_string(),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedTranscript {
    pub text: String,
    pub ranking: LabelRanking,
}

impl AugmentedTranscript {
    pub fn render(&self) -> String {
        format!("{RANKING_PREFIX}{}{SEPARATOR}{}", self.ranking, escape(&self.text))
    }

    pub fn parse(rendered: &str) -> Result<Self> {
        let malformed = || AugmentError::MalformedTranscript(rendered.to_string());
        let rest = rendered.strip_prefix(RANKING_PREFIX).ok_or_else(malformed)?;
        let (ranking, text) = rest.split_once(SEPARATOR).ok_or_else(malformed)?;
        Ok(Self {
            ranking: parse_ranking_line(ranking)?,
            text: unescape(text)?,
        })
    }
}

/// Failure of one backend call; `transient` failures are retried.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendError {
    pub message: String,
    pub transient: bool,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError>;
}

/// Deterministic offline backend: keyword counts decide the ranking, a hash
/// of the text breaks ties.
#[derive(Debug, Default)]
pub struct MockBackend {
    calls: AtomicUsize,
}

const KEYWORDS: [(&str, usize); 24] = [
    ("fine", 0),
    ("okay", 0),
    ("normal", 0),
    ("usual", 0),
    ("angry", 1),
    ("furious", 1),
    ("hate", 1),
    ("annoyed", 1),
    ("happy", 2),
    ("glad", 2),
    ("great", 2),
    ("love", 2),
    ("sad", 3),
    ("cry", 3),
    ("lonely", 3),
    ("miss", 3),
    ("worried", 4),
    ("afraid", 4),
    ("anxious", 4),
    ("nervous", 4),
    ("wow", 5),
    ("surprised", 5),
    ("unexpected", 5),
    ("really?", 5),
];

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn rank(text: &str) -> LabelRanking {
        let lower = text.to_lowercase();
        let mut scores = [0usize; NUM_CLASSES];
        for word in lower.split_whitespace() {
            let word = word.trim_matches(|c: char| c.is_ascii_punctuation() && c != '?');
            for (kw, c) in KEYWORDS {
                if word == kw || word.trim_end_matches('?') == kw {
                    scores[c] += 1;
                }
            }
        }
        let digest = Sha256::digest(text.as_bytes());
        let mut order: [usize; NUM_CLASSES] = std::array::from_fn(|i| i);
        order.sort_by_key(|&c| (std::cmp::Reverse(scores[c]), digest[c]));
        LabelRanking(order)
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = prompt
            .rfind(TEXT_MARKER)
            .map(|i| &prompt[i + TEXT_MARKER.len()..])
            .ok_or_else(|| BackendError {
                message: "prompt has no text section".into(),
                transient: false,
            })?;
        Ok(format!("Here is the ranking:\n{}", Self::rank(text).names().join(", ")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    /// Full URL of the chat-completion endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "gpt-4".into(),
            api_key_env: "MERFUSE_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

/// Generic chat-completion client (`{model, messages, temperature: 0}`).
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    requests: Arc<AtomicUsize>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            api_key,
            agent,
            requests: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ChatBackend for HttpBackend {
    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        NETWORK_REQUESTS.fetch_add(1, Ordering::SeqCst);
        self.requests.fetch_add(1, Ordering::SeqCst);
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| BackendError {
            message: e.to_string(),
            transient: true,
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(BackendError {
                message: format!("HTTP status {status}"),
                transient: status == 429 || status >= 500,
            });
        }
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| BackendError {
            message: format!("invalid response body: {e}"),
            transient: false,
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError {
                message: "response has no choices".into(),
                transient: false,
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

pub fn augment_transcript(text: &str, backend: &dyn ChatBackend, retry: RetryPolicy) -> Result<AugmentedTranscript> {
    let prompt = build_emotion_prompt(text)?;
    let mut delay = retry.base_delay;
    let mut attempt = 0;
    let response = loop {
        attempt += 1;
        match backend.complete(&prompt) {
            Ok(r) => break r,
            Err(e) if e.transient && attempt < retry.attempts.max(1) => {
                std::thread::sleep(delay);
                delay *= 2;
            }
            Err(e) => {
                return Err(AugmentError::Backend {
                    attempts: attempt,
                    message: e.message,
                    text: text.to_string(),
                })
            }
        }
    };
    let ranking = parse_label_ranking(&response).map_err(|e| AugmentError::Response {
        text: text.to_string(),
        source: Box::new(e),
    })?;
    Ok(AugmentedTranscript {
        text: text.to_string(),
        ranking,
    })
}

/// Augments every text, at most `max_in_flight` concurrently; results keep input order.
pub fn augment_batch(
    texts: &[&str],
    backend: &dyn ChatBackend,
    retry: RetryPolicy,
    max_in_flight: usize,
) -> Vec<Result<AugmentedTranscript>> {
    let cap = max_in_flight.max(1);
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(cap) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|t| s.spawn(move || augment_transcript(t, backend, retry)))
                .collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("augment worker panicked")));
        });
    }
    out
}

/// One output line: `{"id", "ranking", "augmented"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub id: String,
    pub ranking: LabelRanking,
    pub augmented: String,
}

impl AugmentRecord {
    pub fn new(id: impl Into<String>, t: &AugmentedTranscript) -> Self {
        Self {
            id: id.into(),
            ranking: t.ranking,
            augmented: t.render(),
        }
    }
}

/// One input line: `{"id", "text"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRow {
    pub id: String,
    pub text: String,
}
