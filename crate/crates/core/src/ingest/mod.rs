//! Conversation-thread ingestion: PHEME directory parsing, a JSONL thread
//! format, text cleaning, the suitability filter, and feature sidecars.
//!
//! All parsing produces threads in a canonical post order (source first, then
//! depth-first by reply structure, ties by timestamp then id), so re-parsing
//! the same input yields byte-identical serialized threads.

mod pheme;
mod thread;

pub use pheme::{parse_pheme_dir, LabelMapping};
pub use thread::{EmbeddedThread, Post, RawPost, VeracityLabel};

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::BufRead;

use once_cell_regex::regexes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current on-disk format version for JSONL threads and sidecar files.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate thread id '{0}'")]
    DuplicateThread(String),
    #[error("thread '{thread}': {message}")]
    Thread { thread: String, message: String },
    #[error("sidecar missing vectors for posts: {0}")]
    MissingSidecar(String),
    #[error("sidecar vectors are ragged: {0}")]
    RaggedSidecar(String),
    #[error("{0}")]
    Format(String),
}

/// Non-fatal events recorded while parsing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct IngestWarning {
    pub thread_id: String,
    pub message: String,
}

/// Parsed threads plus the warnings recorded along the way.
#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub threads: Vec<EmbeddedThread>,
    pub warnings: Vec<IngestWarning>,
}

mod once_cell_regex {
    use regex::Regex;
    use std::sync::OnceLock;

    pub struct Regexes {
        pub url: &'static Regex,
        pub mention: &'static Regex,
        pub url_token: &'static Regex,
        pub spaces: &'static Regex,
    }

    pub fn regexes() -> Regexes {
        static URL: OnceLock<Regex> = OnceLock::new();
        static MENTION: OnceLock<Regex> = OnceLock::new();
        static URL_TOKEN: OnceLock<Regex> = OnceLock::new();
        static SPACES: OnceLock<Regex> = OnceLock::new();
        Regexes {
            url: URL.get_or_init(|| Regex::new(r"https?://\S+").unwrap()),
            mention: MENTION.get_or_init(|| Regex::new(r"@\w+").unwrap()),
            // The literal placeholder token "URL" appears in PHEME-era text.
            url_token: URL_TOKEN.get_or_init(|| Regex::new(r"\bURL\b").unwrap()),
            spaces: SPACES.get_or_init(|| Regex::new(r"\s+").unwrap()),
        }
    }
}

/// Strip URLs (scheme-prefixed tokens and the bare "URL" placeholder) and
/// @-mentions, collapse whitespace, and trim. Total and idempotent.
pub fn clean_text(text: &str) -> String {
    let re = regexes();
    let no_urls = re.url.replace_all(text, " ");
    let no_token = re.url_token.replace_all(&no_urls, " ");
    let no_mentions = re.mention.replace_all(&no_token, " ");
    re.spaces.replace_all(&no_mentions, " ").trim().to_string()
}

/// A thread is suitable when it has at least ten posts and strictly more than
/// half of them have non-empty cleaned text.
pub fn is_suitable(thread: &EmbeddedThread) -> bool {
    let l = thread.posts.len();
    if l < 10 {
        return false;
    }
    let non_empty = thread
        .posts
        .iter()
        .filter(|p| !p.clean_text.is_empty())
        .count();
    non_empty * 2 > l
}

/// One line of the JSONL thread format.
#[derive(Debug, Serialize, Deserialize)]
struct JsonlThread {
    format_version: u32,
    thread_id: String,
    event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<VeracityLabel>,
    posts: Vec<RawPost>,
}

/// Parse threads from the JSONL format: one JSON object per line with fields
/// `format_version`, `thread_id`, `event`, optional `label`, and `posts[]`.
pub fn parse_jsonl(reader: impl BufRead) -> Result<ParseOutcome, IngestError> {
    let mut outcome = ParseOutcome::default();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlThread = serde_json::from_str(&line).map_err(|e| IngestError::Line {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.format_version != FORMAT_VERSION {
            return Err(IngestError::Line {
                line: line_no,
                message: format!(
                    "unsupported format_version {} (expected {FORMAT_VERSION})",
                    parsed.format_version
                ),
            });
        }
        if !seen.insert(parsed.thread_id.clone()) {
            return Err(IngestError::DuplicateThread(parsed.thread_id));
        }
        let (thread, mut warnings) =
            EmbeddedThread::from_raw_posts(parsed.thread_id, parsed.event, parsed.label, parsed.posts)
                .map_err(|message| IngestError::Line {
                    line: line_no,
                    message,
                })?;
        outcome.threads.push(thread);
        outcome.warnings.append(&mut warnings);
    }
    Ok(outcome)
}

/// Serialize threads to the JSONL format, one per line, in input order.
pub fn write_jsonl(threads: &[EmbeddedThread], mut writer: impl std::io::Write) -> Result<(), IngestError> {
    for thread in threads {
        let line = JsonlThread {
            format_version: FORMAT_VERSION,
            thread_id: thread.thread_id.clone(),
            event: thread.event.clone(),
            label: thread.gold_label,
            posts: thread.to_raw_posts(),
        };
        serde_json::to_writer(&mut writer, &line).map_err(|e| IngestError::Format(e.to_string()))?;
        writeln!(writer)?;
    }
    Ok(())
}

/// Round-trip a full thread (including features) through JSON; used by the
/// thread store so ingest output can feed later stages unchanged.
pub fn write_store(threads: &[EmbeddedThread], mut writer: impl std::io::Write) -> Result<(), IngestError> {
    for thread in threads {
        serde_json::to_writer(&mut writer, thread).map_err(|e| IngestError::Format(e.to_string()))?;
        writeln!(writer)?;
    }
    Ok(())
}

pub fn read_store(reader: impl BufRead) -> Result<Vec<EmbeddedThread>, IngestError> {
    let mut threads = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let thread: EmbeddedThread = serde_json::from_str(&line).map_err(|e| IngestError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        threads.push(thread);
    }
    Ok(threads)
}

/// JSON sidecar: `post_id -> vector` plus a format version.
#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl Sidecar {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            vectors,
        }
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self, IngestError> {
        let sidecar: Sidecar =
            serde_json::from_reader(reader).map_err(|e| IngestError::Format(e.to_string()))?;
        if sidecar.format_version != FORMAT_VERSION {
            return Err(IngestError::Format(format!(
                "unsupported sidecar format_version {}",
                sidecar.format_version
            )));
        }
        Ok(sidecar)
    }
}

/// Populate the embedding and stance matrices of a thread from sidecars, in
/// canonical post order. Every post id must be covered and vector lengths
/// must be uniform within each sidecar.
pub fn attach_features(
    mut thread: EmbeddedThread,
    embedding_sidecar: &BTreeMap<String, Vec<f64>>,
    stance_sidecar: &BTreeMap<String, Vec<f64>>,
) -> Result<EmbeddedThread, IngestError> {
    thread.embeddings = gather_matrix(&thread, embedding_sidecar, "embedding")?;
    thread.stance = gather_matrix(&thread, stance_sidecar, "stance")?;
    Ok(thread)
}

fn gather_matrix(
    thread: &EmbeddedThread,
    sidecar: &BTreeMap<String, Vec<f64>>,
    what: &str,
) -> Result<Vec<Vec<f64>>, IngestError> {
    let missing: Vec<&str> = thread
        .posts
        .iter()
        .filter(|p| !sidecar.contains_key(&p.id))
        .map(|p| p.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingSidecar(format!(
            "{what}: {}",
            missing.join(", ")
        )));
    }
    let mut matrix = Vec::with_capacity(thread.posts.len());
    let mut dim = None;
    for post in &thread.posts {
        let vec = &sidecar[&post.id];
        if !vec.iter().all(|v| v.is_finite()) {
            return Err(IngestError::Format(format!(
                "{what} vector for post '{}' contains non-finite values",
                post.id
            )));
        }
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(IngestError::RaggedSidecar(format!(
                    "{what}: post '{}' has dimension {}, expected {d}",
                    post.id,
                    vec.len()
                )));
            }
            _ => {}
        }
        matrix.push(vec.clone());
    }
    Ok(matrix)
}
