//! PHEME directory-layout parser.
//!
//! Expected layout, one thread per directory:
//!
//! ```text
//! <root>/<event>/<thread_id>/
//!     source-tweets/<post_id>.json    (exactly one; "source-tweet" also accepted)
//!     reactions/<post_id>.json        (zero or more)
//!     annotation.json                 (optional veracity annotation)
//! ```
//!
//! Post files are tweet-shaped JSON objects; the fields used are `id` /
//! `id_str`, `text`, `in_reply_to_status_id`, and `created_at` (Twitter
//! format) or `timestamp` (epoch seconds).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::thread::{EmbeddedThread, RawPost, VeracityLabel};
use super::{IngestError, IngestWarning, ParseOutcome};

/// How annotation files map to veracity labels.
///
/// The default covers the common PHEME veracity conventions: an explicit
/// `veracity`/`label` string wins; otherwise `true: 1` maps to true and
/// `misinformation: 1` maps to false; anything else is unverified. Individual
/// threads can be overridden by id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelMapping {
    #[serde(default)]
    pub overrides: BTreeMap<String, VeracityLabel>,
}

impl LabelMapping {
    pub fn map(&self, thread_id: &str, annotation: Option<&Value>) -> Option<VeracityLabel> {
        if let Some(label) = self.overrides.get(thread_id) {
            return Some(*label);
        }
        let annotation = annotation?;
        for key in ["veracity", "label"] {
            if let Some(s) = annotation.get(key).and_then(Value::as_str) {
                if let Ok(label) = s.parse() {
                    return Some(label);
                }
            }
        }
        if flag_set(annotation.get("true")) {
            return Some(VeracityLabel::True);
        }
        if flag_set(annotation.get("misinformation")) {
            return Some(VeracityLabel::False);
        }
        Some(VeracityLabel::Unverified)
    }
}

fn flag_set(value: Option<&Value>) -> bool {
    match value {
        Some(Value::Number(n)) => n.as_i64() == Some(1),
        Some(Value::String(s)) => s == "1" || s.eq_ignore_ascii_case("true"),
        Some(Value::Bool(b)) => *b,
        _ => false,
    }
}

/// Parse every thread under a PHEME-style directory tree. Threads with a
/// missing source post or unreadable JSON are skipped with a warning; an
/// empty directory yields an empty collection.
pub fn parse_pheme_dir(root: &Path, mapping: &LabelMapping) -> Result<ParseOutcome, IngestError> {
    let mut outcome = ParseOutcome::default();
    if !root.is_dir() {
        return Err(IngestError::Format(format!(
            "'{}' is not a directory",
            root.display()
        )));
    }
    for event_dir in sorted_dirs(root)? {
        let event = dir_name(&event_dir);
        for thread_dir in sorted_dirs(&event_dir)? {
            let thread_id = dir_name(&thread_dir);
            match parse_thread_dir(&thread_dir, &thread_id, &event, mapping) {
                Ok((thread, mut warnings)) => {
                    outcome.threads.push(thread);
                    outcome.warnings.append(&mut warnings);
                }
                Err(message) => outcome.warnings.push(IngestWarning {
                    thread_id: thread_id.clone(),
                    message: format!("thread skipped: {message}"),
                }),
            }
        }
    }
    Ok(outcome)
}

fn sorted_dirs(path: &Path) -> Result<Vec<std::path::PathBuf>, IngestError> {
    let mut dirs: Vec<_> = fs::read_dir(path)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_thread_dir(
    dir: &Path,
    thread_id: &str,
    event: &str,
    mapping: &LabelMapping,
) -> Result<(EmbeddedThread, Vec<IngestWarning>), String> {
    let source_dir = ["source-tweets", "source-tweet"]
        .iter()
        .map(|d| dir.join(d))
        .find(|p| p.is_dir())
        .ok_or("no source post directory")?;
    let mut source_posts = read_post_files(&source_dir)?;
    if source_posts.is_empty() {
        return Err("source post directory is empty".to_string());
    }
    if source_posts.len() > 1 {
        return Err(format!("{} source posts, expected one", source_posts.len()));
    }
    let mut source = source_posts.remove(0);
    source.parent_id = None;

    let mut posts = vec![source];
    let reactions_dir = dir.join("reactions");
    if reactions_dir.is_dir() {
        posts.extend(read_post_files(&reactions_dir)?);
    }

    let annotation = read_annotation(dir);
    let label = mapping.map(thread_id, annotation.as_ref());

    EmbeddedThread::from_raw_posts(thread_id.to_string(), event.to_string(), label, posts)
}

fn read_annotation(dir: &Path) -> Option<Value> {
    let path = dir.join("annotation.json");
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn read_post_files(dir: &Path) -> Result<Vec<RawPost>, String> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    files.sort();
    let mut posts = Vec::with_capacity(files.len());
    for file in files {
        let text = fs::read_to_string(&file)
            .map_err(|e| format!("cannot read '{}': {e}", file.display()))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| format!("bad JSON in '{}': {e}", file.display()))?;
        posts.push(tweet_to_raw_post(&value).ok_or_else(|| {
            format!("'{}' is not a recognizable post object", file.display())
        })?);
    }
    Ok(posts)
}

fn tweet_to_raw_post(value: &Value) -> Option<RawPost> {
    let id = field_as_id(value, "id_str").or_else(|| field_as_id(value, "id"))?;
    let text = value.get("text")?.as_str()?.to_string();
    let parent_id =
        field_as_id(value, "in_reply_to_status_id_str").or_else(|| field_as_id(value, "in_reply_to_status_id"));
    let timestamp = value
        .get("timestamp")
        .and_then(Value::as_i64)
        .or_else(|| parse_twitter_time(value.get("created_at")?.as_str()?));
    Some(RawPost {
        id,
        text,
        parent_id,
        timestamp,
    })
}

fn field_as_id(value: &Value, key: &str) -> Option<String> {
    match value.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_twitter_time(s: &str) -> Option<i64> {
    chrono::DateTime::parse_from_str(s, "%a %b %d %H:%M:%S %z %Y")
        .ok()
        .map(|dt| dt.timestamp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_tweet(dir: &Path, id: u64, text: &str, parent: Option<u64>, ts: i64) {
        fs::create_dir_all(dir).unwrap();
        let mut obj = serde_json::json!({
            "id": id,
            "text": text,
            "created_at": format!("Wed Oct 22 18:04:{:02} +0000 2014", ts),
        });
        if let Some(p) = parent {
            obj["in_reply_to_status_id"] = serde_json::json!(p);
        }
        fs::write(dir.join(format!("{id}.json")), obj.to_string()).unwrap();
    }

    fn build_thread(root: &Path, event: &str, thread: u64, annotation: Value) {
        let dir = root.join(event).join(thread.to_string());
        write_tweet(&dir.join("source-tweets"), thread, "source claim", None, 0);
        write_tweet(&dir.join("reactions"), thread + 1, "a reply", Some(thread), 1);
        write_tweet(&dir.join("reactions"), thread + 2, "another", Some(thread), 2);
        fs::write(dir.join("annotation.json"), annotation.to_string()).unwrap();
    }

    #[test]
    fn parses_events_and_threads() {
        let tmp = tempfile::tempdir().unwrap();
        for (event, base) in [("eventa", 100), ("eventb", 200)] {
            for t in 0..3u64 {
                build_thread(tmp.path(), event, base + t * 10, serde_json::json!({"true": 1}));
            }
        }
        let outcome = parse_pheme_dir(tmp.path(), &LabelMapping::default()).unwrap();
        assert_eq!(outcome.threads.len(), 6);
        let events: Vec<&str> = outcome.threads.iter().map(|t| t.event.as_str()).collect();
        assert_eq!(events.iter().filter(|e| **e == "eventa").count(), 3);
        assert!(outcome
            .threads
            .iter()
            .all(|t| t.gold_label == Some(VeracityLabel::True)));
    }

    #[test]
    fn empty_directory_is_empty_collection() {
        let tmp = tempfile::tempdir().unwrap();
        let outcome = parse_pheme_dir(tmp.path(), &LabelMapping::default()).unwrap();
        assert!(outcome.threads.is_empty());
        assert!(outcome.warnings.is_empty());
    }

    #[test]
    fn missing_source_skips_thread_with_warning() {
        let tmp = tempfile::tempdir().unwrap();
        build_thread(tmp.path(), "ev", 100, serde_json::json!({}));
        let broken = tmp.path().join("ev").join("999");
        write_tweet(&broken.join("reactions"), 1000, "orphan", Some(999), 1);
        fs::create_dir_all(broken.join("source-tweets")).unwrap();

        let outcome = parse_pheme_dir(tmp.path(), &LabelMapping::default()).unwrap();
        assert_eq!(outcome.threads.len(), 1);
        assert_eq!(outcome.warnings.len(), 1);
        assert!(outcome.warnings[0].message.contains("skipped"));
    }

    #[test]
    fn unreadable_json_skips_thread() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ev").join("5");
        fs::create_dir_all(dir.join("source-tweets")).unwrap();
        fs::write(dir.join("source-tweets").join("5.json"), "{not json").unwrap();
        let outcome = parse_pheme_dir(tmp.path(), &LabelMapping::default()).unwrap();
        assert!(outcome.threads.is_empty());
        assert_eq!(outcome.warnings.len(), 1);
    }

    #[test]
    fn reaction_with_missing_parent_reattaches() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ev").join("7");
        write_tweet(&dir.join("source-tweets"), 7, "claim", None, 0);
        write_tweet(&dir.join("reactions"), 8, "stray", Some(424242), 1);
        let outcome = parse_pheme_dir(tmp.path(), &LabelMapping::default()).unwrap();
        assert_eq!(outcome.threads.len(), 1);
        assert_eq!(outcome.warnings.len(), 1);
        assert_eq!(outcome.threads[0].posts[1].parent_id.as_deref(), Some("7"));
    }

    #[test]
    fn label_mapping_conventions() {
        let mapping = LabelMapping::default();
        let m = |v: Value| mapping.map("t", Some(&v));
        assert_eq!(m(serde_json::json!({"true": 1})), Some(VeracityLabel::True));
        assert_eq!(
            m(serde_json::json!({"misinformation": 1})),
            Some(VeracityLabel::False)
        );
        assert_eq!(
            m(serde_json::json!({"true": 0, "misinformation": 0})),
            Some(VeracityLabel::Unverified)
        );
        assert_eq!(
            m(serde_json::json!({"veracity": "false"})),
            Some(VeracityLabel::False)
        );
        let mut with_override = LabelMapping::default();
        with_override
            .overrides
            .insert("t".to_string(), VeracityLabel::True);
        assert_eq!(
            with_override.map("t", Some(&serde_json::json!({"misinformation": 1}))),
            Some(VeracityLabel::True)
        );
    }
}
