//! Thread and post types plus canonical ordering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{clean_text, IngestWarning};

/// The three-way veracity label. Order matters: prediction ties are broken
/// in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum VeracityLabel {
    True,
    False,
    Unverified,
}

impl VeracityLabel {
    pub const ALL: [VeracityLabel; 3] = [
        VeracityLabel::True,
        VeracityLabel::False,
        VeracityLabel::Unverified,
    ];

    /// Class index used for logits and confusion matrices.
    pub fn class_index(self) -> usize {
        match self {
            VeracityLabel::True => 0,
            VeracityLabel::False => 1,
            VeracityLabel::Unverified => 2,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VeracityLabel::True => "true",
            VeracityLabel::False => "false",
            VeracityLabel::Unverified => "unverified",
        }
    }
}

impl std::fmt::Display for VeracityLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VeracityLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" => Ok(VeracityLabel::True),
            "false" => Ok(VeracityLabel::False),
            "unverified" => Ok(VeracityLabel::Unverified),
            other => Err(format!("unknown veracity label '{other}'")),
        }
    }
}

/// A single post in a conversation thread.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Post {
    pub id: String,
    pub text: String,
    pub clean_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    pub is_source: bool,
}

/// Post as it appears in input files, before cleaning and ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPost {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

/// A conversation thread with cleaned posts in canonical order and, once
/// attached, per-post embedding and stance feature rows aligned with the
/// post order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddedThread {
    pub format_version: u32,
    pub thread_id: String,
    pub event: String,
    pub posts: Vec<Post>,
    /// `l x n` embedding matrix, one row per post; empty until attached.
    #[serde(default)]
    pub embeddings: Vec<Vec<f64>>,
    /// `l x s` stance-feature matrix, one row per post; empty until attached.
    #[serde(default)]
    pub stance: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<VeracityLabel>,
}

impl EmbeddedThread {
    /// Build a thread from raw posts: clean text, identify the source,
    /// reattach orphans to the source (recording a warning), and order posts
    /// canonically. Returns an error message when the thread is structurally
    /// unusable (no source, several sources, duplicate ids).
    pub fn from_raw_posts(
        thread_id: String,
        event: String,
        gold_label: Option<VeracityLabel>,
        raw: Vec<RawPost>,
    ) -> Result<(Self, Vec<IngestWarning>), String> {
        if raw.is_empty() {
            return Err("thread has no posts".to_string());
        }
        let mut ids = BTreeSet::new();
        for post in &raw {
            if !ids.insert(post.id.clone()) {
                return Err(format!("duplicate post id '{}'", post.id));
            }
        }
        let sources: Vec<&RawPost> = raw.iter().filter(|p| p.parent_id.is_none()).collect();
        if sources.is_empty() {
            return Err("thread has no source post (all posts have parents)".to_string());
        }
        if sources.len() > 1 {
            return Err(format!(
                "thread has {} posts without a parent; expected exactly one source",
                sources.len()
            ));
        }
        let source_id = sources[0].id.clone();

        let mut warnings = Vec::new();
        let mut posts: Vec<Post> = raw
            .into_iter()
            .map(|p| {
                let is_source = p.id == source_id;
                Post {
                    clean_text: clean_text(&p.text),
                    id: p.id,
                    text: p.text,
                    parent_id: if is_source { None } else { p.parent_id },
                    timestamp: p.timestamp,
                    is_source,
                }
            })
            .collect();

        // Orphans: a parent id that does not resolve within the thread, or a
        // reply unreachable from the source (covers reply cycles). Both are
        // reattached to the source so the reply graph stays a tree.
        let known: BTreeSet<String> = posts.iter().map(|p| p.id.clone()).collect();
        for post in posts.iter_mut().filter(|p| !p.is_source) {
            let parent = post.parent_id.as_deref().unwrap_or("");
            if !known.contains(parent) || parent == post.id {
                warnings.push(IngestWarning {
                    thread_id: thread_id.clone(),
                    message: format!(
                        "post '{}' references missing parent '{parent}'; reattached to source",
                        post.id
                    ),
                });
                post.parent_id = Some(source_id.clone());
            }
        }

        let ordered = canonical_order(&posts, &source_id);
        if ordered.len() != posts.len() {
            // Unreachable posts form reply cycles among themselves.
            let reachable: BTreeSet<&str> = ordered.iter().map(|p| p.id.as_str()).collect();
            let orphan_ids: Vec<String> = posts
                .iter()
                .filter(|p| !reachable.contains(p.id.as_str()))
                .map(|p| p.id.clone())
                .collect();
            for id in &orphan_ids {
                warnings.push(IngestWarning {
                    thread_id: thread_id.clone(),
                    message: format!("post '{id}' is unreachable from the source; reattached"),
                });
            }
            for post in posts.iter_mut() {
                if orphan_ids.contains(&post.id) {
                    post.parent_id = Some(source_id.clone());
                }
            }
        }
        let posts = canonical_order(&posts, &source_id);
        debug_assert_eq!(posts.len(), known.len());

        Ok((
            Self {
                format_version: super::FORMAT_VERSION,
                thread_id,
                event,
                posts,
                embeddings: Vec::new(),
                stance: Vec::new(),
                gold_label,
            },
            warnings,
        ))
    }

    pub fn to_raw_posts(&self) -> Vec<RawPost> {
        self.posts
            .iter()
            .map(|p| RawPost {
                id: p.id.clone(),
                text: p.text.clone(),
                parent_id: p.parent_id.clone(),
                timestamp: p.timestamp,
            })
            .collect()
    }

    /// Index of each post id in canonical order.
    pub fn post_index(&self) -> BTreeMap<&str, usize> {
        self.posts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.as_str(), i))
            .collect()
    }

    pub fn source(&self) -> &Post {
        &self.posts[0]
    }

    pub fn has_features(&self) -> bool {
        self.embeddings.len() == self.posts.len() && self.stance.len() == self.posts.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn stance_dim(&self) -> usize {
        self.stance.first().map_or(0, Vec::len)
    }
}

/// Depth-first order from the source; children sorted by (timestamp, id),
/// posts without a timestamp after those with one.
fn canonical_order(posts: &[Post], source_id: &str) -> Vec<Post> {
    let by_id: BTreeMap<&str, &Post> = posts.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut children: BTreeMap<&str, Vec<&Post>> = BTreeMap::new();
    for post in posts {
        if let Some(parent) = post.parent_id.as_deref() {
            children.entry(parent).or_default().push(post);
        }
    }
    for list in children.values_mut() {
        list.sort_by(|a, b| {
            let ta = (a.timestamp.is_none(), a.timestamp);
            let tb = (b.timestamp.is_none(), b.timestamp);
            ta.cmp(&tb).then_with(|| a.id.cmp(&b.id))
        });
    }
    let mut ordered = Vec::with_capacity(posts.len());
    let mut stack = vec![by_id[source_id]];
    let mut seen = BTreeSet::new();
    while let Some(post) = stack.pop() {
        if !seen.insert(post.id.as_str()) {
            continue;
        }
        ordered.push(post.clone());
        if let Some(kids) = children.get(post.id.as_str()) {
            for kid in kids.iter().rev() {
                stack.push(kid);
            }
        }
    }
    ordered
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, parent: Option<&str>, ts: Option<i64>) -> RawPost {
        RawPost {
            id: id.to_string(),
            text: format!("text {id}"),
            parent_id: parent.map(String::from),
            timestamp: ts,
        }
    }

    #[test]
    fn canonical_order_is_depth_first() {
        // s -> a (t=1) -> c (t=3)
        //   -> b (t=2)
        let posts = vec![
            raw("s", None, Some(0)),
            raw("b", Some("s"), Some(2)),
            raw("a", Some("s"), Some(1)),
            raw("c", Some("a"), Some(3)),
        ];
        let (thread, warnings) =
            EmbeddedThread::from_raw_posts("t".into(), "ev".into(), None, posts).unwrap();
        assert!(warnings.is_empty());
        let order: Vec<&str> = thread.posts.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(order, ["s", "a", "c", "b"]);
    }

    #[test]
    fn missing_timestamp_sorts_after() {
        let posts = vec![
            raw("s", None, None),
            raw("a", Some("s"), None),
            raw("b", Some("s"), Some(9)),
        ];
        let (thread, _) =
            EmbeddedThread::from_raw_posts("t".into(), "ev".into(), None, posts).unwrap();
        let order: Vec<&str> = thread.posts.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(order, ["s", "b", "a"]);
    }

    #[test]
    fn reply_cycle_is_broken() {
        let posts = vec![
            raw("s", None, Some(0)),
            raw("a", Some("b"), Some(1)),
            raw("b", Some("a"), Some(2)),
        ];
        let (thread, warnings) =
            EmbeddedThread::from_raw_posts("t".into(), "ev".into(), None, posts).unwrap();
        assert_eq!(thread.posts.len(), 3);
        assert!(!warnings.is_empty());
        // Everything hangs off the source now.
        for p in &thread.posts[1..] {
            assert_eq!(p.parent_id.as_deref(), Some("s"));
        }
    }

    #[test]
    fn multiple_sources_rejected() {
        let posts = vec![raw("s1", None, None), raw("s2", None, None)];
        assert!(EmbeddedThread::from_raw_posts("t".into(), "ev".into(), None, posts).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let posts = vec![raw("s", None, None), raw("s", Some("s"), None)];
        assert!(EmbeddedThread::from_raw_posts("t".into(), "ev".into(), None, posts).is_err());
    }
}
