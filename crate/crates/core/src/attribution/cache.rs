//! On-disk attribution cache: one JSON file per (thread, method, model
//! checksum), reused by the explainers and reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttributionError, AttributionMethod, AttributionResult};

pub const ATTRIBUTION_CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CachedAttribution {
    pub format_version: u32,
    pub thread_id: String,
    pub model_checksum: String,
    pub result: AttributionResult,
}

pub fn cache_path(dir: &Path, thread_id: &str, method: AttributionMethod) -> PathBuf {
    dir.join(format!("{thread_id}.{}.json", method.short_name()))
}

/// Load a cached result if one exists for this thread, method, and model.
pub fn load_cached(
    dir: &Path,
    thread_id: &str,
    method: AttributionMethod,
    model_checksum: &str,
) -> Result<Option<AttributionResult>, AttributionError> {
    let path = cache_path(dir, thread_id, method);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let cached: CachedAttribution = serde_json::from_str(&text)
        .map_err(|e| AttributionError::Cache(format!("{}: {e}", path.display())))?;
    if cached.format_version != ATTRIBUTION_CACHE_VERSION || cached.model_checksum != model_checksum
    {
        return Ok(None);
    }
    Ok(Some(cached.result))
}

/// Write a result to the cache, atomically (temp file + rename).
pub fn store_cached(
    dir: &Path,
    thread_id: &str,
    model_checksum: &str,
    result: &AttributionResult,
) -> Result<(), AttributionError> {
    fs::create_dir_all(dir)?;
    let record = CachedAttribution {
        format_version: ATTRIBUTION_CACHE_VERSION,
        thread_id: thread_id.to_string(),
        model_checksum: model_checksum.to_string(),
        result: result.clone(),
    };
    let path = cache_path(dir, thread_id, result.method);
    let tmp = path.with_extension("json.tmp");
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| AttributionError::Cache(e.to_string()))?;
    fs::write(&tmp, json)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}
