//! Pipeline configuration: one serializable struct covering every stage.
//! A resolved copy is written into each run's output directory.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use rumex_core::attribution::{AttributionMethod, AttributionSettings};
use rumex_core::explainers::{SummarizerFlavor, SummarizerSpec};
use rumex_core::llm_eval::EvaluatorConfig;
use rumex_core::verifier::ModelConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub attribution: AttributionSettings,
    /// Methods run by the explain stage.
    pub methods: Vec<AttributionMethod>,
    /// Subset percentages for the summary explanations.
    pub subset_ks: Vec<f64>,
    pub summarizer: SummarizerSpec,
    pub evaluator: EvaluatorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            model: ModelConfig::with_dims(384, 4),
            attribution: AttributionSettings::default(),
            methods: vec![
                AttributionMethod::IntegratedGradients,
                AttributionMethod::ShapleyValues,
            ],
            subset_ks: vec![25.0, 50.0, 100.0],
            summarizer: SummarizerSpec::stub(SummarizerFlavor::OpinionTemplate),
            evaluator: EvaluatorConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config '{}'", path.display()))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config '{}'", path.display()))?;
        anyhow::ensure!(
            config.format_version == CONFIG_FORMAT_VERSION,
            "unsupported config format_version {}",
            config.format_version
        );
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(path, json.as_bytes())
            .with_context(|| format!("writing config copy '{}'", path.display()))
    }
}
