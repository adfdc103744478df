//! Subcommand implementations with on-disk handoff between stages.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use rumex_core::attribution::{
    attribute_thread, load_cached, shapley_exact, store_cached, AttributionMethod,
    AttributionResult,
};
use rumex_core::explainers::{generate_all, table_row_order, CandidateSkip, ExplanationCandidate};
use rumex_core::ingest::{
    self, attach_features, is_suitable, EmbeddedThread, IngestWarning, LabelMapping, Sidecar,
    VeracityLabel,
};
use rumex_core::llm_eval::{
    consistency_probe, default_temperature_grid, query_evaluator, render_prompt, Category,
    ConsistencyTable, EvalVerdict, ResponseCache,
};
use rumex_core::metrics::{build_eval_report, EvalReport, KindCounts};
use rumex_core::synth;
use rumex_core::verifier::{loco_cv, predict, train, FoldReport, ModelParams};

use crate::config::PipelineConfig;
use crate::io::{read_json, write_atomic, write_json_atomic};

pub const STAGE_FORMAT_VERSION: u32 = 1;

fn load_store(path: &Path) -> anyhow::Result<Vec<EmbeddedThread>> {
    let file = fs::File::open(path).with_context(|| format!("opening '{}'", path.display()))?;
    Ok(ingest::read_store(BufReader::new(file))?)
}

fn save_store(path: &Path, threads: &[EmbeddedThread]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    ingest::write_store(threads, &mut buf)?;
    write_atomic(path, &buf)
}

// ---------------------------------------------------------------- synth ---

/// Write an offline-runnable synthetic corpus: JSONL threads plus feature
/// sidecars in the ingest input formats.
pub fn cmd_synth(
    out: &Path,
    kind: &str,
    threads: usize,
    embed_dim: usize,
    seed: u64,
    events: &[String],
) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let event_refs: Vec<&str> = events.iter().map(String::as_str).collect();
    let dataset = match kind {
        "separable" => synth::separable_dataset(seed, threads, embed_dim, &event_refs),
        "suitability" => {
            let mut fixture = synth::suitability_fixture();
            // Deterministic features so the downstream stages can run.
            for thread in &mut fixture {
                let l = thread.posts.len();
                thread.embeddings = (0..l)
                    .map(|i| {
                        (0..embed_dim)
                            .map(|j| ((i * embed_dim + j) as f64 * 0.13).sin())
                            .collect()
                    })
                    .collect();
                thread.stance = (0..l)
                    .map(|i| (0..4).map(|j| f64::from(j == i % 4)).collect())
                    .collect();
            }
            fixture
        }
        other => anyhow::bail!("unknown fixture kind '{other}' (separable | suitability)"),
    };

    // Strip features into sidecars so ingest exercises the real input path.
    let mut embeddings = BTreeMap::new();
    let mut stance = BTreeMap::new();
    let mut bare = Vec::with_capacity(dataset.len());
    for thread in &dataset {
        for (post, (e_row, s_row)) in thread
            .posts
            .iter()
            .zip(thread.embeddings.iter().zip(&thread.stance))
        {
            embeddings.insert(post.id.clone(), e_row.clone());
            stance.insert(post.id.clone(), s_row.clone());
        }
        let mut t = thread.clone();
        t.embeddings = Vec::new();
        t.stance = Vec::new();
        bare.push(t);
    }

    let mut jsonl = Vec::new();
    ingest::write_jsonl(&bare, &mut jsonl)?;
    write_atomic(&out.join("threads.jsonl"), &jsonl)?;
    write_json_atomic(&out.join("embeddings.json"), &Sidecar::new(embeddings))?;
    write_json_atomic(&out.join("stance.json"), &Sidecar::new(stance))?;
    println!(
        "wrote {} threads to {} (threads.jsonl, embeddings.json, stance.json)",
        dataset.len(),
        out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- ingest ---

#[derive(Debug, Serialize, Deserialize)]
pub struct SuitabilityReport {
    pub format_version: u32,
    pub total: usize,
    pub suitable: usize,
    pub unsuitable: usize,
    pub suitable_ids: Vec<String>,
    pub warnings: Vec<IngestWarning>,
}

pub struct IngestArgs<'a> {
    pub pheme_dir: Option<&'a Path>,
    pub jsonl: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
    pub stance: Option<&'a Path>,
    pub label_overrides: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn cmd_ingest(args: IngestArgs<'_>) -> anyhow::Result<()> {
    fs::create_dir_all(args.out)?;
    let mapping = match args.label_overrides {
        Some(path) => read_json::<LabelMapping>(path)?,
        None => LabelMapping::default(),
    };
    let outcome = match (args.pheme_dir, args.jsonl) {
        (Some(dir), None) => ingest::parse_pheme_dir(dir, &mapping)?,
        (None, Some(file)) => {
            let reader = BufReader::new(
                fs::File::open(file).with_context(|| format!("opening '{}'", file.display()))?,
            );
            ingest::parse_jsonl(reader)?
        }
        _ => anyhow::bail!("exactly one of --pheme-dir or --jsonl is required"),
    };
    for warning in &outcome.warnings {
        log::warn!("{}: {}", warning.thread_id, warning.message);
    }

    let mut threads = outcome.threads;
    if let (Some(emb_path), Some(stance_path)) = (args.embeddings, args.stance) {
        let emb = Sidecar::from_reader(fs::File::open(emb_path)?)?;
        let stance = Sidecar::from_reader(fs::File::open(stance_path)?)?;
        threads = threads
            .into_iter()
            .map(|t| attach_features(t, &emb.vectors, &stance.vectors))
            .collect::<Result<_, _>>()?;
    }

    let suitable_ids: Vec<String> = threads
        .iter()
        .filter(|t| is_suitable(t))
        .map(|t| t.thread_id.clone())
        .collect();
    let report = SuitabilityReport {
        format_version: STAGE_FORMAT_VERSION,
        total: threads.len(),
        suitable: suitable_ids.len(),
        unsuitable: threads.len() - suitable_ids.len(),
        suitable_ids,
        warnings: outcome.warnings,
    };

    save_store(&args.out.join("store.jsonl"), &threads)?;
    write_json_atomic(&args.out.join("suitability.json"), &report)?;
    println!(
        "ingested {} threads ({}/{} suitable) into {}",
        report.total,
        report.suitable,
        report.total,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train ---

pub fn cmd_train(
    store: &Path,
    out: &Path,
    config: &PipelineConfig,
    run_loco: bool,
) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let threads = load_store(store)?;
    anyhow::ensure!(!threads.is_empty(), "thread store is empty");
    let mut model_config = config.model.clone();
    model_config.embed_dim = threads[0].embed_dim();
    model_config.stance_dim = threads[0].stance_dim();
    anyhow::ensure!(
        model_config.embed_dim > 0,
        "threads have no attached features; re-run ingest with sidecars"
    );

    let mut resolved = config.clone();
    resolved.model = model_config.clone();
    resolved.save(&out.join("config.json"))?;

    let labeled: Vec<EmbeddedThread> = threads
        .iter()
        .filter(|t| t.gold_label.is_some())
        .cloned()
        .collect();
    anyhow::ensure!(!labeled.is_empty(), "no labeled threads in the store");

    log::info!(
        "training on {} threads for {} epochs (lr {})",
        labeled.len(),
        model_config.epochs,
        model_config.lr
    );
    let outcome = train(&labeled, &model_config)?;
    let mut checkpoint = Vec::new();
    outcome.params.save(&mut checkpoint)?;
    write_atomic(&out.join("model.json"), &checkpoint)?;
    write_json_atomic(&out.join("loss_history.json"), &outcome.loss_history)?;
    println!(
        "trained model written to {} (final loss {:.6})",
        out.join("model.json").display(),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN)
    );

    if run_loco {
        let report: FoldReport = loco_cv(&labeled, &model_config)?;
        write_json_atomic(&out.join("fold_report.json"), &report)?;
        for fold in &report.folds {
            println!("fold {:<12} macro-F1 {:.3} (n = {})", fold.event, fold.macro_f1, fold.n_test);
        }
        println!(
            "overall macro-F1: mean-of-folds {:.3}, pooled {:.3}",
            report.overall_mean_of_folds, report.overall_micro_pooled
        );
    }
    Ok(())
}

// -------------------------------------------------------------- explain ---

#[derive(Debug, Serialize, Deserialize)]
pub struct ThreadCandidates {
    pub format_version: u32,
    pub thread_id: String,
    pub event: String,
    pub claim: String,
    pub prediction: VeracityLabel,
    pub probabilities: [f64; 3],
    pub candidates: Vec<ExplanationCandidate>,
    pub skips: Vec<CandidateSkip>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ExplainFailures {
    pub format_version: u32,
    pub failures: Vec<(String, String)>,
}

pub struct ExplainArgs<'a> {
    pub store: &'a Path,
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    pub suitable_only: bool,
    /// "auto" uses sampling above `sv_exact_up_to`; "exact" forces
    /// enumeration and records a refusal for oversized threads.
    pub sv_mode: &'a str,
}

pub fn cmd_explain(args: ExplainArgs<'_>, config: &PipelineConfig) -> anyhow::Result<()> {
    fs::create_dir_all(args.out)?;
    config.save(&args.out.join("config.json"))?;
    let threads = load_store(args.store)?;
    let params = ModelParams::load(fs::File::open(args.checkpoint)?)?;
    let checksum = params.checksum();
    let cache_dir = args.out.join("attributions");
    let candidates_dir = args.out.join("candidates");
    fs::create_dir_all(&candidates_dir)?;
    let service = config.summarizer.service();

    let mut failures = ExplainFailures {
        format_version: STAGE_FORMAT_VERSION,
        failures: Vec::new(),
    };
    let mut generated = 0usize;
    let mut skipped = 0usize;

    for thread in &threads {
        if args.suitable_only && !is_suitable(thread) {
            continue;
        }
        let candidate_path = candidates_dir.join(format!("{}.json", thread.thread_id));
        if candidate_path.exists() {
            skipped += 1;
            continue;
        }
        match explain_one(thread, &params, &checksum, &cache_dir, args.sv_mode, config, service.as_ref()) {
            Ok(bundle) => {
                write_json_atomic(&candidate_path, &bundle)?;
                generated += 1;
            }
            Err(e) => {
                log::warn!("thread '{}' failed: {e}", thread.thread_id);
                failures.failures.push((thread.thread_id.clone(), e.to_string()));
            }
        }
    }
    if !failures.failures.is_empty() {
        write_json_atomic(&args.out.join("explain_failures.json"), &failures)?;
    }
    println!(
        "explained {generated} threads ({skipped} already cached, {} failed) into {}",
        failures.failures.len(),
        args.out.display()
    );
    Ok(())
}

fn explain_one(
    thread: &EmbeddedThread,
    params: &ModelParams,
    checksum: &str,
    cache_dir: &Path,
    sv_mode: &str,
    config: &PipelineConfig,
    service: &dyn rumex_core::explainers::SummarizeService,
) -> anyhow::Result<ThreadCandidates> {
    let (prediction, probabilities) = predict(params, thread)?;
    let mut attributions: Vec<(AttributionMethod, AttributionResult)> = Vec::new();
    for &method in &config.methods {
        let cached = load_cached(cache_dir, &thread.thread_id, method, checksum)?;
        let result = match cached {
            Some(result) => result,
            None => {
                let result = match (method, sv_mode) {
                    (AttributionMethod::ShapleyValues, "exact") => {
                        shapley_exact(params, thread, prediction)?
                    }
                    _ => attribute_thread(
                        params,
                        thread,
                        method,
                        &config.attribution,
                        Some(prediction),
                    )?,
                };
                store_cached(cache_dir, &thread.thread_id, checksum, &result)?;
                result
            }
        };
        attributions.push((method, result));
    }

    let batch = generate_all(thread, &attributions, &config.summarizer, service);
    Ok(ThreadCandidates {
        format_version: STAGE_FORMAT_VERSION,
        thread_id: thread.thread_id.clone(),
        event: thread.event.clone(),
        claim: thread.source().clean_text.clone(),
        prediction,
        probabilities,
        candidates: batch.candidates,
        skips: batch.skips,
    })
}

// ------------------------------------------------------------- evaluate ---

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictItem {
    pub row_label: String,
    pub candidate: ExplanationCandidate,
    pub verdict: EvalVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThreadVerdicts {
    pub format_version: u32,
    pub thread_id: String,
    pub prediction: VeracityLabel,
    pub items: Vec<VerdictItem>,
    /// Candidates whose prompt could not be rendered (empty text).
    pub render_failures: Vec<(String, String)>,
}

pub struct EvaluateArgs<'a> {
    pub candidates_dir: &'a Path,
    pub out: &'a Path,
    pub probe: bool,
}

pub fn cmd_evaluate(args: EvaluateArgs<'_>, config: &PipelineConfig) -> anyhow::Result<()> {
    fs::create_dir_all(args.out)?;
    config.save(&args.out.join("config.json"))?;
    let client = config.evaluator.client()?;
    let cache = ResponseCache::new(args.out.join("llm_cache"));
    let verdict_dir = args.out.join("verdicts");
    fs::create_dir_all(&verdict_dir)?;

    let mut bundles: Vec<ThreadCandidates> = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(args.candidates_dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    entries.sort();
    for path in &entries {
        bundles.push(read_json(path)?);
    }
    anyhow::ensure!(!bundles.is_empty(), "no candidate files under '{}'", args.candidates_dir.display());

    let mut all_verdicts: Vec<ThreadVerdicts> = Vec::new();
    for bundle in &bundles {
        let mut items = Vec::new();
        let mut render_failures = Vec::new();
        for candidate in &bundle.candidates {
            let label = candidate.row_label();
            let prompt = match render_prompt(&bundle.claim, &candidate.text) {
                Ok(p) => p,
                Err(e) => {
                    render_failures.push((label, e.to_string()));
                    continue;
                }
            };
            let verdicts = query_evaluator(
                client.as_ref(),
                Some(&cache),
                &prompt,
                config.evaluator.temperature,
                config.evaluator.runs.max(1),
            )?;
            for verdict in verdicts {
                let category = verdict.category(bundle.prediction);
                items.push(VerdictItem {
                    row_label: label.clone(),
                    candidate: candidate.clone(),
                    verdict,
                    category,
                });
            }
        }
        let thread_verdicts = ThreadVerdicts {
            format_version: STAGE_FORMAT_VERSION,
            thread_id: bundle.thread_id.clone(),
            prediction: bundle.prediction,
            items,
            render_failures,
        };
        write_json_atomic(
            &verdict_dir.join(format!("{}.json", bundle.thread_id)),
            &thread_verdicts,
        )?;
        all_verdicts.push(thread_verdicts);
    }

    let report = aggregate_report(&all_verdicts);
    write_report(args.out, &report)?;
    println!(
        "evaluated {} threads with '{}' ({} outbound requests); report at {}",
        bundles.len(),
        client.model_name(),
        client.requests_sent(),
        args.out.join("eval_report.json").display()
    );

    if args.probe {
        let items: Vec<(String, String)> = bundles
            .iter()
            .flat_map(|b| {
                b.candidates
                    .iter()
                    .map(|c| (b.claim.clone(), c.text.clone()))
            })
            .filter(|(c, e)| !c.trim().is_empty() && !e.trim().is_empty())
            .take(4)
            .collect();
        let table: ConsistencyTable = consistency_probe(
            client.as_ref(),
            Some(&cache),
            &items,
            &default_temperature_grid(),
            3,
        )?;
        write_json_atomic(&args.out.join("consistency.json"), &table)?;
        for (t, f) in &table.per_temperature {
            println!("consistency at temperature {t:.1}: {:.0}%", f * 100.0);
        }
    }
    Ok(())
}

fn aggregate_report(all: &[ThreadVerdicts]) -> EvalReport {
    let mut groups: BTreeMap<String, KindCounts> = BTreeMap::new();
    for thread in all {
        for item in &thread.items {
            let counts = groups.entry(item.row_label.clone()).or_default();
            match item.category {
                Some(Category::Uninformative) => counts.uninformative += 1,
                Some(Category::Unfaithful) => counts.unfaithful += 1,
                Some(Category::Faithful) => counts.faithful += 1,
                None => counts.parse_failures += 1,
            }
        }
    }
    // Known rows in table order first, then anything else alphabetically.
    let mut ordered: Vec<(String, KindCounts)> = Vec::new();
    for label in table_row_order() {
        if let Some(counts) = groups.remove(&label) {
            ordered.push((label, counts));
        } else {
            ordered.push((label, KindCounts::default()));
        }
    }
    for (label, counts) in groups {
        ordered.push((label, counts));
    }
    build_eval_report(&ordered, all.len())
}

fn write_report(out: &Path, report: &EvalReport) -> anyhow::Result<()> {
    write_json_atomic(&out.join("eval_report.json"), report)?;
    write_atomic(&out.join("eval_report.csv"), report.to_csv().as_bytes())?;
    for row in &report.rows {
        println!(
            "{:<28} uninformative {:>6.2}%  unfaithful {:>6.2}%  faithful {:>6.2}%",
            row.label, row.uninformative_pct, row.unfaithful_pct, row.faithful_pct
        );
    }
    Ok(())
}

// --------------------------------------------------------------- report ---

pub fn cmd_report(verdicts_dir: &Path, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let mut entries: Vec<PathBuf> = fs::read_dir(verdicts_dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    entries.sort();
    anyhow::ensure!(!entries.is_empty(), "no verdict files under '{}'", verdicts_dir.display());
    let mut all = Vec::new();
    for path in &entries {
        all.push(read_json::<ThreadVerdicts>(path)?);
    }
    let report = aggregate_report(&all);
    write_report(out, &report)?;
    Ok(())
}
