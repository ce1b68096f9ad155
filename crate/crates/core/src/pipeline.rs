//! Stage orchestration: artifact layout, resumable execution, manifest
//! writing, and the manifest-chain verifier. Every stage writes its outputs
//! plus a manifest recording input/output digests, row counts, and
//! drop/filter counters; wall time goes to a separate timing sidecar so
//! manifests stay byte-identical across reruns.

use crate::analyze::{
    bin_difficulty, length_by_difficulty, length_stats, tag_behaviors, write_behaviors_csv,
    write_difficulty_csv, write_lengths_by_bin_csv, AnalyzeError, BehaviorTags, LengthStats,
    QuestionRollouts,
};
use crate::config::{Config, ConfigError, EndpointKind, TaggingMode};
use crate::cotgen::{generate_cots, CotgenSettings};
use crate::datasets::{
    build_dpo, build_sft, read_jsonl, seeded_split, write_jsonl, DatasetError, DatasetOptions,
    DatasetStats,
};
use crate::domain::{CaptionRecord, LabeledSample, McqItem};
use crate::evalharness::{
    load_benchmark, run_eval, run_rollouts, score, EvalError, EvalOutcome, EvalSettings,
    RolloutSettings,
};
use crate::expand::{expand_seeds, BadWordFilter, ExpandSettings, FilterAuditRow};
use crate::manifest::{
    file_digest, read_manifest, verify_manifest, write_manifest, write_timing, ManifestError,
    StageManifest, StageTiming,
};
use crate::modelio::{
    ChatBackend, HttpBackend, HttpEndpoint, MockBackend, ModelIoError, SamplingParams,
};
use crate::qgen::{generate_mcqs, QgenSettings};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKind {
    GenMcq,
    GenCot,
    Expand,
    BuildSft,
    BuildDpo,
    Analyze,
    Eval,
    Rollouts,
}

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::GenMcq => "gen-mcq",
            StageKind::GenCot => "gen-cot",
            StageKind::Expand => "expand",
            StageKind::BuildSft => "build-sft",
            StageKind::BuildDpo => "build-dpo",
            StageKind::Analyze => "analyze",
            StageKind::Eval => "eval",
            StageKind::Rollouts => "rollouts",
        }
    }

    /// Canonical execution order.
    pub fn all() -> [StageKind; 8] {
        [
            StageKind::GenMcq,
            StageKind::GenCot,
            StageKind::Expand,
            StageKind::BuildSft,
            StageKind::BuildDpo,
            StageKind::Analyze,
            StageKind::Eval,
            StageKind::Rollouts,
        ]
    }
}

impl std::str::FromStr for StageKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage} is missing upstream artifact {path}")]
    MissingUpstream { stage: String, path: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("backend: {0}")]
    Backend(#[from] ModelIoError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    pub limit: Option<usize>,
    pub dry_run: bool,
}

/// What a stage did, for reporting and exit-code decisions.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub stage: String,
    pub skipped: bool,
    pub dry_run: bool,
    pub wall_time_ms: u128,
    pub row_counts: BTreeMap<String, u64>,
    pub counters: BTreeMap<String, u64>,
    pub outputs: Vec<PathBuf>,
    /// Items attempted and items that failed, for partial-failure exits.
    pub processed: u64,
    pub failures: u64,
}

impl StageReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.processed == 0 {
            0.0
        } else {
            self.failures as f64 / self.processed as f64
        }
    }
}

/// Workdir artifact layout. Logical names double as manifest keys.
pub struct Layout {
    workdir: PathBuf,
}

impl Layout {
    pub fn new(workdir: PathBuf) -> Self {
        Layout { workdir }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    pub fn manifest_path(&self, stage: StageKind) -> PathBuf {
        self.workdir.join("manifests").join(format!("{}.json", stage.name()))
    }

    pub fn timing_path(&self, stage: StageKind) -> PathBuf {
        self.workdir.join("manifests").join(format!("{}.timing.json", stage.name()))
    }
}

pub const MCQS: &str = "mcqs.jsonl";
pub const SIMPLE: &str = "simple.jsonl";
pub const EXPANDED: &str = "expanded.jsonl";
pub const FILTER_AUDIT: &str = "filter_audit.jsonl";
pub const SFT: &str = "sft.jsonl";
pub const SFT_HOLDOUT: &str = "sft_holdout.jsonl";
pub const DPO: &str = "dpo.jsonl";
pub const DPO_HOLDOUT: &str = "dpo_holdout.jsonl";
pub const STATS: &str = "stats.json";
pub const BEHAVIORS_CSV: &str = "behaviors.csv";
pub const TRACE_LENGTHS: &str = "trace_lengths.json";
pub const DIFFICULTY_CSV: &str = "difficulty.csv";
pub const LENGTHS_BY_BIN_CSV: &str = "lengths_by_bin.csv";
pub const ROLLOUTS: &str = "rollouts.jsonl";
pub const EVAL_OUTCOMES: &str = "eval_outcomes.jsonl";
pub const EVAL_SUMMARY: &str = "eval_summary.json";

/// Maps a logical artifact name to its path: the corpus and benchmark come
/// from config, everything else lives in the workdir.
pub fn resolve_artifact(config: &Config, name: &str) -> PathBuf {
    match name {
        "corpus" => config.corpus_path(),
        "benchmark" => config
            .benchmark_path()
            .unwrap_or_else(|| config.workdir().join("benchmark.jsonl")),
        other => config.workdir().join(other),
    }
}

/// Builds the backend named by an endpoint config.
pub fn backend_for(config: &Config, endpoint_name: &str) -> Result<Arc<dyn ChatBackend>, PipelineError> {
    let endpoint = config.endpoints.get(endpoint_name);
    match endpoint.kind {
        EndpointKind::Mock => Ok(Arc::new(MockBackend::synthetic(endpoint.mock_salt))),
        EndpointKind::Http => {
            let http = HttpBackend::new(HttpEndpoint {
                base_url: endpoint.base_url.clone().expect("validated"),
                api_key: endpoint.api_key(),
                prefill_strategy: endpoint.prefill_strategy,
                retry: endpoint.retry.clone().unwrap_or_default(),
                timeout: std::time::Duration::from_secs(endpoint.timeout_secs),
            })?;
            Ok(Arc::new(http))
        }
    }
}

fn endpoint_for_stage(stage: StageKind, config: &Config) -> Option<&'static str> {
    match stage {
        StageKind::GenMcq => Some("qgen_model"),
        StageKind::GenCot => Some("vlm_model"),
        StageKind::Expand => Some("reason_model"),
        StageKind::Eval => Some("eval_model"),
        StageKind::Rollouts => Some("vlm_model"),
        StageKind::Analyze => match config.analyze.tagging {
            TaggingMode::Judge => Some("eval_model"),
            TaggingMode::Lexical => None,
        },
        StageKind::BuildSft | StageKind::BuildDpo => None,
    }
}

/// Runs one stage, constructing the backend from config.
pub fn run_stage(
    stage: StageKind,
    config: &Config,
    options: &RunOptions,
) -> Result<StageReport, PipelineError> {
    let backend = match endpoint_for_stage(stage, config) {
        Some(name) => Some(backend_for(config, name)?),
        None => None,
    };
    run_stage_with_backend(stage, config, options, backend.as_deref())
}

/// Stage executor with an injectable backend (used by tests to observe
/// network traffic).
pub fn run_stage_with_backend(
    stage: StageKind,
    config: &Config,
    options: &RunOptions,
    backend: Option<&dyn ChatBackend>,
) -> Result<StageReport, PipelineError> {
    let started = Instant::now();
    let runner = StageRunner { config, options, backend, layout: Layout::new(config.workdir()) };
    let mut report = match stage {
        StageKind::GenMcq => runner.gen_mcq(),
        StageKind::GenCot => runner.gen_cot(),
        StageKind::Expand => runner.expand(),
        StageKind::BuildSft => runner.build_sft(),
        StageKind::BuildDpo => runner.build_dpo(),
        StageKind::Analyze => runner.analyze(),
        StageKind::Eval => runner.eval(),
        StageKind::Rollouts => runner.rollouts(),
    }?;
    report.stage = stage.name().to_string();
    report.wall_time_ms = started.elapsed().as_millis();
    if !report.skipped && !report.dry_run {
        write_timing(
            &runner.layout.timing_path(stage),
            &StageTiming { stage: stage.name().to_string(), wall_time_ms: report.wall_time_ms },
        )?;
    }
    Ok(report)
}

/// Walks every manifest present in stage order, recomputing digests of the
/// files each one references. Returns the verified stage names.
pub fn verify_chain(config: &Config) -> Result<Vec<String>, PipelineError> {
    let layout = Layout::new(config.workdir());
    let mut verified = Vec::new();
    for stage in StageKind::all() {
        let path = layout.manifest_path(stage);
        if !path.exists() {
            continue;
        }
        let manifest = read_manifest(&path)?;
        verify_manifest(&manifest, |name| resolve_artifact(config, name))?;
        verified.push(manifest.stage.clone());
    }
    Ok(verified)
}

struct StageRunner<'a> {
    config: &'a Config,
    options: &'a RunOptions,
    backend: Option<&'a dyn ChatBackend>,
    layout: Layout,
}

impl<'a> StageRunner<'a> {
    fn backend(&self, stage: StageKind) -> Result<&'a dyn ChatBackend, PipelineError> {
        self.backend.ok_or_else(|| {
            PipelineError::InvalidInput(format!("stage {} requires a backend", stage.name()))
        })
    }

    fn cache(&self) -> crate::modelio::ResponseCache {
        crate::modelio::ResponseCache::new(self.config.cache_dir())
    }

    /// Digests the named inputs, erroring with MissingUpstream when absent.
    fn digest_inputs(
        &self,
        stage: StageKind,
        names: &[&str],
    ) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut digests = BTreeMap::new();
        for name in names {
            let path = resolve_artifact(self.config, name);
            if !path.exists() {
                return Err(PipelineError::MissingUpstream {
                    stage: stage.name().to_string(),
                    path: path.display().to_string(),
                });
            }
            digests.insert(name.to_string(), file_digest(&path)?);
        }
        Ok(digests)
    }

    /// True when a resume can skip this stage: same config, same inputs,
    /// same limit.
    fn resume_hit(&self, stage: StageKind, inputs: &BTreeMap<String, String>) -> bool {
        if !self.options.resume {
            return false;
        }
        let path = self.layout.manifest_path(stage);
        let Ok(manifest) = read_manifest(&path) else {
            return false;
        };
        let limit_recorded = manifest.counters.get("limit").copied();
        let limit_now = self.options.limit.map(|l| l as u64);
        manifest.config_digest == self.config.digest
            && manifest.input_digests == *inputs
            && limit_recorded == limit_now
            && manifest
                .output_digests
                .keys()
                .all(|name| resolve_artifact(self.config, name).exists())
    }

    fn skipped_report(&self, manifest_path: &std::path::Path) -> StageReport {
        let mut report = StageReport { skipped: true, ..Default::default() };
        if let Ok(manifest) = read_manifest(manifest_path) {
            report.row_counts = manifest.row_counts;
            report.counters = manifest.counters;
        }
        report
    }

    fn dry_run_report(&self, outputs: Vec<PathBuf>) -> StageReport {
        StageReport { dry_run: true, skipped: true, outputs, ..Default::default() }
    }

    /// Writes the manifest and assembles the report common to all stages.
    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        stage: StageKind,
        inputs: BTreeMap<String, String>,
        output_names: &[&str],
        digest_outputs: &[&str],
        row_counts: BTreeMap<String, u64>,
        mut counters: BTreeMap<String, u64>,
        processed: u64,
        failures: u64,
    ) -> Result<StageReport, PipelineError> {
        if let Some(limit) = self.options.limit {
            counters.insert("limit".into(), limit as u64);
        }
        let mut output_digests = BTreeMap::new();
        for name in digest_outputs {
            let path = resolve_artifact(self.config, name);
            output_digests.insert(name.to_string(), file_digest(&path)?);
        }
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            config_digest: self.config.digest.clone(),
            input_digests: inputs,
            output_digests,
            row_counts: row_counts.clone(),
            counters: counters.clone(),
        };
        write_manifest(&self.layout.manifest_path(stage), &manifest)?;
        Ok(StageReport {
            stage: stage.name().to_string(),
            row_counts,
            counters,
            outputs: output_names.iter().map(|n| resolve_artifact(self.config, n)).collect(),
            processed,
            failures,
            ..Default::default()
        })
    }

    fn read_corpus(&self) -> Result<Vec<CaptionRecord>, PipelineError> {
        let records: Vec<CaptionRecord> = read_jsonl(&self.config.corpus_path())?;
        let mut seen = HashSet::new();
        for record in &records {
            record
                .validate()
                .map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
            if !seen.insert(record.image_id.clone()) {
                return Err(PipelineError::InvalidInput(format!(
                    "duplicate image_id {:?} in corpus",
                    record.image_id
                )));
            }
        }
        Ok(records)
    }

    fn read_mcqs(&self) -> Result<Vec<McqItem>, PipelineError> {
        let items: Vec<McqItem> = read_jsonl(&resolve_artifact(self.config, MCQS))?;
        for item in &items {
            item.validate().map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
        }
        Ok(items)
    }

    fn read_samples(&self, name: &str) -> Result<Vec<LabeledSample>, PipelineError> {
        Ok(read_jsonl(&resolve_artifact(self.config, name))?)
    }

    fn apply_limit<T>(&self, mut rows: Vec<T>) -> Vec<T> {
        if let Some(limit) = self.options.limit {
            rows.truncate(limit);
        }
        rows
    }

    fn write_json_pretty<T: Serialize>(&self, name: &str, value: &T) -> Result<(), PipelineError> {
        let path = resolve_artifact(self.config, name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::Io(e.to_string()))?;
        }
        let mut payload =
            serde_json::to_string_pretty(value).map_err(|e| PipelineError::Io(e.to_string()))?;
        payload.push('\n');
        std::fs::write(&path, payload).map_err(|e| PipelineError::Io(e.to_string()))
    }

    // -- gen-mcq ----------------------------------------------------------

    fn gen_mcq(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::GenMcq;
        let inputs = self.digest_inputs(stage, &["corpus"])?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![resolve_artifact(self.config, MCQS)]));
        }
        let records = self.apply_limit(self.read_corpus()?);
        let backend = self.backend(stage)?;
        let cache = self.cache();
        let settings = QgenSettings {
            model_id: self.config.endpoints.qgen_model.model_id.clone(),
            params: self.config.stage1.params.clone(),
            force_reparse: self.config.stage1.force_reparse,
        };
        let (items, stats) =
            generate_mcqs(&records, backend, &cache, &settings, self.config.max_in_flight);
        write_jsonl(&resolve_artifact(self.config, MCQS), &items)?;

        let mut row_counts = BTreeMap::new();
        row_counts.insert("records".into(), records.len() as u64);
        row_counts.insert("mcqs".into(), items.len() as u64);
        let mut counters = BTreeMap::new();
        counters.insert("parsed_entries".into(), stats.parsed_entries as u64);
        counters.insert("skipped_entries".into(), stats.skipped_entries as u64);
        counters.insert("reparse_calls".into(), stats.reparse_calls as u64);
        counters.insert("dropped_no_gold".into(), stats.dropped_no_gold as u64);
        counters.insert("dropped_ambiguous".into(), stats.dropped_ambiguous as u64);
        counters.insert("dropped_duplicate".into(), stats.dropped_duplicate as u64);
        counters.insert("dropped_invalid".into(), stats.dropped_invalid as u64);
        counters.insert("records_without_entries".into(), stats.records_without_entries as u64);
        counters.insert("failed_records".into(), stats.failed_records as u64);
        self.finish(
            stage,
            inputs,
            &[MCQS],
            &[MCQS],
            row_counts,
            counters,
            records.len() as u64,
            stats.failed_records as u64,
        )
    }

    // -- gen-cot ----------------------------------------------------------

    fn gen_cot(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::GenCot;
        let inputs = self.digest_inputs(stage, &["corpus", MCQS])?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![resolve_artifact(self.config, SIMPLE)]));
        }
        let records_by_id: HashMap<String, CaptionRecord> =
            self.read_corpus()?.into_iter().map(|r| (r.image_id.clone(), r)).collect();
        let items = self.apply_limit(self.read_mcqs()?);
        let backend = self.backend(stage)?;
        let cache = self.cache();
        let settings = CotgenSettings {
            model_id: self.config.endpoints.vlm_model.model_id.clone(),
            params: self.config.stage2.params.clone(),
        };
        let (samples, stats) = generate_cots(
            &items,
            &records_by_id,
            backend,
            &cache,
            &settings,
            self.config.max_in_flight,
        );
        write_jsonl(&resolve_artifact(self.config, SIMPLE), &samples)?;

        let mut row_counts = BTreeMap::new();
        row_counts.insert("mcqs".into(), items.len() as u64);
        row_counts.insert("samples".into(), samples.len() as u64);
        let mut counters = BTreeMap::new();
        counters.insert("dropped_missing_think".into(), stats.dropped_missing_think as u64);
        counters.insert("failed_items".into(), stats.failed_items as u64);
        self.finish(
            stage,
            inputs,
            &[SIMPLE],
            &[SIMPLE],
            row_counts,
            counters,
            items.len() as u64,
            stats.failed_items as u64,
        )
    }

    // -- expand -----------------------------------------------------------

    fn expand(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::Expand;
        let inputs = self.digest_inputs(stage, &["corpus", MCQS, SIMPLE])?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![
                resolve_artifact(self.config, EXPANDED),
                resolve_artifact(self.config, FILTER_AUDIT),
            ]));
        }
        let records_by_id: HashMap<String, CaptionRecord> =
            self.read_corpus()?.into_iter().map(|r| (r.image_id.clone(), r)).collect();
        let items_by_id: HashMap<String, McqItem> =
            self.read_mcqs()?.into_iter().map(|i| (i.mcq_id.clone(), i)).collect();
        let seeds = self.apply_limit(self.read_samples(SIMPLE)?);
        let backend = self.backend(stage)?;
        let cache = self.cache();
        let settings = ExpandSettings {
            model_id: self.config.endpoints.reason_model.model_id.clone(),
            params: self.config.stage3.params.clone(),
            stop: self.config.stage3.stop.clone(),
            cues_per_seed: self.config.stage3.cues_per_seed,
        };
        let filter = BadWordFilter::new(&self.config.bad_words);
        let (expansions, audit, stats) = expand_seeds(
            &seeds,
            &items_by_id,
            &records_by_id,
            backend,
            &cache,
            &settings,
            &self.config.cue_set(),
            &filter,
            self.config.rng_seed,
            self.config.max_in_flight,
        );
        write_jsonl(&resolve_artifact(self.config, EXPANDED), &expansions)?;
        write_jsonl(&resolve_artifact(self.config, FILTER_AUDIT), &audit)?;

        let mut row_counts = BTreeMap::new();
        row_counts.insert("seeds".into(), stats.seeds as u64);
        row_counts.insert("expansions".into(), expansions.len() as u64);
        let mut counters = BTreeMap::new();
        counters.insert("requests".into(), stats.requests as u64);
        counters.insert("filtered_out".into(), stats.filtered_out as u64);
        counters.insert("empty_continuations".into(), stats.empty_continuations as u64);
        counters.insert("failed_requests".into(), stats.failed_requests as u64);
        self.finish(
            stage,
            inputs,
            &[EXPANDED, FILTER_AUDIT],
            &[EXPANDED, FILTER_AUDIT],
            row_counts,
            counters,
            stats.requests as u64,
            stats.failed_requests as u64,
        )
    }

    // -- dataset construction ----------------------------------------------

    fn mcq_store(&self) -> Result<HashMap<String, McqItem>, PipelineError> {
        Ok(self.read_mcqs()?.into_iter().map(|i| (i.mcq_id.clone(), i)).collect())
    }

    fn all_samples(&self) -> Result<Vec<LabeledSample>, PipelineError> {
        let mut samples = self.read_samples(SIMPLE)?;
        samples.extend(self.read_samples(EXPANDED)?);
        Ok(samples)
    }

    /// Merges upstream drop/filter counters into the stats sidecar.
    fn upstream_counts(&self) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
        let mut drops = BTreeMap::new();
        let mut filters = BTreeMap::new();
        for (stage, prefix) in [
            (StageKind::GenMcq, "stage1"),
            (StageKind::GenCot, "stage2"),
            (StageKind::Expand, "stage3"),
        ] {
            if let Ok(manifest) = read_manifest(&self.layout.manifest_path(stage)) {
                for (key, value) in manifest.counters {
                    if key.starts_with("filtered") {
                        filters.insert(format!("{prefix}.{key}"), value as usize);
                    } else if ["dropped", "failed", "skipped", "empty", "without"]
                        .iter()
                        .any(|marker| key.contains(marker))
                    {
                        drops.insert(format!("{prefix}.{key}"), value as usize);
                    }
                }
            }
        }
        if let Ok(audit) =
            read_jsonl::<FilterAuditRow>(&resolve_artifact(self.config, FILTER_AUDIT))
        {
            for row in audit {
                *filters.entry(format!("word.{}", row.word)).or_insert(0) += 1;
            }
        }
        (drops, filters)
    }

    fn read_stats(&self) -> DatasetStats {
        let path = resolve_artifact(self.config, STATS);
        std::fs::read(&path)
            .ok()
            .and_then(|bytes| serde_json::from_slice(&bytes).ok())
            .unwrap_or_default()
    }

    fn write_stats(&self, stats: &DatasetStats) -> Result<(), PipelineError> {
        self.write_json_pretty(STATS, stats)
    }

    fn build_sft(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::BuildSft;
        let inputs = self.digest_inputs(stage, &[MCQS, SIMPLE, EXPANDED])?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![resolve_artifact(self.config, SFT)]));
        }
        let store = self.mcq_store()?;
        let samples = self.all_samples()?;
        let rows = build_sft(&samples, &store)?;
        let total = rows.len();
        let mut outputs: Vec<&str> = vec![SFT];
        if self.config.datasets.holdout_ratio > 0.0 {
            let (train, holdout) =
                seeded_split(rows, self.config.datasets.holdout_ratio, self.config.rng_seed);
            write_jsonl(&resolve_artifact(self.config, SFT), &train)?;
            write_jsonl(&resolve_artifact(self.config, SFT_HOLDOUT), &holdout)?;
            outputs.push(SFT_HOLDOUT);
        } else {
            write_jsonl(&resolve_artifact(self.config, SFT), &rows)?;
        }

        let (drop_counts, filter_counts) = self.upstream_counts();
        let mut stats = self.read_stats();
        stats.sft_count = total;
        stats.drop_counts = drop_counts;
        stats.filter_counts = filter_counts;
        self.write_stats(&stats)?;

        let mut row_counts = BTreeMap::new();
        row_counts.insert("samples_in".into(), samples.len() as u64);
        row_counts.insert("sft_rows".into(), total as u64);
        self.finish(
            stage,
            inputs,
            &outputs.to_vec(),
            &outputs,
            row_counts,
            BTreeMap::new(),
            samples.len() as u64,
            0,
        )
    }

    fn build_dpo(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::BuildDpo;
        let inputs = self.digest_inputs(stage, &[MCQS, SIMPLE, EXPANDED])?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![resolve_artifact(self.config, DPO)]));
        }
        let store = self.mcq_store()?;
        let samples = self.all_samples()?;
        let cap = self.config.datasets.correctness_pair_cap;
        let options = DatasetOptions {
            correctness_pair_cap: if cap == 0 { None } else { Some(cap) },
        };
        let pairs = build_dpo(&samples, &store, &options)?;
        let total = pairs.len();
        let mut by_relation: BTreeMap<String, usize> = BTreeMap::new();
        for pair in &pairs {
            *by_relation.entry(pair.relation.as_str().to_string()).or_insert(0) += 1;
        }
        let mut outputs: Vec<&str> = vec![DPO];
        if self.config.datasets.holdout_ratio > 0.0 {
            let (train, holdout) =
                seeded_split(pairs, self.config.datasets.holdout_ratio, self.config.rng_seed);
            write_jsonl(&resolve_artifact(self.config, DPO), &train)?;
            write_jsonl(&resolve_artifact(self.config, DPO_HOLDOUT), &holdout)?;
            outputs.push(DPO_HOLDOUT);
        } else {
            write_jsonl(&resolve_artifact(self.config, DPO), &pairs)?;
        }

        let (drop_counts, filter_counts) = self.upstream_counts();
        let mut stats = self.read_stats();
        stats.dpo_count_by_relation = by_relation.clone();
        stats.drop_counts = drop_counts;
        stats.filter_counts = filter_counts;
        self.write_stats(&stats)?;

        let mut row_counts = BTreeMap::new();
        row_counts.insert("samples_in".into(), samples.len() as u64);
        row_counts.insert("dpo_pairs".into(), total as u64);
        for (relation, count) in by_relation {
            row_counts.insert(relation, count as u64);
        }
        self.finish(
            stage,
            inputs,
            &outputs.to_vec(),
            &outputs,
            row_counts,
            BTreeMap::new(),
            samples.len() as u64,
            0,
        )
    }

    // -- analytics ----------------------------------------------------------

    fn analyze(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::Analyze;
        let mut input_names = vec![SIMPLE, EXPANDED];
        let rollouts_present = resolve_artifact(self.config, ROLLOUTS).exists();
        let outcomes_present = resolve_artifact(self.config, EVAL_OUTCOMES).exists();
        if rollouts_present {
            input_names.push(ROLLOUTS);
        }
        if outcomes_present {
            input_names.push(EVAL_OUTCOMES);
        }
        let inputs = self.digest_inputs(stage, &input_names)?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![resolve_artifact(self.config, BEHAVIORS_CSV)]));
        }

        let samples = self.all_samples()?;
        let traces: Vec<(String, String)> =
            samples.iter().map(|s| (s.sample_id.clone(), s.trace.render())).collect();

        let tagged: Vec<(String, BehaviorTags)> = match self.config.analyze.tagging {
            TaggingMode::Lexical => traces
                .iter()
                .map(|(id, text)| (id.clone(), tag_behaviors(text)))
                .collect(),
            TaggingMode::Judge => {
                let backend = self.backend(stage)?;
                let cache = self.cache();
                crate::analyze::judge_behaviors(
                    &traces,
                    backend,
                    &cache,
                    &self.config.endpoints.eval_model.model_id,
                    self.config.max_in_flight,
                )
            }
        };
        write_behaviors_csv(&resolve_artifact(self.config, BEHAVIORS_CSV), &tagged)?;

        #[derive(Serialize)]
        struct TraceLengthReport {
            all: Option<LengthStats>,
            simple: Option<LengthStats>,
            expanded: Option<LengthStats>,
        }
        let texts: Vec<&str> = traces.iter().map(|(_, t)| t.as_str()).collect();
        let simple_texts: Vec<String> = samples
            .iter()
            .filter(|s| s.stage == crate::domain::Stage::Simple)
            .map(|s| s.trace.render())
            .collect();
        let expanded_texts: Vec<String> = samples
            .iter()
            .filter(|s| s.stage == crate::domain::Stage::Expanded)
            .map(|s| s.trace.render())
            .collect();
        let report = TraceLengthReport {
            all: length_stats(&texts).ok(),
            simple: length_stats(&simple_texts).ok(),
            expanded: length_stats(&expanded_texts).ok(),
        };
        self.write_json_pretty(TRACE_LENGTHS, &report)?;

        let mut output_names = vec![BEHAVIORS_CSV, TRACE_LENGTHS];
        let mut row_counts = BTreeMap::new();
        row_counts.insert("traces".into(), traces.len() as u64);

        if rollouts_present {
            let rollouts: Vec<QuestionRollouts> =
                read_jsonl(&resolve_artifact(self.config, ROLLOUTS))?;
            let bins = bin_difficulty(&rollouts)?;
            write_difficulty_csv(&resolve_artifact(self.config, DIFFICULTY_CSV), &bins)?;
            output_names.push(DIFFICULTY_CSV);
            row_counts.insert("binned_questions".into(), bins.len() as u64);

            if outcomes_present {
                let outcomes: Vec<EvalOutcome> =
                    read_jsonl(&resolve_artifact(self.config, EVAL_OUTCOMES))?;
                let lengths: Vec<(String, usize)> = outcomes
                    .iter()
                    .map(|o| (o.item_id.clone(), o.response_words))
                    .collect();
                let by_bin = length_by_difficulty(&lengths, &bins)?;
                write_lengths_by_bin_csv(
                    &resolve_artifact(self.config, LENGTHS_BY_BIN_CSV),
                    &by_bin,
                )?;
                output_names.push(LENGTHS_BY_BIN_CSV);
            }
        }

        // CSV bytes depend only on inputs, so the digests chain cleanly.
        self.finish(
            stage,
            inputs,
            &output_names.to_vec(),
            &output_names,
            row_counts,
            BTreeMap::new(),
            traces.len() as u64,
            0,
        )
    }

    // -- evaluation ----------------------------------------------------------

    fn benchmark_items(&self, stage: StageKind) -> Result<Vec<crate::evalharness::BenchmarkItem>, PipelineError> {
        let path = self.config.benchmark_path().ok_or_else(|| PipelineError::MissingUpstream {
            stage: stage.name().to_string(),
            path: "paths.benchmark (unset)".into(),
        })?;
        if !path.exists() {
            return Err(PipelineError::MissingUpstream {
                stage: stage.name().to_string(),
                path: path.display().to_string(),
            });
        }
        Ok(load_benchmark(&path)?)
    }

    fn eval(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::Eval;
        let items = self.apply_limit(self.benchmark_items(stage)?);
        let inputs = self.digest_inputs(stage, &["benchmark"])?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![resolve_artifact(self.config, EVAL_OUTCOMES)]));
        }
        let backend = self.backend(stage)?;
        let cache = self.cache();
        let settings = EvalSettings {
            model_id: self.config.endpoints.eval_model.model_id.clone(),
            mode: self.config.eval.mode,
            max_new_tokens: self.config.eval.max_new_tokens,
            text_only_max_new_tokens: self.config.eval.text_only_max_new_tokens,
        };
        let (outcomes, stats) =
            run_eval(&items, backend, &cache, &settings, self.config.max_in_flight);
        write_jsonl(&resolve_artifact(self.config, EVAL_OUTCOMES), &outcomes)?;
        let summary = score(&items, &outcomes)?;
        self.write_json_pretty(EVAL_SUMMARY, &summary)?;

        let mut row_counts = BTreeMap::new();
        row_counts.insert("items".into(), items.len() as u64);
        row_counts.insert("outcomes".into(), outcomes.len() as u64);
        let mut counters = BTreeMap::new();
        counters.insert("failed_items".into(), stats.failed_items as u64);
        self.finish(
            stage,
            inputs,
            &[EVAL_OUTCOMES, EVAL_SUMMARY],
            &[EVAL_OUTCOMES],
            row_counts,
            counters,
            items.len() as u64,
            stats.failed_items as u64,
        )
    }

    fn rollouts(&self) -> Result<StageReport, PipelineError> {
        let stage = StageKind::Rollouts;
        let items = self.apply_limit(self.benchmark_items(stage)?);
        let inputs = self.digest_inputs(stage, &["benchmark"])?;
        if self.resume_hit(stage, &inputs) {
            return Ok(self.skipped_report(&self.layout.manifest_path(stage)));
        }
        if self.options.dry_run {
            return Ok(self.dry_run_report(vec![resolve_artifact(self.config, ROLLOUTS)]));
        }
        let backend = self.backend(stage)?;
        let cache = self.cache();
        let settings = RolloutSettings {
            model_id: self.config.endpoints.vlm_model.model_id.clone(),
            n: self.config.rollouts.n,
            params: SamplingParams {
                temperature: self.config.rollouts.temperature,
                top_p: 1.0,
                top_k: None,
                repetition_penalty: 1.0,
                n: 1,
                max_new_tokens: self.config.rollouts.max_new_tokens,
            },
            mode: self.config.rollouts.mode,
        };
        let (rollouts, stats) =
            run_rollouts(&items, backend, &cache, &settings, self.config.max_in_flight);
        write_jsonl(&resolve_artifact(self.config, ROLLOUTS), &rollouts)?;

        let mut row_counts = BTreeMap::new();
        row_counts.insert("items".into(), items.len() as u64);
        row_counts.insert("rollouts".into(), rollouts.len() as u64);
        let mut counters = BTreeMap::new();
        counters.insert("failed_items".into(), stats.failed_items as u64);
        self.finish(
            stage,
            inputs,
            &[ROLLOUTS],
            &[ROLLOUTS],
            row_counts,
            counters,
            items.len() as u64,
            stats.failed_items as u64,
        )
    }
}
