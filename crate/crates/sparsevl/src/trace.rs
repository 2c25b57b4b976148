//! Generation traces and cost reports as versioned JSON records.

use serde::{Deserialize, Serialize};
use sparsevl_core::cost::{self, CostModelSpec, CostReport, OutputAdmission};
use sparsevl_core::model::ModelConfig;
use sparsevl_core::sparse::{GenerationMode, SparseGeneration};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const COST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    NoCache,
    WithCache,
}

impl From<GenerationMode> for ModeName {
    fn from(m: GenerationMode) -> Self {
        match m {
            GenerationMode::NoCache => ModeName::NoCache,
            GenerationMode::WithCache => ModeName::WithCache,
        }
    }
}

impl From<ModeName> for GenerationMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::NoCache => GenerationMode::NoCache,
            ModeName::WithCache => GenerationMode::WithCache,
        }
    }
}

/// Per-step record; `admitted` is the keep decision of the token fed back
/// after this step (absent for the final token, which is never fed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: usize,
    pub position: usize,
    pub token: usize,
    pub admitted: Option<bool>,
    /// Output tokens admitted beyond the sparsification layer so far.
    pub admitted_total: usize,
    /// Layer-summed FLOPs of a no-cache decoding step at this length.
    pub no_cache_flops: String,
    /// K/V bytes held by the cache after this step's input was appended.
    pub kv_bytes: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub schema_version: u32,
    pub mode: ModeName,
    pub n_image: usize,
    pub text_ids: Vec<usize>,
    pub image_keep: Vec<usize>,
    pub image_keep_count: usize,
    pub tokens: Vec<usize>,
    pub steps: Vec<TraceStep>,
    /// Per-layer cache lengths at the end (with-cache mode).
    pub cache_lens: Option<Vec<usize>>,
}

/// Builds a trace; costs use the canonical per-layer formula at the toy
/// width with 8-byte values.
pub fn build_trace(
    model: &ModelConfig,
    sparsify_layer: usize,
    n_image: usize,
    text_ids: &[usize],
    mode: GenerationMode,
    generation: &SparseGeneration,
) -> GenerationTrace {
    let n_prefill = n_image + text_ids.len();
    let survivors = generation.image_keep.len() + text_ids.len();
    let c = model.hidden_dim as u64;
    let mut admitted_total = 0;
    let steps = generation
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let admitted = generation.admitted.get(i).copied();
            let fed = i as u64;
            let deep = (survivors + admitted_total) as u64;
            let flops: u128 = (0..model.num_layers)
                .map(|l| {
                    let n = if l < sparsify_layer { n_prefill as u64 + fed } else { deep };
                    cost::layer_flops(1, n, c)
                })
                .sum();
            let entries: u128 = (0..model.num_layers)
                .map(|l| if l < sparsify_layer { n_prefill as u128 + fed as u128 } else { deep as u128 })
                .sum();
            if admitted == Some(true) {
                admitted_total += 1;
            }
            TraceStep {
                index: i,
                position: n_prefill + i,
                token: s.token,
                admitted,
                admitted_total,
                no_cache_flops: flops.to_string(),
                kv_bytes: (entries * 2 * c as u128 * 8).to_string(),
            }
        })
        .collect();
    GenerationTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        mode: mode.into(),
        n_image,
        text_ids: text_ids.to_vec(),
        image_keep: generation.image_keep.clone(),
        image_keep_count: generation.image_keep.len(),
        tokens: generation.tokens(),
        steps,
        cache_lens: generation.cache_lens.clone(),
    }
}

/// A cost report with exact counts serialized as decimal strings (they can
/// exceed `2^53`) next to their formatted forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub schema_version: u32,
    pub scenario: String,
    pub batch: u64,
    pub hidden: u64,
    pub schedule: Vec<u64>,
    pub sparsify_layer: usize,
    pub prefill_flops: String,
    pub prefill_tera: String,
    pub printed_tera: Option<f64>,
    pub matches_printed: Option<bool>,
    pub erratum: bool,
    pub linear_second_term: bool,
    pub decode_flops_total: String,
    pub final_kv_bytes: String,
    pub final_kv_gb: String,
    pub deltas: Vec<DeltaRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub field: String,
    pub baseline: String,
    pub value: String,
    pub absolute: String,
    pub percent: f64,
}

pub fn cost_record(
    scenario: &str,
    spec: &CostModelSpec,
    report: &CostReport,
    baseline: Option<&CostReport>,
) -> CostRecord {
    let golden = cost::golden_row(scenario);
    CostRecord {
        schema_version: COST_SCHEMA_VERSION,
        scenario: scenario.to_string(),
        batch: spec.batch,
        hidden: spec.hidden,
        schedule: spec.schedule.clone(),
        sparsify_layer: spec.sparsify_layer,
        prefill_flops: report.prefill_flops.to_string(),
        prefill_tera: cost::format_tera(report.prefill_flops),
        printed_tera: golden.map(|g| g.printed_tera),
        matches_printed: golden.map(|g| g.matches(cost::GOLDEN_TOLERANCE_TERA)),
        erratum: golden.is_some_and(|g| g.erratum),
        linear_second_term: golden.is_some_and(|g| g.linear_second_term),
        decode_flops_total: report.decode_total().to_string(),
        final_kv_bytes: report.final_kv_bytes().to_string(),
        final_kv_gb: cost::format_gb(report.final_kv_bytes()),
        deltas: baseline
            .map(|b| {
                cost::compare_reports(b, report)
                    .into_iter()
                    .map(|d| DeltaRecord {
                        field: d.field.to_string(),
                        baseline: d.baseline.to_string(),
                        value: d.value.to_string(),
                        absolute: d.absolute.to_string(),
                        percent: d.percent,
                    })
                    .collect()
            })
            .unwrap_or_default(),
    }
}

/// Prefill report plus, when `steps > 0`, decode and KV trajectories at
/// output keep rate `r_ot`.
pub fn cost_report(spec: &CostModelSpec, survivors: u64, r_ot: f64, steps: u64) -> sparsevl_core::Result<CostReport> {
    if steps == 0 {
        return Ok(CostReport::prefill_only(spec));
    }
    let prefill_entries: Vec<u64> = spec.schedule.clone();
    Ok(CostReport {
        prefill_flops: cost::prefill_flops(spec),
        decode_flops: cost::decode_flops_trajectory(spec, survivors, r_ot, steps)?,
        kv_bytes: cost::kv_memory_trajectory(spec, &prefill_entries, OutputAdmission::Rate(r_ot), steps)?,
    })
}
