//! FLOPs and KV-memory ledger.
//!
//! All counts are exact `u128` integers; floats appear only in ratios and
//! formatted strings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Per-layer prefill FLOPs `32·B·N·C² + 4·B·N²·C`.
pub fn layer_flops(batch: u64, tokens: u64, hidden: u64) -> u128 {
    let (b, n, c) = (batch as u128, tokens as u128, hidden as u128);
    32 * b * n * c * c + 4 * b * n * n * c
}

/// Per-layer matmul FLOPs of the engine's decoder block with feed-forward
/// width `ffn`: four `C×C` projections, two `C×F` feed-forward matmuls and
/// the two attention products. Equals [`layer_flops`] when `ffn = 6·C`.
pub fn layer_flops_with_ffn(batch: u64, tokens: u64, hidden: u64, ffn: u64) -> u128 {
    let (b, n, c, f) = (batch as u128, tokens as u128, hidden as u128, ffn as u128);
    b * (8 * n * c * c + 4 * n * c * f + 4 * n * n * c)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModelSpec {
    pub batch: u64,
    pub hidden: u64,
    /// Token count seen by each layer.
    pub schedule: Vec<u64>,
    /// Number of leading layers that see the full token set.
    pub sparsify_layer: usize,
    pub bytes_per_value: u64,
}

impl CostModelSpec {
    /// Every layer sees `tokens`.
    pub fn uniform(num_layers: usize, tokens: u64, hidden: u64) -> Self {
        Self {
            batch: 1,
            hidden,
            schedule: alloc::vec![tokens; num_layers],
            sparsify_layer: num_layers,
            bytes_per_value: 2,
        }
    }

    /// `l` layers at `full` tokens followed by `L − l` layers at `reduced`.
    pub fn sparsified(num_layers: usize, l: usize, full: u64, reduced: u64, hidden: u64) -> Result<Self> {
        if l > num_layers {
            return Err(Error::InvalidConfig(format!(
                "sparsify layer {l} beyond {num_layers} layers"
            )));
        }
        let mut schedule = alloc::vec![full; l];
        schedule.extend(core::iter::repeat(reduced).take(num_layers - l));
        Ok(Self {
            batch: 1,
            hidden,
            schedule,
            sparsify_layer: l,
            bytes_per_value: 2,
        })
    }

    /// Builds a spec from `(layer count, tokens)` runs.
    pub fn from_runs(runs: &[(usize, u64)], hidden: u64) -> Self {
        let mut schedule = Vec::new();
        for &(layers, n) in runs {
            schedule.extend(core::iter::repeat(n).take(layers));
        }
        let sparsify_layer = runs.first().map_or(0, |r| r.0);
        Self {
            batch: 1,
            hidden,
            schedule,
            sparsify_layer,
            bytes_per_value: 2,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.schedule.len()
    }
}

/// `Σ_l layer_flops(B, N_l, C)`.
pub fn prefill_flops(spec: &CostModelSpec) -> u128 {
    spec.schedule
        .iter()
        .map(|&n| layer_flops(spec.batch, n, spec.hidden))
        .sum()
}

fn ceil_rate(rate: f64, t: u64) -> u64 {
    libm::ceil(rate * t as f64 - 1e-9) as u64
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("kept fraction {rate} outside (0, 1]")))
    }
}

/// No-cache decoding FLOPs for steps `t = 1..=steps`.
///
/// Layers `< sparsify_layer` process `N_l + t` tokens, later layers process
/// `survivors + ⌈r_ot·t⌉`.
pub fn decode_flops_trajectory(
    spec: &CostModelSpec,
    survivors: u64,
    r_ot: f64,
    steps: u64,
) -> Result<Vec<u128>> {
    check_rate(r_ot)?;
    Ok((1..=steps)
        .map(|t| {
            spec.schedule
                .iter()
                .enumerate()
                .map(|(li, &n)| {
                    let tokens = if li < spec.sparsify_layer {
                        n + t
                    } else {
                        survivors + ceil_rate(r_ot, t)
                    };
                    layer_flops(spec.batch, tokens, spec.hidden)
                })
                .sum()
        })
        .collect())
}

/// Which generated tokens enter the caches beyond the sparsification layer.
#[derive(Clone, Copy, Debug)]
pub enum OutputAdmission<'a> {
    /// `⌈r·t⌉` admitted after `t` steps.
    Rate(f64),
    /// Recorded decisions, one per step.
    Flags(&'a [bool]),
}

/// KV bytes `Σ_l 2·entries_l(t)·C·bytes` for `t = 0..=steps`, where
/// `prefill_entries[l]` is the cache size of layer `l` after prefill.
pub fn kv_memory_trajectory(
    spec: &CostModelSpec,
    prefill_entries: &[u64],
    admission: OutputAdmission<'_>,
    steps: u64,
) -> Result<Vec<u128>> {
    if prefill_entries.len() != spec.num_layers() {
        return Err(Error::ShapeMismatch {
            op: "kv_memory_trajectory",
            lhs: (spec.num_layers(), 1),
            rhs: (prefill_entries.len(), 1),
        });
    }
    let admitted_at = |t: u64| -> Result<u64> {
        match admission {
            OutputAdmission::Rate(r) => {
                check_rate(r)?;
                Ok(ceil_rate(r, t))
            }
            OutputAdmission::Flags(f) => {
                if t as usize > f.len() {
                    return Err(Error::ShapeMismatch {
                        op: "kv_memory_trajectory flags",
                        lhs: (t as usize, 1),
                        rhs: (f.len(), 1),
                    });
                }
                Ok(f[..t as usize].iter().filter(|&&a| a).count() as u64)
            }
        }
    };
    let per_entry = 2 * spec.hidden as u128 * spec.bytes_per_value as u128 * spec.batch as u128;
    let mut out = Vec::with_capacity(steps as usize + 1);
    let mut admitted = 0;
    for t in 0..=steps {
        if t > 0 {
            admitted = admitted_at(t)?;
        }
        let entries: u128 = prefill_entries
            .iter()
            .enumerate()
            .map(|(li, &e)| {
                let extra = if li < spec.sparsify_layer { t } else { admitted };
                (e + extra) as u128
            })
            .sum();
        out.push(entries * per_entry);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub prefill_flops: u128,
    pub decode_flops: Vec<u128>,
    pub kv_bytes: Vec<u128>,
}

impl CostReport {
    pub fn decode_total(&self) -> u128 {
        self.decode_flops.iter().sum()
    }

    pub fn final_kv_bytes(&self) -> u128 {
        self.kv_bytes.last().copied().unwrap_or(0)
    }

    /// Prefill report with empty trajectories.
    pub fn prefill_only(spec: &CostModelSpec) -> Self {
        Self {
            prefill_flops: prefill_flops(spec),
            decode_flops: Vec::new(),
            kv_bytes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldDelta {
    pub field: &'static str,
    pub baseline: u128,
    pub value: u128,
    /// `value − baseline`.
    pub absolute: i128,
    /// Relative change in percent; 0 when the baseline is 0.
    pub percent: f64,
}

fn delta(field: &'static str, baseline: u128, value: u128) -> FieldDelta {
    let absolute = value as i128 - baseline as i128;
    let percent = if baseline == 0 {
        0.0
    } else {
        absolute as f64 / baseline as f64 * 100.0
    };
    FieldDelta {
        field,
        baseline,
        value,
        absolute,
        percent,
    }
}

/// Absolute and percentage change of `b` relative to baseline `a`.
pub fn compare_reports(a: &CostReport, b: &CostReport) -> Vec<FieldDelta> {
    alloc::vec![
        delta("prefill_flops", a.prefill_flops, b.prefill_flops),
        delta("decode_flops_total", a.decode_total(), b.decode_total()),
        delta("kv_bytes_final", a.final_kv_bytes(), b.final_kv_bytes()),
    ]
}

pub fn tera(flops: u128) -> f64 {
    flops as f64 / 1e12
}

/// One-decimal terabyte string, e.g. `10.1T`.
pub fn format_tera(flops: u128) -> String {
    format!("{:.1}T", tera(flops))
}

/// Bytes in gigabytes (`1e9`) with two decimals.
pub fn format_gb(bytes: u128) -> String {
    format!("{:.2}GB", bytes as f64 / 1e9)
}

/// A row of the reference per-model FLOPs table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoldenRow {
    pub scenario: &'static str,
    pub model: &'static str,
    pub hidden: u64,
    /// `(layer count, tokens)` runs.
    pub runs: &'static [(usize, u64)],
    pub printed_tera: f64,
    /// The printed term uses `4·B·N·C` instead of `4·B·N²·C` in some run.
    pub linear_second_term: bool,
    /// Printed value is not reproducible from its own expression.
    pub erratum: bool,
}

impl GoldenRow {
    pub fn spec(&self) -> CostModelSpec {
        CostModelSpec::from_runs(self.runs, self.hidden)
    }

    pub fn flops(&self) -> u128 {
        prefill_flops(&self.spec())
    }

    pub fn matches(&self, tol_tera: f64) -> bool {
        libm::fabs(tera(self.flops()) - self.printed_tera) <= tol_tera
    }
}

const fn row(
    scenario: &'static str,
    model: &'static str,
    hidden: u64,
    runs: &'static [(usize, u64)],
    printed_tera: f64,
) -> GoldenRow {
    GoldenRow {
        scenario,
        model,
        hidden,
        runs,
        printed_tera,
        linear_second_term: false,
        erratum: false,
    }
}

pub const GOLDEN_TOLERANCE_TERA: f64 = 0.05;

pub const GOLDEN_TABLE: &[GoldenRow] = &[
    GoldenRow {
        linear_second_term: true,
        ..row("llava7b-full", "LLaVA-1.5-7B", 4096, &[(32, 576)], 10.1)
    },
    row("prumerge7b", "LLaVA-PruMerge+ (7B)", 4096, &[(32, 146)], 2.5),
    row("fastv7b", "LLaVA-FastV (7B)", 4096, &[(3, 576), (29, 144)], 3.2),
    row("voco7b", "VoCo-LLaMA (7B)", 4096, &[(32, 128)], 2.2),
    GoldenRow {
        erratum: true,
        ..row("hired7b", "LLaVA-HiRED (7B)", 4096, &[(32, 115)], 2.07)
    },
    GoldenRow {
        linear_second_term: true,
        ..row("dynamic7b", "Dynamic-LLaVA (7B)", 4096, &[(2, 576), (30, 115)], 2.5)
    },
    row("llava13b-full", "LLaVA-1.5-13B", 5120, &[(40, 576)], 19.6),
    row("prumerge13b", "LLaVA-PruMerge+ (13B)", 5120, &[(40, 146)], 4.9),
    row("fastv13b", "LLaVA-FastV (13B)", 5120, &[(3, 576), (37, 144)], 6.0),
    row("voco13b", "VoCo-LLaMA (13B)", 5120, &[(40, 128)], 4.3),
    row("hired13b", "LLaVA-HiRED (13B)", 5120, &[(40, 115)], 3.9),
    row("dynamic13b", "Dynamic-LLaVA (13B)", 5120, &[(2, 576), (38, 115)], 4.7),
    row("tokenpacker7b-144", "LLaVA-TokenPacker-7B-144Token", 4096, &[(32, 144)], 2.5),
    row("tokenpacker7b-64", "LLaVA-TokenPacker-7B-64Token", 4096, &[(32, 64)], 1.1),
    row("tokenpacker-fastv7b", "LLaVA-TokenPacker-FastV-7B", 4096, &[(3, 144), (29, 72)], 1.4),
    row("dynamic-tokenpacker7b", "Dynamic-LLaVA-TokenPacker-7B", 4096, &[(2, 144), (30, 57)], 1.1),
    GoldenRow {
        erratum: true,
        ..row("tokenpacker13b-144", "LLaVA-TokenPacker-13B-144Token", 5120, &[(40, 144)], 4.9)
    },
    row("tokenpacker13b-64", "LLaVA-TokenPacker-13B-64Token", 5120, &[(40, 64)], 2.2),
    row("tokenpacker-fastv13b", "LLaVA-TokenPacker-FastV-13B", 5120, &[(3, 144), (37, 72)], 2.6),
    row("dynamic-tokenpacker13b", "Dynamic-LLaVA-TokenPacker-13B", 5120, &[(2, 144), (38, 57)], 2.1),
];

pub fn golden_row(scenario: &str) -> Option<&'static GoldenRow> {
    GOLDEN_TABLE.iter().find(|r| r.scenario == scenario)
}
