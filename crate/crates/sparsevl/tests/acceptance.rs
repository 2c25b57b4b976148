//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use sparsevl::experiment::{self, SeedStudy};
use sparsevl::task::TaskSpec;
use sparsevl::verify::{self, VerifyOptions, LOGIT_TOLERANCE};
use sparsevl_core::cost::{GOLDEN_TABLE, GOLDEN_TOLERANCE_TERA};
use sparsevl_core::model::{ModelWeights, SequenceState};
use sparsevl_core::predictor::{self, PredictorWeights, KEEP};
use sparsevl_core::sparse::{self, AdmissionLog, BatchDecoder, GenerationMode, Selection, SparsityConfig};
use sparsevl_core::{rng, Matrix};

const GOLDEN_BUDGET: Duration = Duration::from_secs(1);
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(120);
const STUDY_BUDGET: Duration = Duration::from_secs(600);
const STUDY_SEEDS: u64 = 5;
const STUDY_STEPS: usize = 2000;
const RATE_TOLERANCE: f64 = 0.05;
const LONG_DECODE_STEPS: usize = 4096;
const SIGN_TEST_ALPHA: f64 = 0.05;
const BATCH_TOLERANCE: f64 = 1e-9;

struct Outcome {
    id: &'static str,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: &'static str, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, name, passed, detail }
}

fn from_suite(id: &'static str, name: &'static str, s: &verify::SuiteReport, extra: bool, note: String) -> Outcome {
    let detail = format!("{}/{} cases ok, worst {:.3e}; {note} {}", s.cases - s.failures, s.cases, s.worst, s.detail);
    outcome(id, name, s.passed && extra, detail)
}

fn c1_golden_flops() -> Outcome {
    let t0 = Instant::now();
    let s = verify::golden_suite();
    let errata_flagged = GOLDEN_TABLE
        .iter()
        .filter(|r| r.erratum)
        .all(|r| !r.matches(GOLDEN_TOLERANCE_TERA));
    let dt = t0.elapsed();
    let fast = dt < GOLDEN_BUDGET;
    from_suite("C1", "golden-flops", &s, fast && errata_flagged, format!("{dt:?}, errata flagged {errata_flagged};"))
}

fn c2_topk_counts() -> Outcome {
    let mut r = rng::seeded(2);
    let d = Matrix::from_rows(&(0..576).map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect::<Vec<_>>());
    let kept = predictor::select_topk_keep(&d, 0.2).unwrap_or_default();
    let mut order: Vec<usize> = (0..576).collect();
    order.sort_by(|&a, &b| d.get(b, KEEP).total_cmp(&d.get(a, KEEP)));
    let mut top: Vec<usize> = order[..115].to_vec();
    top.sort_unstable();
    let k576 = predictor::keep_count(0.2, 576);
    let k144 = predictor::keep_count(0.4, 144);
    let ok = kept.len() == 115 && kept == top && k576 == 115 && k144 == 57;
    outcome("C2", "topk-counts", ok, format!("select {} of 576 (top scores {}), floor(0.2*576)={k576}, floor(0.4*144)={k144}", kept.len(), kept == top))
}

fn c3_mode_equivalence() -> Outcome {
    let t0 = Instant::now();
    let opts = VerifyOptions::default();
    let s = verify::equivalence_suite(&opts, None);
    let dt = t0.elapsed();
    let dims = verify::equivalence_dims();
    let note = format!(
        "{} models L={} d={} h={}, {dt:.1?};",
        opts.equivalence_models, dims.num_layers, dims.hidden_dim, dims.num_heads
    );
    from_suite("C3", "cache-equivalence", &s, dt < EQUIVALENCE_BUDGET, note)
}

fn c4_masked_softmax() -> Outcome {
    let s = verify::masked_suite(&VerifyOptions::default());
    from_suite("C4", "masked-equals-hard-drop", &s, true, String::new())
}

fn c5_stability() -> Outcome {
    let opts = VerifyOptions::default();
    let s = verify::stability_suite(&opts);
    from_suite("C5", "decision-stability", &s, true, format!("{} tokens per run;", opts.stability_tokens))
}

fn c6_gradients() -> Outcome {
    let s = verify::gradient_suite(&VerifyOptions::default());
    from_suite("C6", "gradient-check", &s, true, String::new())
}

fn c7_convergence(studies: &[SeedStudy], elapsed: Duration) -> Outcome {
    let mut ok = elapsed < STUDY_BUDGET;
    let mut parts = Vec::new();
    for s in studies {
        let f = &s.learned_final;
        let c = &s.control_final;
        let rates = (f.image_keep_fraction - 0.2).abs() <= RATE_TOLERANCE && (f.output_keep_fraction - 0.5).abs() <= RATE_TOLERANCE;
        let beats = f.cross_entropy < c.cross_entropy;
        ok &= rates && beats;
        parts.push(format!(
            "seed {}: keep {:.3}/{:.3} ce {:.4} vs control {:.4}",
            s.seed, f.image_keep_fraction, f.output_keep_fraction, f.cross_entropy, c.cross_entropy
        ));
    }
    ok &= studies.len() == STUDY_SEEDS as usize;
    outcome("C7", "training-convergence", ok, format!("{} steps, {elapsed:.0?}; {}", STUDY_STEPS, parts.join("; ")))
}

/// Cached generation far past training lengths with the seed-0 predictor.
fn c8_long_decode(study: Option<&SeedStudy>) -> Outcome {
    let Some(study) = study else {
        return outcome("C8", "long-decode-admission", false, "no trained run".into());
    };
    let run = || -> sparsevl_core::Result<(usize, usize, usize)> {
        let smp = TaskSpec::default().sample(experiment::EVAL_SPLIT, 0);
        let need = smp.image_features.len() + smp.text_ids.len() + LONG_DECODE_STEPS;
        let model = study.learned.model.with_max_seq_len(need, 4096)?;
        let state = model.embed_inputs(&smp.image_features, &smp.text_ids)?;
        let cfg = SparsityConfig {
            sparsify_layer: experiment::STUDY_SPARSIFY_LAYER,
            selection: Selection::Topk,
            ..SparsityConfig::default()
        };
        let g = sparse::sparse_generate(&model, &study.learned.predictor, &state, &cfg, LONG_DECODE_STEPS, GenerationMode::WithCache, false)?;
        let lens = g.cache_lens.unwrap_or_default();
        let prefill_deep = g.image_keep.len() + state.n_text();
        let deep = lens[cfg.sparsify_layer..].iter().map(|&n| n - prefill_deep).min().unwrap_or(0);
        Ok((deep, g.admitted.len(), g.steps.len()))
    };
    match run() {
        Ok((deep, fed, steps)) => {
            let frac = deep as f64 / fed.max(1) as f64;
            let ok = steps == LONG_DECODE_STEPS && (frac - 0.5).abs() <= RATE_TOLERANCE;
            outcome("C8", "long-decode-admission", ok, format!("{steps} steps, {deep} of {fed} outputs cached beyond l ({frac:.3})"))
        }
        Err(e) => outcome("C8", "long-decode-admission", false, e.to_string()),
    }
}

fn c9_policy_comparison(studies: &[SeedStudy]) -> Outcome {
    let n = studies.len();
    let rand_wins = studies.iter().filter(|s| s.eval_random.cross_entropy > s.eval_learned.cross_entropy).count();
    let struct_wins = studies.iter().filter(|s| s.eval_structure.cross_entropy > s.eval_learned.cross_entropy).count();
    let p_rand = experiment::sign_test_p(rand_wins, n);
    let p_struct = experiment::sign_test_p(struct_wins, n);
    let ok = n == STUDY_SEEDS as usize && p_rand < SIGN_TEST_ALPHA && p_struct < SIGN_TEST_ALPHA;
    let losses: Vec<String> = studies
        .iter()
        .map(|s| format!("{:.4}/{:.4}/{:.4}", s.eval_learned.cross_entropy, s.eval_random.cross_entropy, s.eval_structure.cross_entropy))
        .collect();
    outcome(
        "C9",
        "learned-beats-baselines",
        ok,
        format!("random worse {rand_wins}/{n} (p={p_rand:.4}), structure worse {struct_wins}/{n} (p={p_struct:.4}); learned/random/structure {}", losses.join(" ")),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn batch_states(model: &ModelWeights, b: usize, seed: u64, outputs: bool) -> Vec<SequenceState> {
    let mut r = rng::seeded(seed);
    let mc = model.config;
    (0..b)
        .map(|_| {
            let n_img = r.gen_range(5..=16);
            let feats: Vec<Vec<f64>> = (0..n_img).map(|_| (0..mc.image_feature_dim).map(|_| rng::normal(&mut r)).collect()).collect();
            let text: Vec<usize> = (0..r.gen_range(1..=4)).map(|_| r.gen_range(1..mc.vocab_size)).collect();
            let mut s = model.embed_inputs(&feats, &text).expect("fits");
            if outputs {
                for _ in 0..r.gen_range(0..10) {
                    s.push_output(model, r.gen_range(1..mc.vocab_size)).expect("fits");
                }
            }
            s
        })
        .collect()
}

/// Worst logit deviation and decision mismatches of one batched trial.
fn batch_trial(m: &ModelWeights, p: &PredictorWeights, b: usize, seed: u64, cfg: &SparsityConfig) -> sparsevl_core::Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut mismatches = 0;

    let states = batch_states(m, b, rng::mix(seed, 1), true);
    for (st, bd) in states.iter().zip(sparse::batch_sparse_decode_no_cache(m, p, &states, cfg)?) {
        let single = sparse::sparse_decode_no_cache(m, p, st, cfg)?;
        mismatches += usize::from(single.image_keep != bd.image_keep || single.output_mask != bd.output_mask);
        worst = worst.max(max_diff(&single.logits, &bd.logits));
    }

    let prompts = batch_states(m, b, rng::mix(seed, 2), false);
    let bp = sparse::batch_sparse_prefill(m, p, &prompts, cfg)?;
    let mut dec = BatchDecoder::new(bp.caches);
    let mut singles = Vec::new();
    for (i, st) in prompts.iter().enumerate() {
        let sp = sparse::sparse_prefill(m, p, st, cfg)?;
        mismatches += usize::from(sp.image_keep != bp.image_keep[i]);
        worst = worst.max(max_diff(&sp.logits, &bp.logits[i]));
        singles.push((sp.cache, AdmissionLog::new()));
    }
    let mut r = rng::seeded(rng::mix(seed, 3));
    for step in 0..12 {
        let pos: Vec<usize> = prompts.iter().map(|s| s.n_prefill() + step).collect();
        let rows: Vec<Vec<f64>> = pos
            .iter()
            .map(|&q| m.embed_token(r.gen_range(1..m.config.vocab_size), q))
            .collect::<sparsevl_core::Result<_>>()?;
        let logits = dec.step(m, p, &rows, &pos, cfg)?;
        for (i, (cache, log)) in singles.iter_mut().enumerate() {
            let sl = sparse::sparse_decode_with_cache(m, p, cache, log, &rows[i], pos[i], cfg)?;
            worst = worst.max(max_diff(&sl, &logits[i]));
            mismatches += usize::from(*log != dec.admissions[i]);
        }
    }
    Ok((worst, mismatches))
}

fn c10_batch_parity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let mut trials = 0;
    let mut errors = Vec::new();
    for b in [2usize, 4, 8] {
        for t in 0..4u64 {
            let seed = rng::mix(b as u64, 1000 + t);
            let (m, p, _) = verify::random_case(verify::small_dims(), seed);
            let cfg = SparsityConfig {
                selection: if t % 2 == 0 { Selection::Topk } else { Selection::Argmax },
                ..SparsityConfig::default()
            };
            trials += 1;
            match batch_trial(&m, &p, b, seed, &cfg) {
                Ok((w, mis)) => {
                    worst = worst.max(w);
                    bad += usize::from(mis > 0 || w > BATCH_TOLERANCE);
                }
                Err(e) => {
                    bad += 1;
                    errors.push(e.to_string());
                }
            }
        }
    }
    outcome("C10", "batch-parity", bad == 0, format!("{}/{trials} trials over B=2,4,8 ok, worst {worst:.3e} {}", trials - bad, errors.join("; ")))
}

fn main() -> ExitCode {
    assert!(LOGIT_TOLERANCE <= BATCH_TOLERANCE);
    let mut results = vec![
        c1_golden_flops(),
        c2_topk_counts(),
        c3_mode_equivalence(),
        c4_masked_softmax(),
        c5_stability(),
        c6_gradients(),
    ];

    let t0 = Instant::now();
    let mut studies = Vec::new();
    let mut study_error = None;
    for seed in 0..STUDY_SEEDS {
        match experiment::seed_study(seed, STUDY_STEPS) {
            Ok(s) => studies.push(s),
            Err(e) => {
                study_error = Some(e.to_string());
                break;
            }
        }
    }
    let elapsed = t0.elapsed();
    let mut c7 = c7_convergence(&studies, elapsed);
    if let Some(e) = &study_error {
        c7.detail.push_str(&format!("; error: {e}"));
    }
    results.push(c7);
    results.push(c8_long_decode(studies.first()));
    results.push(c9_policy_comparison(&studies));
    results.push(c10_batch_parity());

    for r in &results {
        println!("{} {} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.id, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
