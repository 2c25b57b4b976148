//! Self-check suites run by `sparsevl verify` and the acceptance tests.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sparsevl_core::autodiff::{self, Tape, Var};
use sparsevl_core::cost::{self, GOLDEN_TABLE, GOLDEN_TOLERANCE_TERA};
use sparsevl_core::model::{ModelConfig, ModelWeights, SequenceState};
use sparsevl_core::predictor::{PredictorConfig, PredictorWeights, KEEP};
use sparsevl_core::sparse::{self, GenerationMode, Selection, SparsityConfig};
use sparsevl_core::train::{self, ForwardMasks, MaskPolicy, TrainConfig, TrainingSample};
use sparsevl_core::{rng, MaskMatrix, Matrix};

use crate::checkpoint::Checkpoint;

/// Tolerances shared with the acceptance tests.
pub const LOGIT_TOLERANCE: f64 = 1e-9;
pub const HIDDEN_TOLERANCE: f64 = 1e-9;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Largest deviation seen (suite-specific units).
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &str, cases: usize, failures: usize, worst: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: failures == 0 && cases > 0,
            cases,
            failures,
            worst,
            detail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub equivalence_models: usize,
    pub equivalence_tokens: usize,
    pub stability_runs: usize,
    pub stability_tokens: usize,
    pub masked_pairs: usize,
    pub gradient_probes: usize,
    /// STE adjoint multiplier; 1 is correct, anything else is a mutation.
    pub ste_adjoint_scale: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            equivalence_models: 100,
            equivalence_tokens: 16,
            stability_runs: 100,
            stability_tokens: 64,
            masked_pairs: 100,
            gradient_probes: 50,
            ste_adjoint_scale: 1.0,
        }
    }
}

/// Toy dimensions of the mode-equivalence suite.
pub fn equivalence_dims() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        hidden_dim: 64,
        num_heads: 4,
        ffn_dim: 128,
        vocab_size: 48,
        max_seq_len: 96,
        image_feature_dim: 16,
    }
}

/// Smaller toy dimensions for the stability and masking suites.
pub fn small_dims() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        hidden_dim: 32,
        num_heads: 4,
        ffn_dim: 64,
        vocab_size: 32,
        max_seq_len: 96,
        image_feature_dim: 12,
    }
}

fn predictor_for(mc: &ModelConfig) -> PredictorConfig {
    PredictorConfig {
        width: 16,
        num_heads: 2,
        ..PredictorConfig::for_model(mc)
    }
}

/// Random model, predictor and prompt drawn from `seed`.
pub fn random_case(mc: ModelConfig, seed: u64) -> (ModelWeights, PredictorWeights, SequenceState) {
    let model = ModelWeights::random(mc, rng::mix(seed, 1)).expect("valid dims");
    let mut predictor = PredictorWeights::random(predictor_for(&mc), rng::mix(seed, 2)).expect("valid dims");
    let mut r = rng::seeded(rng::mix(seed, 3));
    // Spread keep/drop biases so decisions are mixed rather than one-sided.
    let bias = r.gen_range(-1.0..1.0);
    predictor.output.head.b3.set(0, KEEP, bias);
    predictor.image.head.b3.set(0, KEEP, r.gen_range(-1.0..1.0));
    let n_image = r.gen_range(5..=16);
    let n_text = r.gen_range(1..=6);
    let features: Vec<Vec<f64>> = (0..n_image)
        .map(|_| (0..mc.image_feature_dim).map(|_| rng::normal(&mut r)).collect())
        .collect();
    let text: Vec<usize> = (0..n_text).map(|_| r.gen_range(1..mc.vocab_size)).collect();
    let state = model.embed_inputs(&features, &text).expect("valid prompt");
    (model, predictor, state)
}

fn sparsity_for(seed: u64) -> SparsityConfig {
    SparsityConfig {
        selection: if seed % 2 == 0 { Selection::Topk } else { Selection::Argmax },
        ..SparsityConfig::default()
    }
}

pub fn golden_suite() -> SuiteReport {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for row in GOLDEN_TABLE {
        let got = cost::tera(row.flops());
        let dev = (got - row.printed_tera).abs();
        let ok = row.matches(GOLDEN_TOLERANCE_TERA);
        let tag = if row.erratum {
            "erratum"
        } else if ok {
            "ok"
        } else {
            "FAIL"
        };
        if !row.erratum {
            worst = worst.max(dev);
            if !ok {
                failures += 1;
            }
        }
        lines.push(format!("{}={:.3}T/{:.1}T:{tag}", row.scenario, got, row.printed_tera));
    }
    let cases = GOLDEN_TABLE.iter().filter(|r| !r.erratum).count();
    SuiteReport::new("golden-table", cases, failures, worst, lines.join(" "))
}

/// Cached and no-cache sparsified generation agree on every token and on
/// every step's logits.
pub fn equivalence_case(model: &ModelWeights, p: &PredictorWeights, state: &SequenceState, cfg: &SparsityConfig, tokens: usize) -> sparsevl_core::Result<(bool, f64)> {
    let a = sparse::sparse_generate(model, p, state, cfg, tokens, GenerationMode::NoCache, false)?;
    let b = sparse::sparse_generate(model, p, state, cfg, tokens, GenerationMode::WithCache, false)?;
    let mut worst: f64 = 0.0;
    for (x, y) in a.steps.iter().zip(&b.steps) {
        for (u, v) in x.logits.iter().zip(&y.logits) {
            worst = worst.max((u - v).abs());
        }
    }
    let same = a.tokens() == b.tokens() && a.image_keep == b.image_keep && a.admitted == b.admitted;
    Ok((same && worst <= LOGIT_TOLERANCE, worst))
}

pub fn equivalence_suite(opts: &VerifyOptions, extra: Option<&Checkpoint>) -> SuiteReport {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut errors = Vec::new();
    for i in 0..opts.equivalence_models {
        let seed = rng::mix(opts.seed, 100 + i as u64);
        let (m, p, s) = random_case(equivalence_dims(), seed);
        match equivalence_case(&m, &p, &s, &sparsity_for(seed), opts.equivalence_tokens) {
            Ok((ok, w)) => {
                worst = worst.max(w);
                failures += usize::from(!ok);
            }
            Err(e) => {
                failures += 1;
                errors.push(e.to_string());
            }
        }
        cases += 1;
    }
    if let Some(c) = extra {
        let mc = c.model.config;
        let mut r = rng::seeded(opts.seed);
        let features: Vec<Vec<f64>> = (0..8).map(|_| (0..mc.image_feature_dim).map(|_| rng::normal(&mut r)).collect()).collect();
        let state = c.model.embed_inputs(&features, &[1, 4]);
        let res = state.and_then(|s| equivalence_case(&c.model, &c.predictor, &s, &SparsityConfig::default(), opts.equivalence_tokens));
        match res {
            Ok((ok, w)) => {
                worst = worst.max(w);
                failures += usize::from(!ok);
            }
            Err(e) => {
                failures += 1;
                errors.push(e.to_string());
            }
        }
        cases += 1;
    }
    SuiteReport::new("mode-equivalence", cases, failures, worst, errors.join("; "))
}

/// Decisions made at each no-cache step for every earlier token are
/// bit-identical at all later steps.
pub fn stability_case(model: &ModelWeights, p: &PredictorWeights, state: &SequenceState, cfg: &SparsityConfig, tokens: usize) -> sparsevl_core::Result<bool> {
    let mut state = state.clone();
    let mut image_keep: Option<Vec<usize>> = None;
    let mut flags: Vec<bool> = Vec::new();
    for _ in 0..tokens {
        let out = sparse::sparse_decode_no_cache(model, p, &state, cfg)?;
        if image_keep.as_ref().is_some_and(|k| *k != out.image_keep) {
            return Ok(false);
        }
        if out.raw_output_flags.len() < flags.len() || out.raw_output_flags[..flags.len()] != flags[..] {
            return Ok(false);
        }
        image_keep = Some(out.image_keep);
        flags = out.raw_output_flags;
        if state.len() >= model.config.max_seq_len {
            break;
        }
        let next = sparsevl_core::kernels::argmax(&out.logits);
        state.push_output(model, next)?;
    }
    Ok(true)
}

pub fn stability_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut failures = 0;
    let mut errors = Vec::new();
    for i in 0..opts.stability_runs {
        let seed = rng::mix(opts.seed, 200 + i as u64);
        let (m, p, s) = random_case(small_dims(), seed);
        match stability_case(&m, &p, &s, &sparsity_for(seed), opts.stability_tokens) {
            Ok(ok) => failures += usize::from(!ok),
            Err(e) => {
                failures += 1;
                errors.push(e.to_string());
            }
        }
    }
    SuiteReport::new("decision-stability", opts.stability_runs, failures, failures as f64, errors.join("; "))
}

/// Worst deviation between the masked-softmax forward and the physically
/// sparsified forward at retained positions, over layers past `l`.
pub fn masked_case(model: &ModelWeights, tokens: &Matrix, keep: &[bool], l: usize) -> sparsevl_core::Result<f64> {
    let masked = train::masked_forward_hidden(model, tokens, keep, l)?;
    let mut worst: f64 = 0.0;
    for q in (0..tokens.rows()).filter(|&q| keep[q]) {
        let hard = train::hard_sparsified_hidden(model, tokens, keep, l, q)?;
        for li in l..model.config.num_layers {
            for (a, b) in masked[li].row(q).iter().zip(&hard[li]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

pub fn masked_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut errors = Vec::new();
    for i in 0..opts.masked_pairs {
        let seed = rng::mix(opts.seed, 300 + i as u64);
        let (m, _, s) = random_case(small_dims(), seed);
        let mut r = rng::seeded(rng::mix(seed, 9));
        let extra = r.gen_range(0..12);
        let mut s = s;
        for _ in 0..extra {
            let t = r.gen_range(1..m.config.vocab_size);
            s.push_output(&m, t).expect("fits");
        }
        let n = s.len();
        let rate = r.gen_range(0.2..0.8);
        let mut keep = train::bernoulli_mask(n, rate, rng::mix(seed, 10));
        let l = r.gen_range(1..m.config.num_layers);
        keep[n - 1] = true;
        match masked_case(&m, &s.all_tokens(), &keep, l) {
            Ok(w) => {
                worst = worst.max(w);
                failures += usize::from(w > HIDDEN_TOLERANCE);
            }
            Err(e) => {
                failures += 1;
                errors.push(e.to_string());
            }
        }
    }
    SuiteReport::new("masked-softmax-equivalence", opts.masked_pairs, failures, worst, errors.join("; "))
}

fn rand_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    rng::normal_matrix(r, rows, cols, 1.0)
}

fn weighted_sum(t: &mut Tape<'_>, x: Var, w: &Matrix) -> Var {
    let wv = t.leaf(w.clone());
    let p = t.mul(x, wv).expect("same shape");
    let n = (w.rows() * w.cols()) as f64;
    let m = t.mean(p);
    t.scale(m, n)
}

/// Checks a unary tape function against central differences.
fn fd_unary(x: &Matrix, ste_scale: f64, f: &dyn Fn(&mut Tape<'_>, Var) -> Var) -> f64 {
    let mut t = Tape::new(Vec::new()).with_ste_adjoint_scale(ste_scale);
    let xv = t.leaf(x.clone());
    let y = f(&mut t, xv);
    let g = t.backward(y);
    let analytic = g.of(xv).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
    let numeric = autodiff::numeric_gradient(x, FD_STEP, |p| {
        let mut t = Tape::new(Vec::new());
        let xv = t.leaf(p.clone());
        let y = f(&mut t, xv);
        t.scalar(y)
    });
    autodiff::relative_error(&analytic, &numeric)
}

fn grad_dims() -> (ModelConfig, PredictorConfig) {
    let mc = ModelConfig {
        num_layers: 3,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 12,
        max_seq_len: 32,
        image_feature_dim: 5,
    };
    let pc = PredictorConfig {
        input_dim: 8,
        width: 8,
        num_heads: 2,
        num_blocks: 1,
        block_ffn_ratio: 2,
    };
    (mc, pc)
}

fn grad_sample(r: &mut impl Rng, mc: &ModelConfig) -> TrainingSample {
    TrainingSample {
        image_features: (0..4).map(|_| (0..mc.image_feature_dim).map(|_| rng::normal(r)).collect()).collect(),
        text_ids: vec![r.gen_range(1..mc.vocab_size), r.gen_range(1..mc.vocab_size)],
        output_ids: (0..5).map(|_| r.gen_range(0..mc.vocab_size)).collect(),
    }
}

/// Relaxed training loss, differentiable in every model and predictor tensor.
fn relaxed_loss(m: &ModelWeights, p: &PredictorWeights, s: &TrainingSample, cfg: &TrainConfig) -> (f64, Vec<Option<Matrix>>) {
    let tensors: Vec<&Matrix> = m.tensors().into_iter().chain(p.tensors()).collect();
    let mut t = Tape::new(tensors);
    let masks = ForwardMasks::eval(MaskPolicy::Relaxed, MaskPolicy::Relaxed, 0);
    let f = train::forward_sample(&mut t, m, p, s, cfg, &masks).expect("valid sample");
    let v = t.scalar(f.loss);
    (v, t.backward(f.loss).into_params())
}

/// FD error at a few random entries of tensor `ti` (model first, then predictor).
fn fd_param_probe(r: &mut impl Rng, m: &ModelWeights, p: &PredictorWeights, s: &TrainingSample, cfg: &TrainConfig, ti: usize) -> f64 {
    let (_, grads) = relaxed_loss(m, p, s, cfg);
    let n_model = m.tensors().len();
    let shape = if ti < n_model { m.tensors()[ti].shape() } else { p.tensors()[ti - n_model].shape() };
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let k = r.gen_range(0..shape.0 * shape.1);
        let analytic = grads[ti].as_ref().map_or(0.0, |g| g.data()[k]);
        let eval = |delta: f64| {
            let (mut m2, mut p2) = (m.clone(), p.clone());
            if ti < n_model {
                m2.tensors_mut()[ti].data_mut()[k] += delta;
            } else {
                p2.tensors_mut()[ti - n_model].data_mut()[k] += delta;
            }
            relaxed_loss(&m2, &p2, s, cfg).0
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    worst
}

/// Exact STE pass-through: the adjoint reaching the relaxed input equals the
/// adjoint arriving at the hard output, bit for bit.
pub fn ste_exact(r: &mut impl Rng, ste_scale: f64) -> bool {
    let x = rand_matrix(r, 6, 2);
    let w = rand_matrix(r, 6, 2);
    let mut t = Tape::new(Vec::new()).with_ste_adjoint_scale(ste_scale);
    let xv = t.leaf(x.clone());
    let s = t.softmax_rows(xv);
    let h = t.ste(s);
    let y = weighted_sum(&mut t, h, &w);
    let g = t.backward(y);
    let through_ste = g.of(s).cloned();
    let direct = g.of(h).cloned();
    let grad_x = g.of(xv).cloned();
    // Same graph with the STE removed: the input adjoint must coincide.
    let mut t2 = Tape::new(Vec::new());
    let xv2 = t2.leaf(x);
    let s2 = t2.softmax_rows(xv2);
    let y2 = weighted_sum(&mut t2, s2, &w);
    let g2 = t2.backward(y2);
    let bits = |m: Option<Matrix>| m.map(|m| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    bits(through_ste) == bits(direct) && bits(grad_x) == bits(g2.of(xv2).cloned())
}

pub fn gradient_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut r = rng::seeded(rng::mix(opts.seed, 400));
    let (mc, pc) = grad_dims();
    let cfg = TrainConfig {
        sparsify_layer: 1,
        len_ot: 1,
        lambda: 0.7,
        predictor_input_grad: true,
        ..TrainConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut kinds = std::collections::BTreeMap::<&str, usize>::new();
    let ste = opts.ste_adjoint_scale;
    for probe in 0..opts.gradient_probes {
        let (name, err) = match probe % 10 {
            0 => {
                let x = rand_matrix(&mut r, 4, 6);
                let a = rand_matrix(&mut r, 6, 5);
                let gain = rand_matrix(&mut r, 1, 5);
                let w = rand_matrix(&mut r, 4, 5);
                ("kernels", fd_unary(&x, ste, &|t, xv| {
                    let av = t.leaf(a.clone());
                    let gv = t.leaf(gain.clone());
                    let y = t.matmul(xv, av).unwrap();
                    let y = t.rms_norm(y, gv).unwrap();
                    let y = t.silu(y);
                    weighted_sum(t, y, &w)
                }))
            }
            1 => {
                let x = rand_matrix(&mut r, 5, 5);
                let w = rand_matrix(&mut r, 5, 5);
                ("softmax", fd_unary(&x, ste, &|t, xv| {
                    let y = t.softmax_rows(xv);
                    weighted_sum(t, y, &w)
                }))
            }
            2 => {
                let x = rand_matrix(&mut r, 6, 6);
                let w = rand_matrix(&mut r, 6, 6);
                let gmask = MaskMatrix::from_fn(6, 6, |i, j| i == j || (j < i && (i * 7 + j * 3 + probe) % 3 != 0)).to_matrix();
                ("masked-softmax-fixed-g", fd_unary(&x, ste, &|t, xv| {
                    let g = t.leaf(gmask.clone());
                    let y = t.masked_softmax(xv, g).unwrap();
                    weighted_sum(t, y, &w)
                }))
            }
            3 => {
                let keep = Matrix::from_vec(6, 1, (0..6).map(|_| r.gen_range(0.05..1.0)).collect()).unwrap();
                let x = rand_matrix(&mut r, 6, 6);
                let w = rand_matrix(&mut r, 6, 6);
                ("masked-softmax-in-g", fd_unary(&keep, ste, &|t, kv| {
                    let g = t.build_g(kv).unwrap();
                    let xv = t.leaf(x.clone());
                    let y = t.masked_softmax(xv, g).unwrap();
                    weighted_sum(t, y, &w)
                }))
            }
            4 => {
                let d = rand_matrix(&mut r, 7, 2);
                let rate = r.gen_range(0.1..0.9);
                ("regularizer-relaxed", fd_unary(&d, ste, &|t, dv| {
                    let p = t.softmax_rows(dv);
                    let c = t.col(p, KEEP);
                    let m = t.mean(c);
                    let dev = t.add_const(m, &Matrix::filled(1, 1, -rate)).unwrap();
                    t.abs(dev)
                }))
            }
            5 => {
                let logits = rand_matrix(&mut r, 4, 6);
                let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
                ("cross-entropy", fd_unary(&logits, ste, &|t, lv| t.cross_entropy(lv, &targets).unwrap()))
            }
            k => {
                let m = ModelWeights::random(mc, r.gen()).unwrap();
                let p = PredictorWeights::random(pc, r.gen()).unwrap();
                let s = grad_sample(&mut r, &mc);
                let n_model = m.tensors().len();
                let n_img = p.image_tensors().len();
                let n_pred = p.tensors().len();
                let (name, ti) = match k {
                    6 => ("image-predictor", n_model + r.gen_range(0..n_img)),
                    7 => ("output-predictor", n_model + n_img + r.gen_range(0..n_pred - n_img)),
                    _ => ("decoder", r.gen_range(0..n_model)),
                };
                (name, fd_param_probe(&mut r, &m, &p, &s, &cfg, ti))
            }
        };
        *kinds.entry(name).or_default() += 1;
        worst = worst.max(err);
        failures += usize::from(!(err <= GRADIENT_TOLERANCE));
    }
    let mut ste_failures = 0;
    for _ in 0..10 {
        ste_failures += usize::from(!ste_exact(&mut r, ste));
    }
    let detail = format!(
        "probes by subgraph {:?}; STE pass-through exact in {}/10",
        kinds,
        10 - ste_failures
    );
    SuiteReport::new("gradient-check", opts.gradient_probes + 10, failures + ste_failures, worst, detail)
}

/// Every suite in a fixed order.
pub fn run_all(opts: &VerifyOptions, checkpoint: Option<&Checkpoint>) -> Vec<SuiteReport> {
    vec![
        golden_suite(),
        equivalence_suite(opts, checkpoint),
        stability_suite(opts),
        masked_suite(opts),
        gradient_suite(opts),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            equivalence_models: 3,
            equivalence_tokens: 6,
            stability_runs: 3,
            stability_tokens: 10,
            masked_pairs: 5,
            gradient_probes: 20,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn quick_suites_pass() {
        for s in run_all(&quick(), None) {
            assert!(s.passed, "{s:?}");
        }
    }

    #[test]
    fn corrupted_ste_fails_gradient_suite() {
        let opts = VerifyOptions {
            ste_adjoint_scale: 0.5,
            ..quick()
        };
        let s = gradient_suite(&opts);
        assert!(!s.passed);
        assert!(s.failures >= 10, "{s:?}");
    }
}
