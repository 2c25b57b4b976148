//! End-to-end sparsification training.
//!
//! The training forward runs the full token set through every layer. Layers
//! `≤ l` use the causal mask; deeper layers use `masked_softmax(·, G)` where
//! `G` is built from the straight-through keep mask, so dropped tokens are
//! invisible to retained ones but still produce a loss.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, MaskMatrix, Matrix};
use crate::model::{self, FlopMeter, ModelWeights};
use crate::predictor::{self, BinaryMask, PredictorWeights, DROP, KEEP};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Heavy-ball SGD.
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub len_ot: usize,
    pub tau_initial: f64,
    pub tau_final: f64,
    pub lr_model: f64,
    pub lr_predictor: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Gradient-norm clip applied to the decoder and predictor groups
    /// separately; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub sparsify_layer: usize,
    pub image_keep_rate: f64,
    pub output_keep_rate: f64,
    /// Gumbel noise multiplier reached after `noise_anneal · total_steps`
    /// steps, decayed linearly from 1 and held afterwards.
    pub noise_final: f64,
    pub noise_anneal: f64,
    /// Steps over which keep-rate targets fall linearly from 1 to their final values.
    pub rate_warmup: usize,
    /// Zero dropped rows instead of masking attention (negative control).
    pub hard_drop: bool,
    /// Let predictor losses back-propagate into the decoder layers below `l`.
    pub predictor_input_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            len_ot: 50,
            tau_initial: 1.0,
            tau_final: 0.1,
            lr_model: 3e-3,
            lr_predictor: 3e-3,
            momentum: 0.9,
            optimizer: Optimizer::Adam,
            grad_clip: Some(1.0),
            batch_size: 4,
            total_steps: 1000,
            seed: 0,
            sparsify_layer: 2,
            image_keep_rate: 0.2,
            output_keep_rate: 0.5,
            noise_final: 1.0,
            noise_anneal: 0.7,
            rate_warmup: 0,
            hard_drop: false,
            predictor_input_grad: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.tau_final > 0.0 && self.tau_final <= self.tau_initial) {
            return bad("require 0 < tau_final <= tau_initial");
        }
        if !(0.0..=1.0).contains(&self.noise_final) {
            return bad("noise_final must lie in [0, 1]");
        }
        if !(self.noise_anneal > 0.0 && self.noise_anneal <= 1.0) {
            return bad("noise_anneal must lie in (0, 1]");
        }
        if !(self.lr_model >= 0.0 && self.lr_predictor >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.sparsify_layer < 1 || self.sparsify_layer >= num_layers {
            return bad("sparsify_layer must lie in 1..num_layers");
        }
        for r in [self.image_keep_rate, self.output_keep_rate] {
            if !(r > 0.0 && r <= 1.0) {
                return bad("keep rates must lie in (0, 1]");
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be > 0");
            }
        }
        Ok(())
    }
}

/// `τ(s) = τ₀·(τ₁/τ₀)^{s/total}`; step is clamped to `total`.
pub fn tau_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps.max(1);
    let frac = step.min(total) as f64 / total as f64;
    cfg.tau_initial * libm::pow(cfg.tau_final / cfg.tau_initial, frac)
}

/// Linear decay of the Gumbel noise scale from 1 to `noise_final`.
pub fn noise_scale_at(step: usize, cfg: &TrainConfig) -> f64 {
    let span = (cfg.total_steps as f64 * cfg.noise_anneal).max(1.0);
    let frac = (step as f64 / span).min(1.0);
    1.0 + (cfg.noise_final - 1.0) * frac
}

/// Keep-rate target at `step` under the linear warm-up.
pub fn target_rate_at(step: usize, rate: f64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.rate_warmup {
        return rate;
    }
    1.0 + (rate - 1.0) * step as f64 / cfg.rate_warmup as f64
}

/// Row-wise `softmax((d + noise) / τ)`.
pub fn gumbel_softmax_rows(d: &Matrix, tau: f64, noise: &Matrix) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if d.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax_rows",
            lhs: d.shape(),
            rhs: noise.shape(),
        });
    }
    let mut x = d.clone();
    x.add_assign(noise);
    x.scale(1.0 / tau);
    Ok(kernels::softmax_rows(&x))
}

/// Forward value of the straight-through mask.
pub fn ste_mask(relaxed: &Matrix) -> BinaryMask {
    predictor::decisions_to_mask(relaxed, false)
}

/// `G`: the keep vector `M^I ∪ 1^{N^T} ∪ M^OT` broadcast over columns,
/// intersected with the causal mask, diagonal forced to 1.
pub fn build_training_mask(m_i: &BinaryMask, n_text: usize, m_ot: &BinaryMask) -> MaskMatrix {
    let keep: Vec<bool> = m_i
        .0
        .iter()
        .copied()
        .chain(core::iter::repeat(true).take(n_text))
        .chain(m_ot.0.iter().copied())
        .collect();
    let n = keep.len();
    MaskMatrix::from_fn(n, n, |i, j| i == j || (j < i && keep[j]))
}

fn rate_term(kept: usize, len: usize, rate: f64) -> f64 {
    libm::fabs(kept as f64 / len as f64 - rate)
}

/// Keep-rate regularizer on hard masks. The output term is active only when
/// `|S^OT| ≥ len_ot`; an empty image set contributes 0.
pub fn keep_rate_regularizer(m_i: &BinaryMask, m_ot: &BinaryMask, r_i: f64, r_ot: f64, len_ot: usize) -> f64 {
    let mut r = 0.0;
    if !m_i.is_empty() {
        r += rate_term(m_i.kept(), m_i.len(), r_i);
    }
    if !m_ot.is_empty() && m_ot.len() >= len_ot {
        r += rate_term(m_ot.kept(), m_ot.len(), r_ot);
    }
    r
}

/// One teacher-forced training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub image_features: Vec<Vec<f64>>,
    pub text_ids: Vec<usize>,
    /// Target response; all but the last token are fed back as `S^OT`.
    pub output_ids: Vec<usize>,
}

impl TrainingSample {
    pub fn n_output_inputs(&self) -> usize {
        self.output_ids.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.image_features.len() + self.text_ids.len() + self.n_output_inputs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub total: f64,
    pub image_keep_fraction: f64,
    pub output_keep_fraction: f64,
}

/// Source of keep decisions for one mask family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Predictor decisions (Gumbel-perturbed when a temperature is given).
    Learned,
    /// `⌊r·n⌋` uniformly random keeps.
    Random,
    /// Alternating keeps.
    Structure,
    /// Keep everything.
    Dense,
    /// The `⌊r·n⌋` highest predictor keep margins; no gradient to the
    /// predictor. Compares the learned ranking at an exact keep count.
    LearnedTopk,
    /// Soft keep probabilities `softmax(d)[keep]` in place of hard decisions,
    /// making the whole graph differentiable (gradient checks).
    Relaxed,
}

impl MaskPolicy {
    fn uses_predictor(self) -> bool {
        matches!(self, MaskPolicy::Learned | MaskPolicy::LearnedTopk | MaskPolicy::Relaxed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardMasks {
    pub image: MaskPolicy,
    pub output: MaskPolicy,
    /// Gumbel temperature; `None` uses plain argmax decisions.
    pub tau: Option<f64>,
    /// Multiplier on the Gumbel noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl ForwardMasks {
    pub fn eval(image: MaskPolicy, output: MaskPolicy, seed: u64) -> Self {
        Self {
            image,
            output,
            tau: None,
            noise_scale: 0.0,
            seed,
        }
    }
}

/// Tape variable handles of all model and predictor tensors.
struct Params {
    tok: Var,
    pos: Var,
    img_proj: Var,
    img_bias: Var,
    layers: Vec<[Var; 8]>,
    final_norm: Var,
    lm_head: Var,
    pred_img_proj: Var,
    pred_img_bias: Var,
    pred_blocks: Vec<[Var; 10]>,
    pred_img_head: [Var; 7],
    pred_out_proj: Var,
    pred_out_bias: Var,
    pred_out_head: [Var; 7],
}

fn params(t: &mut Tape<'_>, n_layers: usize, n_blocks: usize) -> Params {
    let mut i = 0;
    let mut next = |t: &mut Tape<'_>| {
        let v = t.param(i);
        i += 1;
        v
    };
    let tok = next(t);
    let pos = next(t);
    let img_proj = next(t);
    let img_bias = next(t);
    let layers = (0..n_layers).map(|_| core::array::from_fn(|_| next(t))).collect();
    let final_norm = next(t);
    let lm_head = next(t);
    let pred_img_proj = next(t);
    let pred_img_bias = next(t);
    let pred_blocks = (0..n_blocks).map(|_| core::array::from_fn(|_| next(t))).collect();
    let pred_img_head = core::array::from_fn(|_| next(t));
    let pred_out_proj = next(t);
    let pred_out_bias = next(t);
    let pred_out_head = core::array::from_fn(|_| next(t));
    Params {
        tok,
        pos,
        img_proj,
        img_bias,
        layers,
        final_norm,
        lm_head,
        pred_img_proj,
        pred_img_bias,
        pred_blocks,
        pred_img_head,
        pred_out_proj,
        pred_out_bias,
        pred_out_head,
    }
}

fn all_tensors<'a>(m: &'a ModelWeights, p: &'a PredictorWeights) -> Vec<&'a Matrix> {
    let mut v = m.tensors();
    v.extend(p.tensors());
    v
}

fn tape_attention(t: &mut Tape<'_>, heads: usize, q: Var, k: Var, v: Var, g: Var) -> Result<Var> {
    let d = t.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let s = t.matmul_transb(qh, kh)?;
        let s = t.scale(s, scale);
        let p = t.masked_softmax(s, g)?;
        outs.push(t.matmul(p, vh)?);
    }
    t.concat_cols(&outs)
}

fn tape_decoder_layer(t: &mut Tape<'_>, heads: usize, w: &[Var; 8], x: Var, g: Var) -> Result<Var> {
    let [attn_norm, wq, wk, wv, wo, ffn_norm, ffn_in, ffn_out] = *w;
    let h = t.rms_norm(x, attn_norm)?;
    let q = t.matmul(h, wq)?;
    let k = t.matmul(h, wk)?;
    let v = t.matmul(h, wv)?;
    let a = tape_attention(t, heads, q, k, v, g)?;
    let o = t.matmul(a, wo)?;
    let x = t.add(x, o)?;
    let h2 = t.rms_norm(x, ffn_norm)?;
    let f = t.matmul(h2, ffn_in)?;
    let f = t.silu(f);
    let f = t.matmul(f, ffn_out)?;
    t.add(x, f)
}

fn tape_head(t: &mut Tape<'_>, w: &[Var; 7], x: Var) -> Result<Var> {
    let [norm, w1, b1, w2, b2, w3, b3] = *w;
    let n = t.rms_norm(x, norm)?;
    let a = t.linear(n, w1, Some(b1))?;
    let a = t.silu(a);
    let b = t.linear(a, w2, Some(b2))?;
    let b = t.silu(b);
    t.linear(b, w3, Some(b3))
}

fn tape_image_predictor(t: &mut Tape<'_>, pc: &predictor::PredictorConfig, p: &Params, x: Var) -> Result<Var> {
    let n = t.value(x).rows();
    let mut h = t.linear(x, p.pred_img_proj, Some(p.pred_img_bias))?;
    let ones = t.leaf(Matrix::filled(n, n, 1.0));
    for b in &p.pred_blocks {
        let [norm1, wq, wk, wv, wo, norm2, fc1, b1, fc2, b2] = *b;
        let z = t.rms_norm(h, norm1)?;
        let q = t.matmul(z, wq)?;
        let k = t.matmul(z, wk)?;
        let v = t.matmul(z, wv)?;
        let a = tape_attention(t, pc.num_heads, q, k, v, ones)?;
        let o = t.matmul(a, wo)?;
        h = t.add(h, o)?;
        let z2 = t.rms_norm(h, norm2)?;
        let f = t.linear(z2, fc1, Some(b1))?;
        let f = t.silu(f);
        let f = t.linear(f, fc2, Some(b2))?;
        h = t.add(h, f)?;
    }
    tape_head(t, &p.pred_img_head, h)
}

fn tape_output_predictor(t: &mut Tape<'_>, p: &Params, x: Var) -> Result<Var> {
    let h = t.linear(x, p.pred_out_proj, Some(p.pred_out_bias))?;
    tape_head(t, &p.pred_out_head, h)
}

fn random_keep(n: usize, rate: f64, seed: u64) -> BinaryMask {
    let k = predictor::keep_count(rate, n).min(n);
    let mut r = rng::seeded(seed);
    BinaryMask::from_indices(n, &rand::seq::index::sample(&mut r, n, k).into_vec())
}

fn fixed_mask(policy: MaskPolicy, n: usize, rate: f64, seed: u64) -> BinaryMask {
    match policy {
        MaskPolicy::Random => random_keep(n, rate, seed),
        MaskPolicy::Structure => BinaryMask((0..n).map(|i| i % 2 == 0).collect()),
        _ => BinaryMask::ones(n),
    }
}

/// Decisions → `N × 1` keep column on the tape, plus the hard mask.
fn keep_column(
    t: &mut Tape<'_>,
    policy: MaskPolicy,
    decisions: Option<Var>,
    n: usize,
    rate: f64,
    tau: Option<f64>,
    noise_scale: f64,
    seed: u64,
) -> Result<(Var, BinaryMask)> {
    if let (MaskPolicy::Learned, Some(d)) = (policy, decisions) {
        let relaxed = match tau {
            Some(tau) => {
                if !(tau > 0.0) {
                    return Err(Error::InvalidTemperature(tau));
                }
                let mut r = rng::seeded(seed);
                let mut noise = rng::gumbel_matrix(&mut r, n, 2);
                noise.scale(noise_scale);
                let z = t.add_const(d, &noise)?;
                let z = t.scale(z, 1.0 / tau);
                t.softmax_rows(z)
            }
            None => t.softmax_rows(d),
        };
        let hard = t.ste(relaxed);
        let mask = BinaryMask((0..n).map(|i| t.value(hard).get(i, KEEP) == 1.0).collect());
        return Ok((t.col(hard, KEEP), mask));
    }
    if let (MaskPolicy::Relaxed, Some(d)) = (policy, decisions) {
        let soft = t.softmax_rows(d);
        let mask = BinaryMask((0..n).map(|i| t.value(soft).get(i, KEEP) > 0.5).collect());
        return Ok((t.col(soft, KEEP), mask));
    }
    let mask = match (policy, decisions) {
        (MaskPolicy::LearnedTopk, Some(d)) => {
            let dm = t.value(d);
            let margins: Vec<f64> = (0..n).map(|i| dm.get(i, KEEP) - dm.get(i, DROP)).collect();
            let k = predictor::keep_count(rate, n).min(n);
            BinaryMask::from_indices(n, &kernels::topk_argmax(&margins, k)?)
        }
        _ => fixed_mask(policy, n, rate, seed),
    };(policy, n, rate, seed);
    let col = Matrix::from_vec(n, 1, mask.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    Ok((t.leaf(col), mask))
}

/// Result of a training forward on one sample.
pub struct SampleForward {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub image_mask: BinaryMask,
    pub output_mask: BinaryMask,
    /// Hidden state after every decoder layer.
    pub hidden: Vec<Var>,
}

/// Builds the training graph of one sample on `t`.
pub fn forward_sample(
    t: &mut Tape<'_>,
    model: &ModelWeights,
    pred: &PredictorWeights,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    masks: &ForwardMasks,
) -> Result<SampleForward> {
    let mc = &model.config;
    let (ni, nt, no) = (sample.image_features.len(), sample.text_ids.len(), sample.n_output_inputs());
    let n = ni + nt + no;
    if nt == 0 || sample.output_ids.is_empty() {
        return Err(Error::EmptyInput("training sample needs text and a target"));
    }
    if n > mc.max_seq_len {
        return Err(Error::SequenceTooLong { len: n, max: mc.max_seq_len });
    }
    let p = params(t, mc.num_layers, pred.config.num_blocks);

    let ids: Vec<usize> = sample.text_ids.iter().chain(&sample.output_ids[..no]).copied().collect();
    if let Some(&bad) = ids.iter().chain(&sample.output_ids).find(|&&i| i >= mc.vocab_size) {
        return Err(Error::TokenOutOfRange { token: bad, vocab: mc.vocab_size });
    }
    let tok = t.gather_rows(p.tok, &ids)?;
    let x = if ni > 0 {
        let feats = Matrix::from_rows(&sample.image_features);
        if feats.cols() != mc.image_feature_dim {
            return Err(Error::ShapeMismatch {
                op: "forward_sample image features",
                lhs: feats.shape(),
                rhs: (mc.image_feature_dim, mc.hidden_dim),
            });
        }
        let f = t.leaf(feats);
        let img = t.linear(f, p.img_proj, Some(p.img_bias))?;
        t.concat_rows(&[img, tok])?
    } else {
        tok
    };
    let positions: Vec<usize> = (0..n).collect();
    let pos = t.gather_rows(p.pos, &positions)?;
    let mut x = t.add(x, pos)?;

    let l = cfg.sparsify_layer;
    let causal = t.leaf(MaskMatrix::causal(n).to_matrix());
    let mut hidden = Vec::with_capacity(mc.num_layers);
    for li in 0..l {
        x = tape_decoder_layer(t, mc.num_heads, &p.layers[li], x, causal)?;
        hidden.push(x);
    }

    let pred_in = if cfg.predictor_input_grad { x } else { t.detach(x) };
    let img_dec = if ni > 0 && masks.image.uses_predictor() {
        let rows = t.slice_rows(pred_in, 0, ni);
        Some(tape_image_predictor(t, &pred.config, &p, rows)?)
    } else {
        None
    };
    let out_dec = if no > 0 && masks.output.uses_predictor() {
        let rows = t.slice_rows(pred_in, ni + nt, no);
        Some(tape_output_predictor(t, &p, rows)?)
    } else {
        None
    };
    let img_seed = rng::mix(masks.seed, 1);
    let out_seed = rng::mix(masks.seed, 2);
    let (img_keep, image_mask) = keep_column(t, masks.image, img_dec, ni, cfg.image_keep_rate, masks.tau, masks.noise_scale, img_seed)?;
    let (out_keep, output_mask) =
        keep_column(t, masks.output, out_dec, no, cfg.output_keep_rate, masks.tau, masks.noise_scale, out_seed)?;

    let mut parts = Vec::with_capacity(3);
    if ni > 0 {
        parts.push(img_keep);
    }
    parts.push(t.leaf(Matrix::filled(nt, 1, 1.0)));
    if no > 0 {
        parts.push(out_keep);
    }
    let keep = t.concat_rows(&parts)?;

    let deep_mask = if cfg.hard_drop {
        let d = mc.hidden_dim;
        let cols: Vec<Var> = vec![keep; d];
        let bcast = t.concat_cols(&cols)?;
        x = t.mul(x, bcast)?;
        causal
    } else {
        t.build_g(keep)?
    };
    for li in l..mc.num_layers {
        x = tape_decoder_layer(t, mc.num_heads, &p.layers[li], x, deep_mask)?;
        hidden.push(x);
    }

    let pred_rows = t.slice_rows(x, ni + nt - 1, no + 1);
    let normed = t.rms_norm(pred_rows, p.final_norm)?;
    let logits = t.matmul(normed, p.lm_head)?;
    let ce = t.cross_entropy(logits, &sample.output_ids)?;

    let mut reg_terms = Vec::new();
    if ni > 0 {
        reg_terms.push((img_keep, cfg.image_keep_rate));
    }
    if no > 0 && no >= cfg.len_ot {
        reg_terms.push((out_keep, cfg.output_keep_rate));
    }
    let mut reg = t.leaf(Matrix::zeros(1, 1));
    for (col, rate) in reg_terms {
        let m = t.mean(col);
        let dev = t.add_const(m, &Matrix::filled(1, 1, -rate))?;
        let a = t.abs(dev);
        reg = t.add(reg, a)?;
    }
    let weighted = t.scale(reg, cfg.lambda);
    let loss = t.add(ce, weighted)?;

    let cross_entropy = t.scalar(ce);
    let regularizer = t.scalar(reg);
    let frac = |m: &BinaryMask| if m.is_empty() { 0.0 } else { m.kept() as f64 / m.len() as f64 };
    Ok(SampleForward {
        loss,
        breakdown: LossBreakdown {
            cross_entropy,
            regularizer,
            total: cross_entropy + cfg.lambda * regularizer,
            image_keep_fraction: frac(&image_mask),
            output_keep_fraction: frac(&output_mask),
        },
        image_mask,
        output_mask,
        hidden,
    })
}

/// Mean loss over `samples` without gradients.
pub fn evaluate(
    model: &ModelWeights,
    pred: &PredictorWeights,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    image: MaskPolicy,
    output: MaskPolicy,
    seed: u64,
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut acc = LossBreakdown::default();
    for (i, s) in samples.iter().enumerate() {
        let tensors = all_tensors(model, pred);
        let mut t = Tape::new(tensors);
        let f = forward_sample(
            &mut t,
            model,
            pred,
            s,
            cfg,
            &ForwardMasks::eval(image, output, rng::mix(seed, i as u64)),
        )?;
        add_breakdown(&mut acc, &f.breakdown);
    }
    scale_breakdown(&mut acc, 1.0 / samples.len() as f64);
    Ok(acc)
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.cross_entropy += b.cross_entropy;
    acc.regularizer += b.regularizer;
    acc.total += b.total;
    acc.image_keep_fraction += b.image_keep_fraction;
    acc.output_keep_fraction += b.output_keep_fraction;
}

fn scale_breakdown(acc: &mut LossBreakdown, s: f64) {
    acc.cross_entropy *= s;
    acc.regularizer *= s;
    acc.total *= s;
    acc.image_keep_fraction *= s;
    acc.output_keep_fraction *= s;
}

/// Per-sample gradients of the loss, summed over `batch` in order and
/// divided by its size. Model tensors come first, then predictor tensors.
pub fn batch_gradients(
    model: &ModelWeights,
    pred: &PredictorWeights,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
    masks: &ForwardMasks,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let tensors = all_tensors(model, pred);
    let mut grads: Vec<Matrix> = tensors.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut acc = LossBreakdown::default();
    for (i, s) in batch.iter().enumerate() {
        let mut t = Tape::new(tensors.clone());
        let m = ForwardMasks {
            seed: rng::mix(masks.seed, i as u64),
            ..*masks
        };
        let f = forward_sample(&mut t, model, pred, s, cfg, &m)?;
        add_breakdown(&mut acc, &f.breakdown);
        for (g, pg) in grads.iter_mut().zip(t.backward(f.loss).into_params()) {
            if let Some(pg) = pg {
                g.add_assign(&pg);
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.scale(inv);
    }
    scale_breakdown(&mut acc, inv);
    Ok((acc, grads))
}

/// Model, predictors and optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelWeights,
    pub predictor: PredictorWeights,
    pub image_policy: MaskPolicy,
    pub output_policy: MaskPolicy,
    pub train_model: bool,
    pub train_predictor: bool,
    step: usize,
    m1: Vec<Matrix>,
    m2: Vec<Matrix>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelWeights, predictor: PredictorWeights) -> Result<Self> {
        cfg.validate(model.config.num_layers)?;
        let zeros: Vec<Matrix> = all_tensors(&model, &predictor)
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Ok(Self {
            cfg,
            model,
            predictor,
            image_policy: MaskPolicy::Learned,
            output_policy: MaskPolicy::Learned,
            train_model: true,
            train_predictor: true,
            step: 0,
            m1: zeros.clone(),
            m2: zeros,
        })
    }

    /// Control run: predictors frozen, random masks at the configured rates.
    pub fn random_mask_control(mut self) -> Self {
        self.image_policy = MaskPolicy::Random;
        self.output_policy = MaskPolicy::Random;
        self.train_predictor = false;
        self
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One optimizer step on `batch`; returns the batch-mean loss breakdown
    /// measured before the update.
    pub fn training_step(&mut self, batch: &[TrainingSample]) -> Result<LossBreakdown> {
        let masks = ForwardMasks {
            image: self.image_policy,
            output: self.output_policy,
            tau: Some(tau_at(self.step, &self.cfg)),
            noise_scale: noise_scale_at(self.step, &self.cfg),
            seed: rng::mix(self.cfg.seed, self.step as u64),
        };
        let step_cfg = TrainConfig {
            image_keep_rate: target_rate_at(self.step, self.cfg.image_keep_rate, &self.cfg),
            output_keep_rate: target_rate_at(self.step, self.cfg.output_keep_rate, &self.cfg),
            ..self.cfg
        };
        let (loss, mut grads) = batch_gradients(&self.model, &self.predictor, batch, &step_cfg, &masks)?;
        let n_model = self.model.tensors().len();
        if let Some(clip) = self.cfg.grad_clip {
            let (model_grads, pred_grads) = grads.split_at_mut(n_model);
            clip_group(model_grads, clip);
            clip_group(pred_grads, clip);
        }
        self.step += 1;
        let cfg = self.cfg;
        let step = self.step;
        let (train_model, train_pred) = (self.train_model, self.train_predictor);
        let mut tensors = self.model.tensors_mut();
        tensors.extend(self.predictor.tensors_mut());
        for (i, (w, g)) in tensors.into_iter().zip(&grads).enumerate() {
            let is_model = i < n_model;
            if (is_model && !train_model) || (!is_model && !train_pred) {
                continue;
            }
            let lr = if is_model { cfg.lr_model } else { cfg.lr_predictor };
            update(cfg, step, lr, w, g, &mut self.m1[i], &mut self.m2[i]);
        }
        Ok(loss)
    }
}

/// Rescales a parameter group to global norm at most `clip`.
fn clip_group(grads: &mut [Matrix], clip: f64) {
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>());
    if norm > clip {
        for g in grads {
            g.scale(clip / norm);
        }
    }
}

fn update(cfg: TrainConfig, step: usize, lr: f64, w: &mut Matrix, g: &Matrix, m1: &mut Matrix, m2: &mut Matrix) {
    match cfg.optimizer {
        Optimizer::Momentum => {
            for ((wv, &gv), mv) in w.data_mut().iter_mut().zip(g.data()).zip(m1.data_mut()) {
                *mv = cfg.momentum * *mv + gv;
                *wv -= lr * *mv;
            }
        }
        Optimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            let c1 = 1.0 - libm::pow(B1, step as f64);
            let c2 = 1.0 - libm::pow(B2, step as f64);
            for (((wv, &gv), mv), vv) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m1.data_mut())
                .zip(m2.data_mut())
            {
                *mv = B1 * *mv + (1.0 - B1) * gv;
                *vv = B2 * *vv + (1.0 - B2) * gv * gv;
                *wv -= lr * (*mv / c1) / (libm::sqrt(*vv / c2) + EPS);
            }
        }
    }
}

/// Hidden states after every layer under the `G`-masked full forward.
pub fn masked_forward_hidden(model: &ModelWeights, tokens: &Matrix, keep: &[bool], l: usize) -> Result<Vec<Matrix>> {
    let n = tokens.rows();
    if keep.len() != n {
        return Err(Error::ShapeMismatch {
            op: "masked_forward_hidden",
            lhs: tokens.shape(),
            rhs: (keep.len(), 1),
        });
    }
    let causal = MaskMatrix::causal(n);
    let g = MaskMatrix::from_fn(n, n, |i, j| i == j || (j < i && keep[j]));
    let mut x = tokens.clone();
    let mut out = Vec::new();
    let mut meter = FlopMeter::default();
    for (li, layer) in model.layers.iter().enumerate() {
        let mask = if li < l { &causal } else { &g };
        x = model::layer_forward(&model.config, layer, &x, mask, &mut meter)?.hidden;
        out.push(x.clone());
    }
    Ok(out)
}

/// Hidden states of one query row `q` under hard sparsification: after
/// layer `l` only kept rows before `q` and `q` itself remain.
pub fn hard_sparsified_hidden(
    model: &ModelWeights,
    tokens: &Matrix,
    keep: &[bool],
    l: usize,
    q: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut x = tokens.slice_rows(0, q + 1);
    let mut meter = FlopMeter::default();
    let mut out = Vec::new();
    for li in 0..l {
        let mask = MaskMatrix::causal(x.rows());
        x = model::layer_forward(&model.config, &model.layers[li], &x, &mask, &mut meter)?.hidden;
        out.push(x.row(q).to_vec());
    }
    let idx: Vec<usize> = (0..q).filter(|&j| keep[j]).chain(core::iter::once(q)).collect();
    x = x.select_rows(&idx);
    for li in l..model.config.num_layers {
        let mask = MaskMatrix::causal(x.rows());
        x = model::layer_forward(&model.config, &model.layers[li], &x, &mask, &mut meter)?.hidden;
        out.push(x.row(x.rows() - 1).to_vec());
    }
    Ok(out)
}

/// Random `Vec<bool>` with each flag kept with probability `rate`.
pub fn bernoulli_mask(n: usize, rate: f64, seed: u64) -> Vec<bool> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.gen::<f64>() < rate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{numeric_gradient, relative_error};
    use crate::model::ModelConfig;
    use crate::predictor::PredictorConfig;

    fn tiny() -> (ModelWeights, PredictorWeights) {
        let cfg = ModelConfig {
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 7,
            max_seq_len: 32,
            image_feature_dim: 4,
            ..ModelConfig::default()
        };
        let m = ModelWeights::random(cfg, 1).unwrap();
        let pc = PredictorConfig {
            width: 8,
            num_heads: 2,
            ..PredictorConfig::for_model(&cfg)
        };
        (m, PredictorWeights::random(pc, 2).unwrap())
    }

    fn sample(n_img: usize, outputs: &[usize]) -> TrainingSample {
        TrainingSample {
            image_features: (0..n_img)
                .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect())
                .collect(),
            text_ids: vec![3, 4],
            output_ids: outputs.to_vec(),
        }
    }

    #[test]
    fn tau_schedule() {
        let cfg = TrainConfig {
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(tau_at(0, &cfg), 1.0);
        assert!((tau_at(100, &cfg) - 0.1).abs() < 1e-15);
        assert!((tau_at(50, &cfg) - libm::sqrt(0.1)).abs() < 1e-12);
        assert!((1..=100).all(|s| tau_at(s, &cfg) < tau_at(s - 1, &cfg)));
    }

    #[test]
    fn gumbel_softmax_examples() {
        let d = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]);
        let z = Matrix::zeros(2, 2);
        assert!(gumbel_softmax_rows(&d, 1.0, &z).unwrap().max_abs_diff(&kernels::softmax_rows(&d)) < 1e-15);
        let noise = Matrix::from_rows(&[vec![0.1, 0.4], vec![-0.2, 0.3]]);
        let sharp = gumbel_softmax_rows(&d, 0.01, &noise).unwrap();
        for r in 0..2 {
            assert!(sharp.row(r).iter().cloned().fold(0.0, f64::max) >= 0.999);
        }
        let mut g = rng::seeded(3);
        let big = rng::normal_matrix(&mut g, 20, 2, 3.0);
        let nz = rng::gumbel_matrix(&mut g, 20, 2);
        let s = gumbel_softmax_rows(&big, 0.7, &nz).unwrap();
        for r in 0..20 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(gumbel_softmax_rows(&d, 0.0, &z), Err(Error::InvalidTemperature(_))));
        assert!(gumbel_softmax_rows(&d, -1.0, &z).is_err());
    }

    #[test]
    fn ste_mask_examples() {
        assert_eq!(ste_mask(&Matrix::from_rows(&[vec![0.9, 0.1]])).0, vec![false]);
        let d = Matrix::from_rows(&[vec![0.2, 0.7], vec![0.6, -0.1]]);
        let mut shifted = d.clone();
        for v in shifted.data_mut() {
            *v += 5.0;
        }
        assert_eq!(ste_mask(&d), ste_mask(&shifted));
    }

    #[test]
    fn training_mask_examples() {
        let ones = build_training_mask(&BinaryMask::ones(2), 2, &BinaryMask::ones(3));
        assert_eq!(ones, MaskMatrix::causal(7));
        let g = build_training_mask(&BinaryMask(vec![]), 0, &BinaryMask(vec![true, false, true]));
        assert!(g.get(1, 1));
        assert!(!g.get(2, 1));
        assert!(!g.get(0, 1));
        let g = build_training_mask(&BinaryMask(vec![false; 3]), 1, &BinaryMask(vec![false; 2]));
        assert!((0..6).all(|i| g.get(i, i)));
    }

    #[test]
    fn regularizer_examples() {
        let mi = BinaryMask::from_indices(10, &[1, 4]);
        assert_eq!(keep_rate_regularizer(&mi, &BinaryMask(vec![true; 10]), 0.2, 0.5, 50), 0.0);
        let mi = BinaryMask::from_indices(115, &(0..58).collect::<Vec<_>>());
        let r = keep_rate_regularizer(&mi, &BinaryMask::default(), 0.2, 0.5, 50);
        assert!((r - 0.3043).abs() < 1e-4);
        let mo = BinaryMask(vec![true; 50]);
        let r = keep_rate_regularizer(&BinaryMask::default(), &mo, 0.2, 0.5, 50);
        assert_eq!(r, 0.5);
        let mo = BinaryMask(vec![true; 49]);
        assert_eq!(keep_rate_regularizer(&BinaryMask::default(), &mo, 0.2, 0.5, 50), 0.0);
    }

    #[test]
    fn dense_lambda_zero_equals_plain_cross_entropy() {
        let (m, p) = tiny();
        let s = sample(3, &[1, 2, 5, 0]);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Tape::new(all_tensors(&m, &p));
        let f = forward_sample(&mut t, &m, &p, &s, &cfg, &ForwardMasks::eval(MaskPolicy::Dense, MaskPolicy::Dense, 0)).unwrap();
        let mut state = m.embed_inputs(&s.image_features, &s.text_ids).unwrap();
        let mut ce = 0.0;
        for &y in &s.output_ids {
            let logits = model::decode_step_no_cache(&m, &state).unwrap();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            ce += lse - logits[y];
            state.push_output(&m, y).unwrap();
        }
        ce /= s.output_ids.len() as f64;
        assert!((f.breakdown.cross_entropy - ce).abs() < 1e-9);
        assert_eq!(f.breakdown.total, f.breakdown.cross_entropy);
    }

    #[test]
    fn total_is_ce_plus_lambda_reg() {
        let (m, p) = tiny();
        let s = sample(5, &[1, 2, 3, 4, 5, 6, 0]);
        let cfg = TrainConfig {
            len_ot: 3,
            ..TrainConfig::default()
        };
        let mut t = Tape::new(all_tensors(&m, &p));
        let masks = ForwardMasks {
            image: MaskPolicy::Learned,
            output: MaskPolicy::Learned,
            tau: Some(0.5),
            noise_scale: 1.0,
            seed: 9,
        };
        let f = forward_sample(&mut t, &m, &p, &s, &cfg, &masks).unwrap();
        let b = f.breakdown;
        assert_eq!(b.total, b.cross_entropy + cfg.lambda * b.regularizer);
        assert_eq!(t.scalar(f.loss), b.total);
        let expect = keep_rate_regularizer(&f.image_mask, &f.output_mask, 0.2, 0.5, 3);
        assert!((b.regularizer - expect).abs() < 1e-15);
    }

    #[test]
    fn masked_matches_hard_drop_at_retained_positions() {
        let (m, _) = tiny();
        let mut r = rng::seeded(5);
        let n = 9;
        let x = rng::normal_matrix(&mut r, n, 8, 1.0);
        let keep = [true, false, true, true, false, false, true, false, true];
        let masked = masked_forward_hidden(&m, &x, &keep, 2).unwrap();
        for q in (0..n).filter(|&q| keep[q]) {
            let hard = hard_sparsified_hidden(&m, &x, &keep, 2, q).unwrap();
            for (li, h) in hard.iter().enumerate() {
                let diff = h.iter().zip(masked[li].row(q)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-12, "layer {li} row {q}: {diff}");
            }
        }
    }

    #[test]
    fn tape_forward_matches_kernel_forward() {
        let (m, p) = tiny();
        let s = sample(4, &[1, 6, 2, 0]);
        let mut t = Tape::new(all_tensors(&m, &p));
        let masks = ForwardMasks::eval(MaskPolicy::Random, MaskPolicy::Structure, 4);
        let f = forward_sample(&mut t, &m, &p, &s, &TrainConfig::default(), &masks).unwrap();
        let mut state = m.embed_inputs(&s.image_features, &s.text_ids).unwrap();
        for &y in &s.output_ids[..s.n_output_inputs()] {
            state.push_output(&m, y).unwrap();
        }
        let keep: Vec<bool> = f
            .image_mask
            .0
            .iter()
            .copied()
            .chain([true, true])
            .chain(f.output_mask.0.iter().copied())
            .collect();
        let reference = masked_forward_hidden(&m, &state.all_tokens(), &keep, 2).unwrap();
        for (v, r) in f.hidden.iter().zip(&reference) {
            assert!(t.value(*v).max_abs_diff(r) <= 1e-12);
        }
    }

    #[test]
    fn full_graph_gradients_match_finite_differences() {
        let (m, p) = tiny();
        let s = sample(4, &[1, 2, 3, 4, 0]);
        let cfg = TrainConfig {
            len_ot: 2,
            ..TrainConfig::default()
        };
        let masks = ForwardMasks::eval(MaskPolicy::Random, MaskPolicy::Random, 3);
        let base = all_tensors(&m, &p).into_iter().cloned().collect::<Vec<_>>();
        let mut t = Tape::new(all_tensors(&m, &p));
        let f = forward_sample(&mut t, &m, &p, &s, &cfg, &masks).unwrap();
        let grads = t.backward(f.loss).into_params();
        // wq of layer 3 (beyond l) and the lm head.
        for idx in [4 + 2 * 8 + 1, 4 + 4 * 8 + 1] {
            let numeric = numeric_gradient(&base[idx], 1e-5, |w| {
                let mut mm = m.clone();
                *mm.tensors_mut()[idx] = w.clone();
                let mut t = Tape::new(all_tensors(&mm, &p));
                let f = forward_sample(&mut t, &mm, &p, &s, &cfg, &masks).unwrap();
                t.scalar(f.loss)
            });
            let err = relative_error(grads[idx].as_ref().unwrap(), &numeric);
            assert!(err < 1e-4, "tensor {idx}: {err}");
        }
    }

    #[test]
    fn regularizer_gating_zeroes_output_predictor_gradient() {
        let (m, p) = tiny();
        let s = sample(0, &[1, 2, 3, 0]);
        let cfg = TrainConfig {
            len_ot: 50,
            ..TrainConfig::default()
        };
        let mut t = Tape::new(all_tensors(&m, &p));
        let masks = ForwardMasks {
            image: MaskPolicy::Learned,
            output: MaskPolicy::Learned,
            tau: Some(1.0),
            noise_scale: 1.0,
            seed: 1,
        };
        let f = forward_sample(&mut t, &m, &p, &s, &cfg, &masks).unwrap();
        let mut t2 = Tape::new(all_tensors(&m, &p));
        let cfg_ce = TrainConfig { lambda: 0.0, ..cfg };
        let f2 = forward_sample(&mut t2, &m, &p, &s, &cfg_ce, &masks).unwrap();
        let g1 = t.backward(f.loss).into_params();
        let g2 = t2.backward(f2.loss).into_params();
        for (a, b) in g1.iter().zip(&g2) {
            match (a, b) {
                (Some(a), Some(b)) => assert_eq!(a, b),
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
        assert_eq!(f.breakdown.regularizer, 0.0);
    }

    #[test]
    fn training_step_is_deterministic_and_reduces_loss() {
        let (m, p) = tiny();
        let data: Vec<TrainingSample> = (0..4).map(|i| sample(3, &[1 + i % 3, 2, 3, 0])).collect();
        let cfg = TrainConfig {
            total_steps: 30,
            lr_model: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut tr = Trainer::new(cfg, m.clone(), p.clone()).unwrap();
            let mut losses = Vec::new();
            for _ in 0..30 {
                losses.push(tr.training_step(&data).unwrap().cross_entropy);
            }
            (losses, tr.model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a[29] < a[0]);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let (m, p) = tiny();
        let data = vec![sample(3, &[1, 2, 0])];
        let mut tr = Trainer::new(TrainConfig::default(), m.clone(), p.clone())
            .unwrap()
            .random_mask_control();
        tr.training_step(&data).unwrap();
        assert_eq!(tr.predictor, p);
        assert_ne!(tr.model, m);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate(4).is_ok());
        assert!(TrainConfig { lambda: -1.0, ..TrainConfig::default() }.validate(4).is_err());
        assert!(TrainConfig { tau_final: 2.0, ..TrainConfig::default() }.validate(4).is_err());
        assert!(TrainConfig { sparsify_layer: 4, ..TrainConfig::default() }.validate(4).is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate(4).is_err());
    }
}
