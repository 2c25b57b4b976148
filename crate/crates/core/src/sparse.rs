//! Sparsified inference.
//!
//! Layers `1..=l` always see the full token set and keep a full KV cache.
//! After layer `l` the predictors decide once which image and output tokens
//! survive; layers beyond `l` run on the survivors only (dropped rows are
//! physically absent) and their caches hold admitted entries only.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, MaskMatrix, Matrix};
use crate::model::{self, FlopMeter, KVCacheStore, LayerCache, ModelWeights, SequenceState};
use crate::predictor::{self, BinaryMask, PredictorWeights};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Keep iff the keep score beats the drop score.
    Argmax,
    /// Keep the `⌊r·N⌋` highest keep scores.
    Topk,
}

/// Source of output-token keep decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Learned,
    /// Per-token Bernoulli(`output_keep_rate`) decisions derived from the seed
    /// and the token's output index.
    Random { seed: u64 },
    /// Keep output tokens with even output index.
    Structure,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityConfig {
    pub sparsify_layer: usize,
    pub image_keep_rate: f64,
    pub output_keep_rate: f64,
    pub selection: Selection,
    pub policy: Policy,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            sparsify_layer: 2,
            image_keep_rate: 0.2,
            output_keep_rate: 0.5,
            selection: Selection::Argmax,
            policy: Policy::Learned,
        }
    }
}

impl SparsityConfig {
    /// No token is ever dropped.
    pub fn dense(sparsify_layer: usize) -> Self {
        Self {
            sparsify_layer,
            image_keep_rate: 1.0,
            output_keep_rate: 1.0,
            selection: Selection::Topk,
            policy: Policy::Learned,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.sparsify_layer < 1 || self.sparsify_layer >= num_layers {
            return Err(Error::InvalidConfig(alloc::format!(
                "sparsify_layer {} outside 1..{}",
                self.sparsify_layer,
                num_layers
            )));
        }
        for (name, r) in [
            ("image_keep_rate", self.image_keep_rate),
            ("output_keep_rate", self.output_keep_rate),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig(alloc::format!("{name} {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Image survivors from layer-`l` image hidden states. A keep rate of 1
/// disables image sparsification.
pub fn select_images(p: &PredictorWeights, hidden: &Matrix, cfg: &SparsityConfig) -> Result<Vec<usize>> {
    let n = hidden.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if cfg.image_keep_rate >= 1.0 {
        return Ok((0..n).collect());
    }
    let d = predictor::image_decisions(p, hidden)?;
    match cfg.selection {
        Selection::Argmax => Ok(predictor::decisions_to_mask(&d, false).kept_indices()),
        Selection::Topk => predictor::select_topk_keep(&d, cfg.image_keep_rate),
    }
}

/// Raw (not force-kept) output-token keep flags for layer-`l` features of
/// output tokens `first_index..first_index + features.rows()`.
pub fn output_flags(
    p: &PredictorWeights,
    features: &Matrix,
    first_index: usize,
    cfg: &SparsityConfig,
) -> Result<Vec<bool>> {
    let n = features.rows();
    if cfg.output_keep_rate >= 1.0 {
        return Ok(vec![true; n]);
    }
    Ok(match cfg.policy {
        Policy::Learned => predictor::decisions_to_mask(&predictor::output_decisions(p, features)?, false).0,
        Policy::Random { seed } => (first_index..first_index + n)
            .map(|i| random_flag(seed, i, cfg.output_keep_rate))
            .collect(),
        Policy::Structure => (first_index..first_index + n).map(|i| i % 2 == 0).collect(),
    })
}

fn random_flag(seed: u64, index: usize, rate: f64) -> bool {
    let u = (rng::mix(seed, index as u64) >> 11) as f64 / (1u64 << 53) as f64;
    u < rate
}

/// `⌊keep_rate·n⌋` flags drawn uniformly without replacement; last forced 1.
pub fn random_policy_mask(n: usize, keep_rate: f64, seed: u64) -> BinaryMask {
    let k = predictor::keep_count(keep_rate, n).min(n);
    let mut r = rng::seeded(seed);
    let idx = rand::seq::index::sample(&mut r, n, k).into_vec();
    let mut m = BinaryMask::from_indices(n, &idx);
    m.force_keep_last();
    m
}

/// Alternating `1,0,1,0,…` with the last flag forced 1.
pub fn structure_policy_mask(n: usize) -> BinaryMask {
    let mut m = BinaryMask((0..n).map(|i| i % 2 == 0).collect());
    m.force_keep_last();
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsePrefill {
    pub logits: Vec<f64>,
    pub cache: KVCacheStore,
    /// Surviving image indices (into `S^I`), ascending.
    pub image_keep: Vec<usize>,
}

/// Prefill with image-token reduction after layer `l`.
pub fn sparse_prefill(
    model: &ModelWeights,
    p: &PredictorWeights,
    state: &SequenceState,
    cfg: &SparsityConfig,
) -> Result<SparsePrefill> {
    sparse_prefill_metered(model, p, state, cfg, &mut FlopMeter::default())
}

pub fn sparse_prefill_metered(
    model: &ModelWeights,
    p: &PredictorWeights,
    state: &SequenceState,
    cfg: &SparsityConfig,
    meter: &mut FlopMeter,
) -> Result<SparsePrefill> {
    cfg.validate(model.config.num_layers)?;
    let n = state.n_prefill();
    if state.n_text() == 0 {
        return Err(Error::EmptyInput("sparse prefill without text tokens"));
    }
    let l = cfg.sparsify_layer;
    let positions: Vec<usize> = (0..n).collect();
    let mut cache = KVCacheStore::new(model.config.num_layers);
    let h = model::run_layers(model, state.prefill_tokens(), 0..l, &positions, Some(&mut cache), meter)?;
    let image_keep = select_images(p, &h.slice_rows(0, state.n_image()), cfg)?;
    let mut survivors = image_keep.clone();
    survivors.extend(state.n_image()..n);
    force_last(&mut survivors, n - 1);
    let surv_pos = survivors.clone();
    let h = model::run_layers(
        model,
        h.select_rows(&survivors),
        l..model.config.num_layers,
        &surv_pos,
        Some(&mut cache),
        meter,
    )?;
    Ok(SparsePrefill {
        logits: model::logits_of(model, h.row(h.rows() - 1))?,
        cache,
        image_keep,
    })
}

/// The token generating the next one is always computed.
fn force_last(survivors: &mut Vec<usize>, last: usize) {
    if survivors.last() != Some(&last) {
        survivors.push(last);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDecode {
    pub logits: Vec<f64>,
    pub image_keep: Vec<usize>,
    /// Output mask over `S^OT` with the last flag forced to 1.
    pub output_mask: BinaryMask,
    /// Predictor decisions over `S^OT` before forcing the last flag.
    pub raw_output_flags: Vec<bool>,
}

/// Decoding without KV cache: image and output tokens are both reduced
/// after layer `l`; the newest output token is always kept.
pub fn sparse_decode_no_cache(
    model: &ModelWeights,
    p: &PredictorWeights,
    state: &SequenceState,
    cfg: &SparsityConfig,
) -> Result<SparseDecode> {
    sparse_decode_no_cache_metered(model, p, state, cfg, &mut FlopMeter::default())
}

pub fn sparse_decode_no_cache_metered(
    model: &ModelWeights,
    p: &PredictorWeights,
    state: &SequenceState,
    cfg: &SparsityConfig,
    meter: &mut FlopMeter,
) -> Result<SparseDecode> {
    cfg.validate(model.config.num_layers)?;
    let n = state.len();
    if n == 0 {
        return Err(Error::EmptyInput("decode over an empty sequence"));
    }
    let l = cfg.sparsify_layer;
    let (ni, np) = (state.n_image(), state.n_prefill());
    let positions = state.positions();
    let h = model::run_layers(model, state.all_tokens(), 0..l, &positions, None, meter)?;
    let image_keep = select_images(p, &h.slice_rows(0, ni), cfg)?;
    let raw_output_flags = output_flags(p, &h.slice_rows(np, n - np), 0, cfg)?;
    let mut output_mask = BinaryMask(raw_output_flags.clone());
    output_mask.force_keep_last();
    let mut survivors = image_keep.clone();
    survivors.extend(ni..np);
    survivors.extend(output_mask.kept_indices().into_iter().map(|i| np + i));
    force_last(&mut survivors, n - 1);
    let h = model::run_layers(
        model,
        h.select_rows(&survivors),
        l..model.config.num_layers,
        &survivors,
        None,
        meter,
    )?;
    Ok(SparseDecode {
        logits: model::logits_of(model, h.row(h.rows() - 1))?,
        image_keep,
        output_mask,
        raw_output_flags,
    })
}

/// Keep decision of one generated output token, fixed once recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdmissionRecord {
    pub position: usize,
    pub admitted: bool,
    pub step: usize,
}

/// Append-only log of admission decisions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdmissionLog {
    records: Vec<AdmissionRecord>,
}

impl AdmissionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[AdmissionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn admitted(&self) -> usize {
        self.records.iter().filter(|r| r.admitted).count()
    }

    fn record(&mut self, position: usize, admitted: bool) {
        let step = self.records.len();
        self.records.push(AdmissionRecord {
            position,
            admitted,
            step,
        });
    }
}

/// Decoding with KV cache and online admission.
///
/// The current token attends over `cache ∪ {self}` at every layer. Its
/// layer-`l` feature decides admission: K/V always enter the caches of layers
/// `≤ l`, and enter deeper caches only when admitted.
pub fn sparse_decode_with_cache(
    model: &ModelWeights,
    p: &PredictorWeights,
    cache: &mut KVCacheStore,
    admissions: &mut AdmissionLog,
    last_token: &[f64],
    position: usize,
    cfg: &SparsityConfig,
) -> Result<Vec<f64>> {
    cfg.validate(model.config.num_layers)?;
    model::check_position(cache, position)?;
    let l = cfg.sparsify_layer;
    let mut x = last_token.to_vec();
    for li in 0..l {
        let (h, k, v) = model::layer_step(&model.config, &model.layers[li], &x, &cache.layers[li])?;
        cache.layers[li].push(&k, &v, position);
        x = h;
    }
    let feature = Matrix::from_vec(1, x.len(), x.clone())?;
    let admitted = output_flags(p, &feature, admissions.len(), cfg)?[0];
    for li in l..model.config.num_layers {
        let (h, k, v) = model::layer_step(&model.config, &model.layers[li], &x, &cache.layers[li])?;
        if admitted {
            cache.layers[li].push(&k, &v, position);
        }
        x = h;
    }
    admissions.record(position, admitted);
    model::logits_of(model, &x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationMode {
    NoCache,
    WithCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationStep {
    pub token: usize,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGeneration {
    pub image_keep: Vec<usize>,
    pub steps: Vec<GenerationStep>,
    /// Keep decision of every generated token that was fed back as input.
    pub admitted: Vec<bool>,
    /// Per-layer cache lengths at the end (with-cache mode only).
    pub cache_lens: Option<Vec<usize>>,
}

impl SparseGeneration {
    pub fn tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.token).collect()
    }
}

/// Greedy generation under sparsification in either decoding mode.
pub fn sparse_generate(
    model: &ModelWeights,
    p: &PredictorWeights,
    state: &SequenceState,
    cfg: &SparsityConfig,
    max_new_tokens: usize,
    mode: GenerationMode,
    stop_at_eos: bool,
) -> Result<SparseGeneration> {
    let mut state = state.clone();
    let mut steps = Vec::new();
    let max_len = model.config.max_seq_len;
    match mode {
        GenerationMode::NoCache => {
            let mut image_keep = Vec::new();
            let mut admitted = Vec::new();
            while steps.len() < max_new_tokens {
                let out = sparse_decode_no_cache(model, p, &state, cfg)?;
                image_keep = out.image_keep;
                admitted = out.raw_output_flags;
                let token = kernels::argmax(&out.logits);
                steps.push(GenerationStep {
                    token,
                    logits: out.logits,
                });
                if (stop_at_eos && token == model::EOS_TOKEN) || steps.len() == max_new_tokens || state.len() >= max_len {
                    break;
                }
                state.push_output(model, token)?;
            }
            Ok(SparseGeneration {
                image_keep,
                steps,
                admitted,
                cache_lens: None,
            })
        }
        GenerationMode::WithCache => {
            let pre = sparse_prefill(model, p, &state, cfg)?;
            let mut cache = pre.cache;
            let mut log = AdmissionLog::new();
            let mut logits = pre.logits;
            for o in 0..state.n_output() {
                let row = state.output.row(o).to_vec();
                logits = sparse_decode_with_cache(model, p, &mut cache, &mut log, &row, state.n_prefill() + o, cfg)?;
            }
            while steps.len() < max_new_tokens {
                let token = kernels::argmax(&logits);
                steps.push(GenerationStep {
                    token,
                    logits: logits.clone(),
                });
                let pos = state.len();
                if (stop_at_eos && token == model::EOS_TOKEN) || steps.len() == max_new_tokens || pos >= max_len {
                    break;
                }
                state.push_output(model, token)?;
                let row = state.output.row(state.n_output() - 1).to_vec();
                logits = sparse_decode_with_cache(model, p, &mut cache, &mut log, &row, pos, cfg)?;
            }
            Ok(SparseGeneration {
                image_keep: pre.image_keep,
                steps,
                admitted: log.records().iter().map(|r| r.admitted).collect(),
                cache_lens: Some(cache.layer_lens()),
            })
        }
    }
}

/// Hidden states of every token after the first `l` layers (full causal).
pub fn layer_l_hidden(model: &ModelWeights, state: &SequenceState, l: usize) -> Result<Matrix> {
    let positions = state.positions();
    model::run_layers(model, state.all_tokens(), 0..l, &positions, None, &mut FlopMeter::default())
}

/// Several sequences left-padded with zero rows to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub max_len: usize,
    /// `batch·max_len × d`, sample-major.
    pub tokens: Matrix,
    pub valid: Vec<bool>,
    pub lens: Vec<usize>,
}

impl PaddedBatch {
    /// Left-pads every sample to the longest one.
    pub fn left_pad(samples: &[&Matrix], width: usize) -> Self {
        let max_len = samples.iter().map(|s| s.rows()).max().unwrap_or(0);
        let mut tokens = Matrix::zeros(samples.len() * max_len, width);
        let mut valid = vec![false; samples.len() * max_len];
        for (b, s) in samples.iter().enumerate() {
            let pad = max_len - s.rows();
            for r in 0..s.rows() {
                tokens.row_mut(b * max_len + pad + r).copy_from_slice(s.row(r));
                valid[b * max_len + pad + r] = true;
            }
        }
        Self {
            batch: samples.len(),
            max_len,
            tokens,
            valid,
            lens: samples.iter().map(|s| s.rows()).collect(),
        }
    }

    pub fn pad(&self, b: usize) -> usize {
        self.max_len - self.lens[b]
    }

    /// Real rows of sample `b`.
    pub fn sample_rows(&self, m: &Matrix, b: usize) -> Matrix {
        m.slice_rows(b * self.max_len + self.pad(b), self.lens[b])
    }

    pub fn valid_slice(&self, b: usize) -> &[bool] {
        &self.valid[b * self.max_len..(b + 1) * self.max_len]
    }

    /// Causal mask restricted to valid columns; padding rows attend to
    /// themselves only, so they never feed real tokens.
    pub fn attention_mask(&self, b: usize) -> MaskMatrix {
        let valid = self.valid_slice(b);
        MaskMatrix::from_fn(self.max_len, self.max_len, |i, j| {
            if valid[i] {
                j <= i && valid[j]
            } else {
                i == j
            }
        })
    }
}

fn batched_layers(
    model: &ModelWeights,
    batch: &PaddedBatch,
    mut x: Matrix,
    layers: core::ops::Range<usize>,
    meter: &mut FlopMeter,
) -> Result<(Matrix, Vec<model::LayerOutput>)> {
    let masks: Vec<MaskMatrix> = (0..batch.batch).map(|b| batch.attention_mask(b)).collect();
    let segments: Vec<(usize, &MaskMatrix)> = masks.iter().enumerate().map(|(b, m)| (b * batch.max_len, m)).collect();
    let mut outs = Vec::new();
    for li in layers {
        let out = model::layer_forward_segments(&model.config, &model.layers[li], &x, &segments, meter)?;
        x = out.hidden.clone();
        outs.push(out);
    }
    Ok((x, outs))
}

/// Image decisions for all samples from one padded predictor pass.
fn batched_image_decisions(p: &PredictorWeights, images: &[Matrix]) -> Result<Vec<Matrix>> {
    let width = images.first().map_or(0, |m| m.cols());
    let refs: Vec<&Matrix> = images.iter().collect();
    let padded = PaddedBatch::left_pad(&refs, width);
    let mut out = Vec::with_capacity(images.len());
    if padded.max_len == 0 {
        return Ok(images.iter().map(|_| Matrix::zeros(0, 2)).collect());
    }
    let d = predictor::image_decisions_padded(p, &padded.tokens, padded.max_len, &padded.valid)?;
    for b in 0..padded.batch {
        out.push(padded.sample_rows(&d, b));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPrefill {
    pub logits: Vec<Vec<f64>>,
    pub image_keep: Vec<Vec<usize>>,
    pub caches: Vec<KVCacheStore>,
}

fn split_caches(
    batch: &PaddedBatch,
    outs: &[model::LayerOutput],
    first_layer: usize,
    positions: &[Vec<usize>],
    caches: &mut [KVCacheStore],
) {
    for (off, out) in outs.iter().enumerate() {
        for (b, cache) in caches.iter_mut().enumerate() {
            let k = batch.sample_rows(&out.keys, b);
            let v = batch.sample_rows(&out.values, b);
            let lc: &mut LayerCache = &mut cache.layers[first_layer + off];
            for (r, &pos) in positions[b].iter().enumerate() {
                lc.push(k.row(r), v.row(r), pos);
            }
        }
    }
}

/// Batch-parallel sparse prefill with top-k image selection per sample.
pub fn batch_sparse_prefill(
    model: &ModelWeights,
    p: &PredictorWeights,
    states: &[SequenceState],
    cfg: &SparsityConfig,
) -> Result<BatchPrefill> {
    cfg.validate(model.config.num_layers)?;
    if states.is_empty() {
        return Err(Error::EmptyInput("empty batch"));
    }
    if states.iter().any(|s| s.n_text() == 0) {
        return Err(Error::EmptyInput("sparse prefill without text tokens"));
    }
    let l = cfg.sparsify_layer;
    let d = model.config.hidden_dim;
    let mut meter = FlopMeter::default();
    let prompts: Vec<Matrix> = states.iter().map(SequenceState::prefill_tokens).collect();
    let refs: Vec<&Matrix> = prompts.iter().collect();
    let batch = PaddedBatch::left_pad(&refs, d);
    let (h, outs) = batched_layers(model, &batch, batch.tokens.clone(), 0..l, &mut meter)?;

    let mut caches: Vec<KVCacheStore> = states.iter().map(|_| KVCacheStore::new(model.config.num_layers)).collect();
    let full_pos: Vec<Vec<usize>> = states.iter().map(|s| (0..s.n_prefill()).collect()).collect();
    split_caches(&batch, &outs, 0, &full_pos, &mut caches);

    let per_sample: Vec<Matrix> = (0..batch.batch).map(|b| batch.sample_rows(&h, b)).collect();
    let images: Vec<Matrix> = states
        .iter()
        .zip(&per_sample)
        .map(|(s, hs)| hs.slice_rows(0, s.n_image()))
        .collect();
    let image_keep: Vec<Vec<usize>> = if cfg.image_keep_rate >= 1.0 {
        states.iter().map(|s| (0..s.n_image()).collect()).collect()
    } else {
        batched_image_decisions(p, &images)?
            .iter()
            .map(|dm| match cfg.selection {
                Selection::Topk => predictor::select_topk_keep(dm, cfg.image_keep_rate),
                Selection::Argmax => Ok(predictor::decisions_to_mask(dm, false).kept_indices()),
            })
            .collect::<Result<_>>()?
    };

    let mut survivors_all = Vec::new();
    let mut reduced = Vec::new();
    for (b, s) in states.iter().enumerate() {
        let mut surv = image_keep[b].clone();
        surv.extend(s.n_image()..s.n_prefill());
        force_last(&mut surv, s.n_prefill() - 1);
        reduced.push(per_sample[b].select_rows(&surv));
        survivors_all.push(surv);
    }
    let refs: Vec<&Matrix> = reduced.iter().collect();
    let batch2 = PaddedBatch::left_pad(&refs, d);
    let (h2, outs2) = batched_layers(model, &batch2, batch2.tokens.clone(), l..model.config.num_layers, &mut meter)?;
    split_caches(&batch2, &outs2, l, &survivors_all, &mut caches);
    let logits = (0..batch2.batch)
        .map(|b| {
            let last = b * batch2.max_len + batch2.max_len - 1;
            model::logits_of(model, h2.row(last))
        })
        .collect::<Result<_>>()?;
    Ok(BatchPrefill {
        logits,
        image_keep,
        caches,
    })
}

/// Batch-parallel decoding without KV cache over full per-sample histories.
pub fn batch_sparse_decode_no_cache(
    model: &ModelWeights,
    p: &PredictorWeights,
    states: &[SequenceState],
    cfg: &SparsityConfig,
) -> Result<Vec<SparseDecode>> {
    cfg.validate(model.config.num_layers)?;
    if states.is_empty() {
        return Err(Error::EmptyInput("empty batch"));
    }
    if states.iter().any(SequenceState::is_empty) {
        return Err(Error::EmptyInput("decode over an empty sequence"));
    }
    let l = cfg.sparsify_layer;
    let d = model.config.hidden_dim;
    let mut meter = FlopMeter::default();
    let seqs: Vec<Matrix> = states.iter().map(SequenceState::all_tokens).collect();
    let refs: Vec<&Matrix> = seqs.iter().collect();
    let batch = PaddedBatch::left_pad(&refs, d);
    let (h, _) = batched_layers(model, &batch, batch.tokens.clone(), 0..l, &mut meter)?;
    let per_sample: Vec<Matrix> = (0..batch.batch).map(|b| batch.sample_rows(&h, b)).collect();

    let images: Vec<Matrix> = states
        .iter()
        .zip(&per_sample)
        .map(|(s, hs)| hs.slice_rows(0, s.n_image()))
        .collect();
    let image_keep: Vec<Vec<usize>> = if cfg.image_keep_rate >= 1.0 {
        states.iter().map(|s| (0..s.n_image()).collect()).collect()
    } else {
        batched_image_decisions(p, &images)?
            .iter()
            .map(|dm| match cfg.selection {
                Selection::Topk => predictor::select_topk_keep(dm, cfg.image_keep_rate),
                Selection::Argmax => Ok(predictor::decisions_to_mask(dm, false).kept_indices()),
            })
            .collect::<Result<_>>()?
    };

    // One output-predictor pass over every output row of the batch.
    let outputs: Vec<Matrix> = states
        .iter()
        .zip(&per_sample)
        .map(|(s, hs)| hs.slice_rows(s.n_prefill(), s.n_output()))
        .collect();
    let orefs: Vec<&Matrix> = outputs.iter().collect();
    let all_out = Matrix::vstack(&orefs)?;
    let flags = output_flags_per_sample(p, &all_out, &outputs, cfg)?;

    let mut masks = Vec::new();
    let mut reduced = Vec::new();
    for (b, s) in states.iter().enumerate() {
        let raw = flags[b].clone();
        let mut m = BinaryMask(raw.clone());
        m.force_keep_last();
        let mut surv = image_keep[b].clone();
        surv.extend(s.n_image()..s.n_prefill());
        surv.extend(m.kept_indices().into_iter().map(|i| s.n_prefill() + i));
        force_last(&mut surv, s.len() - 1);
        reduced.push(per_sample[b].select_rows(&surv));
        masks.push((m, raw));
    }
    let refs: Vec<&Matrix> = reduced.iter().collect();
    let batch2 = PaddedBatch::left_pad(&refs, d);
    let (h2, _) = batched_layers(model, &batch2, batch2.tokens.clone(), l..model.config.num_layers, &mut meter)?;
    (0..batch2.batch)
        .map(|b| {
            let last = b * batch2.max_len + batch2.max_len - 1;
            Ok(SparseDecode {
                logits: model::logits_of(model, h2.row(last))?,
                image_keep: image_keep[b].clone(),
                output_mask: masks[b].0.clone(),
                raw_output_flags: masks[b].1.clone(),
            })
        })
        .collect()
}

fn output_flags_per_sample(
    p: &PredictorWeights,
    all_rows: &Matrix,
    per_sample: &[Matrix],
    cfg: &SparsityConfig,
) -> Result<Vec<Vec<bool>>> {
    let mut res = Vec::with_capacity(per_sample.len());
    if matches!(cfg.policy, Policy::Learned) && cfg.output_keep_rate < 1.0 {
        let flat = output_flags(p, all_rows, 0, cfg)?;
        let mut off = 0;
        for s in per_sample {
            res.push(flat[off..off + s.rows()].to_vec());
            off += s.rows();
        }
    } else {
        for s in per_sample {
            res.push(output_flags(p, s, 0, cfg)?);
        }
    }
    Ok(res)
}

/// Lock-step cached decoding for a batch of independent sequences. Each
/// sample owns its cache and admission log; attention runs over the caches
/// left-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDecoder {
    pub caches: Vec<KVCacheStore>,
    pub admissions: Vec<AdmissionLog>,
}

impl BatchDecoder {
    pub fn new(caches: Vec<KVCacheStore>) -> Self {
        let admissions = caches.iter().map(|_| AdmissionLog::new()).collect();
        Self { caches, admissions }
    }

    pub fn step(
        &mut self,
        model: &ModelWeights,
        p: &PredictorWeights,
        last_tokens: &[Vec<f64>],
        positions: &[usize],
        cfg: &SparsityConfig,
    ) -> Result<Vec<Vec<f64>>> {
        cfg.validate(model.config.num_layers)?;
        let bsz = self.caches.len();
        if last_tokens.len() != bsz || positions.len() != bsz {
            return Err(Error::ShapeMismatch {
                op: "BatchDecoder::step",
                lhs: (bsz, 1),
                rhs: (last_tokens.len(), positions.len()),
            });
        }
        for (c, &pos) in self.caches.iter().zip(positions) {
            model::check_position(c, pos)?;
        }
        let l = cfg.sparsify_layer;
        let mut x = Matrix::from_rows(last_tokens);
        let mut admitted = vec![true; bsz];
        for li in 0..model.config.num_layers {
            if li == l {
                let flags = output_flags_per_sample_indexed(p, &x, &self.admissions, cfg)?;
                admitted = flags;
            }
            let (h, k, v) = batched_cached_layer(model, li, &x, &self.caches)?;
            for b in 0..bsz {
                if li < l || admitted[b] {
                    self.caches[b].layers[li].push(k.row(b), v.row(b), positions[b]);
                }
            }
            x = h;
        }
        for b in 0..bsz {
            self.admissions[b].record(positions[b], admitted[b]);
        }
        (0..bsz).map(|b| model::logits_of(model, x.row(b))).collect()
    }
}

fn output_flags_per_sample_indexed(
    p: &PredictorWeights,
    x: &Matrix,
    logs: &[AdmissionLog],
    cfg: &SparsityConfig,
) -> Result<Vec<bool>> {
    if matches!(cfg.policy, Policy::Learned) {
        return output_flags(p, x, 0, cfg);
    }
    (0..x.rows())
        .map(|b| Ok(output_flags(p, &x.slice_rows(b, 1), logs[b].len(), cfg)?[0]))
        .collect()
}

/// One decoder layer for `B` single-token queries over left-padded caches.
fn batched_cached_layer(
    model: &ModelWeights,
    li: usize,
    x: &Matrix,
    caches: &[KVCacheStore],
) -> Result<(Matrix, Matrix, Matrix)> {
    let cfg = &model.config;
    let layer = &model.layers[li];
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let bsz = x.rows();
    let h = kernels::rms_norm(x, layer.attn_norm.data());
    let q = kernels::matmul(&h, &layer.wq)?;
    let k = kernels::matmul(&h, &layer.wk)?;
    let v = kernels::matmul(&h, &layer.wv)?;

    // Left-padded cache tensors, plus one trailing slot for the query itself.
    let max_len = caches.iter().map(|c| c.layers[li].len()).max().unwrap_or(0) + 1;
    let mut pk = Matrix::zeros(bsz * max_len, d);
    let mut pv = Matrix::zeros(bsz * max_len, d);
    let mut valid = vec![false; bsz * max_len];
    for b in 0..bsz {
        let lc = &caches[b].layers[li];
        let pad = max_len - 1 - lc.len();
        for r in 0..lc.len() {
            pk.row_mut(b * max_len + pad + r).copy_from_slice(lc.keys.row(r));
            pv.row_mut(b * max_len + pad + r).copy_from_slice(lc.values.row(r));
            valid[b * max_len + pad + r] = true;
        }
        pk.row_mut(b * max_len + max_len - 1).copy_from_slice(k.row(b));
        pv.row_mut(b * max_len + max_len - 1).copy_from_slice(v.row(b));
        valid[b * max_len + max_len - 1] = true;
    }

    let mut attn = Matrix::zeros(bsz, d);
    let mut scores = vec![0.0; max_len];
    let mut probs = vec![0.0; max_len];
    for b in 0..bsz {
        let admit = &valid[b * max_len..(b + 1) * max_len];
        for head in 0..cfg.num_heads {
            let cols = head * dh..(head + 1) * dh;
            let qh = &q.row(b)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = if admit[j] {
                    kernels::dot(qh, &pk.row(b * max_len + j)[cols.clone()]) * scale
                } else {
                    0.0
                };
            }
            kernels::softmax_slice_masked(&scores, admit, &mut probs);
            let out = &mut attn.row_mut(b)[cols.clone()];
            for (j, &pj) in probs.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&pv.row(b * max_len + j)[cols.clone()]) {
                    *o += pj * vv;
                }
            }
        }
    }
    let mut out = x.clone();
    out.add_assign(&kernels::matmul(&attn, &layer.wo)?);
    let h2 = kernels::rms_norm(&out, layer.ffn_norm.data());
    let mut a = kernels::matmul(&h2, &layer.ffn_in)?;
    kernels::silu_inplace(&mut a);
    out.add_assign(&kernels::matmul(&a, &layer.ffn_out)?);
    Ok((out, k, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{greedy_generate, DecodeMode, ModelConfig};
    use crate::predictor::PredictorConfig;
    use rand::Rng;

    fn setup(seed: u64) -> (ModelWeights, PredictorWeights) {
        let cfg = ModelConfig {
            hidden_dim: 16,
            ffn_dim: 32,
            vocab_size: 12,
            max_seq_len: 128,
            image_feature_dim: 8,
            ..ModelConfig::default()
        };
        let m = ModelWeights::random(cfg, seed).unwrap();
        let p = PredictorWeights::random(PredictorConfig::for_model(&cfg), seed ^ 0xabc).unwrap();
        (m, p)
    }

    fn state(m: &ModelWeights, n_img: usize, text: &[usize], seed: u64) -> SequenceState {
        let mut r = rng::seeded(seed);
        let feats: Vec<Vec<f64>> = (0..n_img)
            .map(|_| (0..m.config.image_feature_dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        m.embed_inputs(&feats, text).unwrap()
    }

    fn cfg_topk() -> SparsityConfig {
        SparsityConfig {
            selection: Selection::Topk,
            ..SparsityConfig::default()
        }
    }

    #[test]
    fn validate_rejects_bad_layer_and_rates() {
        let mut c = SparsityConfig::default();
        assert!(c.validate(4).is_ok());
        c.sparsify_layer = 4;
        assert!(c.validate(4).is_err());
        c.sparsify_layer = 0;
        assert!(c.validate(4).is_err());
        c = SparsityConfig {
            output_keep_rate: 0.0,
            ..SparsityConfig::default()
        };
        assert!(c.validate(4).is_err());
    }

    #[test]
    fn topk_image_count() {
        let (m, p) = setup(1);
        let s = state(&m, 20, &[3, 4], 2);
        let pre = sparse_prefill(&m, &p, &s, &cfg_topk()).unwrap();
        assert_eq!(pre.image_keep.len(), 4);
        let lens = pre.cache.layer_lens();
        assert_eq!(lens, vec![22, 22, 6, 6]);
    }

    #[test]
    fn dense_config_matches_unsparsified_generation() {
        let (m, p) = setup(3);
        let s = state(&m, 6, &[2, 5, 7], 4);
        let dense = SparsityConfig::dense(2);
        let reference = greedy_generate(&m, &s, 10, DecodeMode::WithCache).unwrap();
        for mode in [GenerationMode::NoCache, GenerationMode::WithCache] {
            let g = sparse_generate(&m, &p, &s, &dense, 10, mode, true).unwrap();
            assert_eq!(g.tokens(), reference);
        }
    }

    #[test]
    fn mode_equivalence_small() {
        for seed in 0..5 {
            let (m, p) = setup(seed);
            let s = state(&m, 10, &[1, 2, 3], seed + 100);
            let cfg = cfg_topk();
            let a = sparse_generate(&m, &p, &s, &cfg, 16, GenerationMode::NoCache, false).unwrap();
            let b = sparse_generate(&m, &p, &s, &cfg, 16, GenerationMode::WithCache, false).unwrap();
            assert_eq!(a.tokens(), b.tokens());
            assert_eq!(a.image_keep, b.image_keep);
            assert_eq!(a.admitted, b.admitted);
            for (x, y) in a.steps.iter().zip(&b.steps) {
                let diff = x.logits.iter().zip(&y.logits).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-9, "seed {seed}: {diff}");
            }
        }
    }

    #[test]
    fn cache_lengths_track_admissions() {
        let (m, p) = setup(7);
        let s = state(&m, 10, &[1, 2], 8);
        let g = sparse_generate(&m, &p, &s, &cfg_topk(), 20, GenerationMode::WithCache, false).unwrap();
        let lens = g.cache_lens.unwrap();
        let fed = g.steps.len() - 1;
        assert_eq!(lens[0], 12 + fed);
        assert_eq!(lens[1], 12 + fed);
        let admitted = g.admitted.iter().filter(|&&a| a).count();
        assert_eq!(lens[2], 2 + 2 + admitted);
        assert_eq!(lens[3], lens[2]);
    }

    #[test]
    fn stale_position_rejected() {
        let (m, p) = setup(9);
        let s = state(&m, 10, &[1], 1);
        assert!(matches!(
            sparse_prefill(&m, &p, &state(&m, 4, &[1], 1), &cfg_topk()),
            Err(Error::EmptyKeepSet { .. })
        ));
        let mut pre = sparse_prefill(&m, &p, &s, &cfg_topk()).unwrap();
        let mut log = AdmissionLog::new();
        let row = m.embed_token(3, 11).unwrap();
        sparse_decode_with_cache(&m, &p, &mut pre.cache, &mut log, &row, 11, &cfg_topk()).unwrap();
        let err = sparse_decode_with_cache(&m, &p, &mut pre.cache, &mut log, &row, 11, &cfg_topk());
        assert!(matches!(err, Err(Error::PositionConflict { .. })));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn decisions_stable_across_steps() {
        let (m, p) = setup(11);
        let mut s = state(&m, 8, &[4, 5], 12);
        let cfg = cfg_topk();
        let mut history: Vec<bool> = Vec::new();
        for _ in 0..12 {
            let out = sparse_decode_no_cache(&m, &p, &s, &cfg).unwrap();
            assert_eq!(&out.raw_output_flags[..history.len()], &history[..]);
            if let Some(&last) = out.output_mask.0.last() {
                assert!(last);
            }
            history = out.raw_output_flags.clone();
            s.push_output(&m, kernels::argmax(&out.logits)).unwrap();
        }
    }

    #[test]
    fn baseline_masks() {
        let m = random_policy_mask(10, 0.5, 3);
        assert!(m.0[9]);
        assert!(m.kept() == 5 || m.kept() == 6);
        assert_eq!(m, random_policy_mask(10, 0.5, 3));
        let s = structure_policy_mask(6);
        assert_eq!(s.0, vec![true, false, true, false, true, true]);
        assert!(structure_policy_mask(0).is_empty());
    }

    #[test]
    fn random_policy_rate_is_close() {
        let flags: Vec<bool> = (0..20000).map(|i| random_flag(5, i, 0.5)).collect();
        let frac = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        assert!((frac - 0.5).abs() < 0.02);
    }

    #[test]
    fn batch_parity() {
        let (m, p) = setup(13);
        let cfg = cfg_topk();
        let mut states = vec![
            state(&m, 10, &[1, 2, 3], 1),
            state(&m, 5, &[4], 2),
            state(&m, 15, &[5, 6], 3),
        ];
        for (i, st) in states.iter_mut().enumerate() {
            for t in 0..i + 2 {
                st.push_output(&m, (t + i) % 11 + 1).unwrap();
            }
        }
        let bd = batch_sparse_decode_no_cache(&m, &p, &states, &cfg).unwrap();
        for (st, b) in states.iter().zip(&bd) {
            let single = sparse_decode_no_cache(&m, &p, st, &cfg).unwrap();
            assert_eq!(single.image_keep, b.image_keep);
            assert_eq!(single.output_mask, b.output_mask);
            let diff = single.logits.iter().zip(&b.logits).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9);
        }

        let prompts: Vec<SequenceState> = vec![state(&m, 10, &[1, 2, 3], 1), state(&m, 5, &[4], 2)];
        let bp = batch_sparse_prefill(&m, &p, &prompts, &cfg).unwrap();
        let mut dec = BatchDecoder::new(bp.caches.clone());
        let mut singles: Vec<(KVCacheStore, AdmissionLog)> = Vec::new();
        for (i, st) in prompts.iter().enumerate() {
            let sp = sparse_prefill(&m, &p, st, &cfg).unwrap();
            assert_eq!(sp.image_keep, bp.image_keep[i]);
            let diff = sp.logits.iter().zip(&bp.logits[i]).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9);
            singles.push((sp.cache, AdmissionLog::new()));
        }
        for step in 0..6 {
            let pos: Vec<usize> = prompts.iter().map(|s| s.n_prefill() + step).collect();
            let rows: Vec<Vec<f64>> = pos.iter().map(|&q| m.embed_token(step % 11 + 1, q).unwrap()).collect();
            let bl = dec.step(&m, &p, &rows, &pos, &cfg).unwrap();
            for (i, (cache, log)) in singles.iter_mut().enumerate() {
                let sl = sparse_decode_with_cache(&m, &p, cache, log, &rows[i], pos[i], &cfg).unwrap();
                let diff = sl.iter().zip(&bl[i]).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-9);
                assert_eq!(log, &dec.admissions[i]);
            }
        }
    }
}
