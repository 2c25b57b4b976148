//! Toy decoder-only transformer with image / text / output token partitions.
//!
//! Pre-norm blocks (RMS normalisation, multi-head causal attention, SiLU
//! feed-forward) over learned absolute position embeddings. Positions are the
//! ORIGINAL positions of tokens, so later token removal never renumbers the
//! survivors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, MaskMatrix, Matrix};
use crate::rng;

/// Reserved end-of-sequence token id.
pub const EOS_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub image_feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 64,
            max_seq_len: 4608,
            image_feature_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("image_feature_dim", self.image_feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(alloc::format!("{name} must be >= 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim,
                self.num_heads
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Total number of scalar parameters of [`ModelWeights`] for this config.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let per_layer = 4 * d * d + 2 * d * self.ffn_dim + 2 * d;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.image_feature_dim * d
            + d
            + self.num_layers * per_layer
            + d
            + d * self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// 1 × d.
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// 1 × d.
    pub ffn_norm: Matrix,
    /// d × ffn_dim.
    pub ffn_in: Matrix,
    /// ffn_dim × d.
    pub ffn_out: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub image_proj: Matrix,
    /// 1 × d.
    pub image_bias: Matrix,
    pub layers: Vec<LayerWeights>,
    /// 1 × d.
    pub final_norm: Matrix,
    pub lm_head: Matrix,
}

impl ModelWeights {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: Matrix::filled(1, d, 1.0),
                wq: rng::normal_matrix(&mut r, d, d, inv(d)),
                wk: rng::normal_matrix(&mut r, d, d, inv(d)),
                wv: rng::normal_matrix(&mut r, d, d, inv(d)),
                wo: rng::normal_matrix(&mut r, d, d, inv(d)),
                ffn_norm: Matrix::filled(1, d, 1.0),
                ffn_in: rng::normal_matrix(&mut r, d, f, inv(d)),
                ffn_out: rng::normal_matrix(&mut r, f, d, inv(f)),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding: rng::normal_matrix(&mut r, config.vocab_size, d, 1.0),
            position_embedding: rng::normal_matrix(&mut r, config.max_seq_len, d, 0.1),
            image_proj: rng::normal_matrix(
                &mut r,
                config.image_feature_dim,
                d,
                inv(config.image_feature_dim),
            ),
            image_bias: Matrix::zeros(1, d),
            layers,
            final_norm: Matrix::filled(1, d, 1.0),
            lm_head: rng::normal_matrix(&mut r, d, config.vocab_size, inv(d)),
        })
    }

    /// Copy with room for `max_seq_len` positions. Existing position rows are
    /// kept; new rows are drawn like a fresh initialisation.
    pub fn with_max_seq_len(&self, max_seq_len: usize, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            max_seq_len,
            ..self.config
        };
        config.validate()?;
        let d = config.hidden_dim;
        let keep = self.config.max_seq_len.min(max_seq_len);
        let mut data = self.position_embedding.data()[..keep * d].to_vec();
        if max_seq_len > keep {
            let extra = rng::normal_matrix(&mut rng::seeded(seed), max_seq_len - keep, d, 0.1);
            data.extend_from_slice(extra.data());
        }
        Ok(Self {
            config,
            position_embedding: Matrix::from_vec(max_seq_len, d, data)?,
            ..self.clone()
        })
    }

    /// All parameter tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.image_proj,
            &self.image_bias,
        ];
        for l in &self.layers {
            v.extend([
                &l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.ffn_in, &l.ffn_out,
            ]);
        }
        v.push(&self.final_norm);
        v.push(&self.lm_head);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.image_proj,
            &mut self.image_bias,
        ];
        for l in &mut self.layers {
            v.push(&mut l.attn_norm);
            v.push(&mut l.wq);
            v.push(&mut l.wk);
            v.push(&mut l.wv);
            v.push(&mut l.wo);
            v.push(&mut l.ffn_norm);
            v.push(&mut l.ffn_in);
            v.push(&mut l.ffn_out);
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.lm_head);
        v
    }

    /// Token embedding plus the position embedding of `position`.
    pub fn embed_token(&self, token: usize, position: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        if position >= self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: position + 1,
                max: self.config.max_seq_len,
            });
        }
        Ok(self
            .token_embedding
            .row(token)
            .iter()
            .zip(self.position_embedding.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }

    fn embed_image(&self, feature: &[f64], position: usize) -> Result<Vec<f64>> {
        if feature.len() != self.config.image_feature_dim {
            return Err(Error::ShapeMismatch {
                op: "embed_image",
                lhs: (1, feature.len()),
                rhs: (self.config.image_feature_dim, self.config.hidden_dim),
            });
        }
        let f = Matrix::from_vec(1, feature.len(), feature.to_vec())?;
        let mut out = kernels::linear(&f, &self.image_proj, Some(self.image_bias.data()))?;
        for (o, p) in out.data_mut().iter_mut().zip(self.position_embedding.row(position)) {
            *o += p;
        }
        Ok(out.into_vec())
    }

    /// Projects image features and embeds text ids; positions run 0..N-1.
    pub fn embed_inputs(&self, image_features: &[Vec<f64>], text_ids: &[usize]) -> Result<SequenceState> {
        let n = image_features.len() + text_ids.len();
        if n == 0 {
            return Err(Error::EmptyInput("no image features and no text ids"));
        }
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        let d = self.config.hidden_dim;
        let mut image = Matrix::zeros(0, d);
        for (p, feat) in image_features.iter().enumerate() {
            image.push_row(&self.embed_image(feat, p)?);
        }
        let mut text = Matrix::zeros(0, d);
        for (i, &t) in text_ids.iter().enumerate() {
            text.push_row(&self.embed_token(t, image_features.len() + i)?);
        }
        Ok(SequenceState {
            image,
            text,
            text_ids: text_ids.to_vec(),
            output: Matrix::zeros(0, d),
            output_ids: Vec::new(),
        })
    }
}

/// Embedded token partitions `S^I`, `S^T`, `S^OT` in concatenation order.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceState {
    pub image: Matrix,
    pub text: Matrix,
    pub text_ids: Vec<usize>,
    pub output: Matrix,
    pub output_ids: Vec<usize>,
}

impl SequenceState {
    pub fn n_image(&self) -> usize {
        self.image.rows()
    }

    pub fn n_text(&self) -> usize {
        self.text.rows()
    }

    pub fn n_output(&self) -> usize {
        self.output.rows()
    }

    pub fn n_prefill(&self) -> usize {
        self.n_image() + self.n_text()
    }

    pub fn len(&self) -> usize {
        self.n_prefill() + self.n_output()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Original position of every token, image → text → output.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn prefill_tokens(&self) -> Matrix {
        Matrix::vstack(&[&self.image, &self.text]).expect("same width")
    }

    pub fn all_tokens(&self) -> Matrix {
        Matrix::vstack(&[&self.image, &self.text, &self.output]).expect("same width")
    }

    /// Embeds `token` at the next position and appends it to `S^OT`.
    pub fn push_output(&mut self, model: &ModelWeights, token: usize) -> Result<()> {
        let row = model.embed_token(token, self.len())?;
        self.output.push_row(&row);
        self.output_ids.push(token);
        Ok(())
    }
}

/// Retained keys and values of one layer plus their original positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, key: &[f64], value: &[f64], position: usize) {
        self.keys.push_row(key);
        self.values.push_row(value);
        self.positions.push(position);
    }
}

impl Default for Matrix {
    fn default() -> Self {
        Matrix::zeros(0, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCacheStore {
    pub layers: Vec<LayerCache>,
}

impl KVCacheStore {
    pub fn new(num_layers: usize) -> Self {
        Self {
            layers: vec![LayerCache::default(); num_layers],
        }
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }

    /// Largest cached position over all layers.
    pub fn last_position(&self) -> Option<usize> {
        self.layers
            .iter()
            .filter_map(|l| l.positions.last().copied())
            .max()
    }
}

/// Counts dense matrix-multiply FLOPs (2·m·k·n per product).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopMeter {
    pub matmul_flops: u64,
}

impl FlopMeter {
    #[inline]
    pub fn matmul(&mut self, m: usize, k: usize, n: usize) {
        self.matmul_flops += 2 * (m as u64) * (k as u64) * (n as u64);
    }
}

fn metered_matmul(a: &Matrix, b: &Matrix, meter: &mut FlopMeter) -> Result<Matrix> {
    meter.matmul(a.rows(), a.cols(), b.cols());
    kernels::matmul(a, b)
}

/// Output of one decoder layer together with the K/V rows it produced.
pub struct LayerOutput {
    pub hidden: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

/// One pre-norm decoder block over a token matrix, attending only where
/// `attn_mask` is set.
pub fn decoder_layer_forward(
    config: &ModelConfig,
    layer: &LayerWeights,
    tokens: &Matrix,
    attn_mask: &MaskMatrix,
) -> Result<Matrix> {
    Ok(layer_forward(config, layer, tokens, attn_mask, &mut FlopMeter::default())?.hidden)
}

pub fn layer_forward(
    config: &ModelConfig,
    layer: &LayerWeights,
    x: &Matrix,
    attn_mask: &MaskMatrix,
    meter: &mut FlopMeter,
) -> Result<LayerOutput> {
    if attn_mask.shape() != (x.rows(), x.rows()) {
        return Err(Error::ShapeMismatch {
            op: "decoder_layer_forward",
            lhs: x.shape(),
            rhs: attn_mask.shape(),
        });
    }
    layer_forward_segments(config, layer, x, &[(0, attn_mask)], meter)
}

/// Decoder block over several independent sequences stacked row-wise.
///
/// Projections and the feed-forward sublayer run over all rows at once;
/// attention runs inside each `(start row, mask)` segment only.
pub fn layer_forward_segments(
    config: &ModelConfig,
    layer: &LayerWeights,
    x: &Matrix,
    segments: &[(usize, &MaskMatrix)],
    meter: &mut FlopMeter,
) -> Result<LayerOutput> {
    let d = config.hidden_dim;
    let h = kernels::rms_norm(x, layer.attn_norm.data());
    let q = metered_matmul(&h, &layer.wq, meter)?;
    let k = metered_matmul(&h, &layer.wk, meter)?;
    let v = metered_matmul(&h, &layer.wv, meter)?;

    let mut attn = Matrix::zeros(x.rows(), d);
    for &(start, mask) in segments {
        let n = mask.rows();
        let o = attention(
            config.num_heads,
            &q.slice_rows(start, n),
            &k.slice_rows(start, n),
            &v.slice_rows(start, n),
            mask,
            meter,
        )?;
        for r in 0..n {
            attn.row_mut(start + r).copy_from_slice(o.row(r));
        }
    }
    let mut out = x.clone();
    out.add_assign(&metered_matmul(&attn, &layer.wo, meter)?);

    let h2 = kernels::rms_norm(&out, layer.ffn_norm.data());
    let mut a = metered_matmul(&h2, &layer.ffn_in, meter)?;
    kernels::silu_inplace(&mut a);
    out.add_assign(&metered_matmul(&a, &layer.ffn_out, meter)?);
    Ok(LayerOutput {
        hidden: out,
        keys: k,
        values: v,
    })
}

/// Scaled dot-product multi-head attention with an admission mask.
pub(crate) fn attention(
    num_heads: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskMatrix,
    meter: &mut FlopMeter,
) -> Result<Matrix> {
    let n = q.rows();
    let m = k.rows();
    if mask.shape() != (n, m) {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: (n, m),
            rhs: mask.shape(),
        });
    }
    let dh = q.cols() / num_heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut out = Matrix::zeros(n, q.cols());
    let mut probs = Matrix::zeros(n, m);
    for head in 0..num_heads {
        let qh = q.slice_cols(head * dh, dh);
        let kh = k.slice_cols(head * dh, dh);
        let vh = v.slice_cols(head * dh, dh);
        meter.matmul(n, dh, m);
        let mut scores = kernels::matmul_transb(&qh, &kh)?;
        scores.scale(scale);
        for r in 0..n {
            if !kernels::softmax_slice_masked(scores.row(r), mask.row(r), probs.row_mut(r)) {
                return Err(Error::EmptyMaskRow { row: r });
            }
        }
        out.set_cols(head * dh, &metered_matmul(&probs, &vh, meter)?);
    }
    Ok(out)
}

/// Single-token decoder block step: the token attends over `cache ∪ {self}`.
/// Returns the new hidden row and the token's own key / value rows; the
/// caller decides whether they enter the cache.
pub fn layer_step(
    config: &ModelConfig,
    layer: &LayerWeights,
    x: &[f64],
    cache: &LayerCache,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = config.hidden_dim;
    let dh = config.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let xm = Matrix::from_vec(1, d, x.to_vec())?;
    let h = kernels::rms_norm(&xm, layer.attn_norm.data());
    let q = kernels::matmul(&h, &layer.wq)?;
    let k = kernels::matmul(&h, &layer.wk)?;
    let v = kernels::matmul(&h, &layer.wv)?;

    let m = cache.len();
    let mut attn = Matrix::zeros(1, d);
    let mut scores = vec![0.0; m + 1];
    let mut probs = vec![0.0; m + 1];
    for head in 0..config.num_heads {
        let cols = head * dh..(head + 1) * dh;
        let qh = &q.row(0)[cols.clone()];
        for (j, s) in scores.iter_mut().take(m).enumerate() {
            *s = kernels::dot(qh, &cache.keys.row(j)[cols.clone()]) * scale;
        }
        scores[m] = kernels::dot(qh, &k.row(0)[cols.clone()]) * scale;
        kernels::softmax_slice(&scores, &mut probs);
        let out = &mut attn.row_mut(0)[cols.clone()];
        for (j, &p) in probs.iter().enumerate() {
            let vrow = if j < m {
                &cache.values.row(j)[cols.clone()]
            } else {
                &v.row(0)[cols.clone()]
            };
            for (o, &vv) in out.iter_mut().zip(vrow) {
                *o += p * vv;
            }
        }
    }
    let mut out = xm;
    out.add_assign(&kernels::matmul(&attn, &layer.wo)?);
    let h2 = kernels::rms_norm(&out, layer.ffn_norm.data());
    let mut a = kernels::matmul(&h2, &layer.ffn_in)?;
    kernels::silu_inplace(&mut a);
    out.add_assign(&kernels::matmul(&a, &layer.ffn_out)?);
    Ok((out.into_vec(), k.into_vec(), v.into_vec()))
}

/// Next-token logits of a final hidden row.
pub fn logits_of(model: &ModelWeights, hidden: &[f64]) -> Result<Vec<f64>> {
    let d = model.config.hidden_dim;
    let mut normed = vec![0.0; d];
    kernels::rms_norm_row(hidden, model.final_norm.data(), &mut normed);
    let h = Matrix::from_vec(1, d, normed)?;
    Ok(kernels::matmul(&h, &model.lm_head)?.into_vec())
}

/// Runs layers `range` over `x` with a causal mask, optionally recording K/V
/// rows into `cache` (positions given per row).
pub(crate) fn run_layers(
    model: &ModelWeights,
    mut x: Matrix,
    layers: core::ops::Range<usize>,
    positions: &[usize],
    mut cache: Option<&mut KVCacheStore>,
    meter: &mut FlopMeter,
) -> Result<Matrix> {
    let mask = MaskMatrix::causal(x.rows());
    for li in layers {
        let out = layer_forward(&model.config, &model.layers[li], &x, &mask, meter)?;
        if let Some(c) = cache.as_deref_mut() {
            let lc = &mut c.layers[li];
            for (r, &p) in positions.iter().enumerate() {
                lc.push(out.keys.row(r), out.values.row(r), p);
            }
        }
        x = out.hidden;
    }
    Ok(x)
}

/// Full prefill over `S^I ∪ S^T`: final-position logits and a populated cache.
pub fn prefill(model: &ModelWeights, state: &SequenceState) -> Result<(Vec<f64>, KVCacheStore)> {
    prefill_metered(model, state, &mut FlopMeter::default())
}

pub fn prefill_metered(
    model: &ModelWeights,
    state: &SequenceState,
    meter: &mut FlopMeter,
) -> Result<(Vec<f64>, KVCacheStore)> {
    let n = state.n_prefill();
    if n == 0 {
        return Err(Error::EmptyInput("prefill over an empty prompt"));
    }
    let mut cache = KVCacheStore::new(model.config.num_layers);
    let positions: Vec<usize> = (0..n).collect();
    let h = run_layers(
        model,
        state.prefill_tokens(),
        0..model.config.num_layers,
        &positions,
        Some(&mut cache),
        meter,
    )?;
    Ok((logits_of(model, h.row(n - 1))?, cache))
}

/// Full forward over `S^P ∪ S^OT`, logits at the last position.
pub fn decode_step_no_cache(model: &ModelWeights, state: &SequenceState) -> Result<Vec<f64>> {
    if state.is_empty() {
        return Err(Error::EmptyInput("decode over an empty sequence"));
    }
    let positions = state.positions();
    let h = run_layers(
        model,
        state.all_tokens(),
        0..model.config.num_layers,
        &positions,
        None,
        &mut FlopMeter::default(),
    )?;
    logits_of(model, h.row(state.len() - 1))
}

/// One cached decoding step for the embedded `last_token` at `position`.
pub fn decode_step_with_cache(
    model: &ModelWeights,
    cache: &mut KVCacheStore,
    last_token: &[f64],
    position: usize,
) -> Result<Vec<f64>> {
    check_position(cache, position)?;
    let mut x = last_token.to_vec();
    for (li, layer) in model.layers.iter().enumerate() {
        let (h, k, v) = layer_step(&model.config, layer, &x, &cache.layers[li])?;
        cache.layers[li].push(&k, &v, position);
        x = h;
    }
    logits_of(model, &x)
}

pub(crate) fn check_position(cache: &KVCacheStore, position: usize) -> Result<()> {
    if let Some(last) = cache.last_position() {
        if position <= last {
            return Err(Error::PositionConflict { position, last });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    NoCache,
    WithCache,
}

/// Greedy argmax decoding; stops after EOS or `max_new_tokens`, or when the
/// position budget `max_seq_len` is exhausted.
pub fn greedy_generate(
    model: &ModelWeights,
    state: &SequenceState,
    max_new_tokens: usize,
    mode: DecodeMode,
) -> Result<Vec<usize>> {
    let mut state = state.clone();
    let mut out = Vec::new();
    if max_new_tokens == 0 {
        return Ok(out);
    }
    match mode {
        DecodeMode::NoCache => loop {
            let logits = decode_step_no_cache(model, &state)?;
            let t = kernels::argmax(&logits);
            out.push(t);
            if t == EOS_TOKEN || out.len() == max_new_tokens || state.len() >= model.config.max_seq_len {
                break;
            }
            state.push_output(model, t)?;
        },
        DecodeMode::WithCache => {
            let (mut logits, mut cache) = prefill(model, &state)?;
            for o in 0..state.n_output() {
                logits = decode_step_with_cache(
                    model,
                    &mut cache,
                    state.output.row(o),
                    state.n_prefill() + o,
                )?;
            }
            loop {
                let t = kernels::argmax(&logits);
                out.push(t);
                let pos = state.len();
                if t == EOS_TOKEN || out.len() == max_new_tokens || pos >= model.config.max_seq_len {
                    break;
                }
                state.push_output(model, t)?;
                logits = decode_step_with_cache(model, &mut cache, state.output.row(state.n_output() - 1), pos)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 11,
            max_seq_len: 32,
            image_feature_dim: 5,
        }
    }

    fn feats(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| (0..dim).map(|_| rng::normal(&mut r)).collect()).collect()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        c = tiny();
        c.vocab_size = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn param_count_matches_tensors() {
        let m = ModelWeights::random(tiny(), 1).unwrap();
        let n: usize = m.tensors().iter().map(|t| t.data().len()).sum();
        assert_eq!(n, tiny().param_count());
    }

    #[test]
    fn longer_context_keeps_existing_positions() {
        let m = ModelWeights::random(tiny(), 1).unwrap();
        let big = m.with_max_seq_len(80, 9).unwrap();
        assert_eq!(big.position_embedding.rows(), 80);
        assert_eq!(&big.position_embedding.data()[..32 * 8], m.position_embedding.data());
        assert_eq!(big.layers, m.layers);
        let s = m.embed_inputs(&feats(3, 5, 1), &[1, 2]).unwrap();
        let t = big.embed_inputs(&feats(3, 5, 1), &[1, 2]).unwrap();
        assert_eq!(s.all_tokens(), t.all_tokens());
    }

    #[test]
    fn embed_inputs_partitions() {
        let m = ModelWeights::random(tiny(), 2).unwrap();
        let s = m.embed_inputs(&[], &[1, 2, 3]).unwrap();
        assert_eq!((s.n_image(), s.n_text(), s.n_output()), (0, 3, 0));
        assert_eq!(m.embed_inputs(&[], &[]).unwrap_err(), Error::EmptyInput("no image features and no text ids"));
        let too_long = feats(40, 5, 3);
        assert!(matches!(
            m.embed_inputs(&too_long, &[1]),
            Err(Error::SequenceTooLong { len: 41, max: 32 })
        ));
    }

    #[test]
    fn embed_inputs_full_scale_prompt_size() {
        let mut cfg = tiny();
        cfg.max_seq_len = 600;
        let m = ModelWeights::random(cfg, 4).unwrap();
        let s = m.embed_inputs(&feats(576, 5, 5), &[1; 8]).unwrap();
        assert_eq!(s.len(), 584);
        assert_eq!(s.positions().last(), Some(&583));
    }

    #[test]
    fn layer_forward_position_zero_matches_single_token() {
        let cfg = tiny();
        let m = ModelWeights::random(cfg, 6).unwrap();
        let tok = m.embed_token(3, 0).unwrap();
        let one = Matrix::from_rows(&[tok.clone()]);
        let two = Matrix::from_rows(&[tok.clone(), tok]);
        let a = decoder_layer_forward(&cfg, &m.layers[0], &one, &MaskMatrix::causal(1)).unwrap();
        let b = decoder_layer_forward(&cfg, &m.layers[0], &two, &MaskMatrix::causal(2)).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(b.shape(), two.shape());
    }

    #[test]
    fn diagonal_mask_isolates_tokens() {
        let cfg = tiny();
        let m = ModelWeights::random(cfg, 7).unwrap();
        let s = m.embed_inputs(&[], &[1, 2, 3, 4]).unwrap();
        let x = s.all_tokens();
        let full = decoder_layer_forward(&cfg, &m.layers[0], &x, &MaskMatrix::identity(4)).unwrap();
        for r in 0..4 {
            let single = decoder_layer_forward(
                &cfg,
                &m.layers[0],
                &x.select_rows(&[r]),
                &MaskMatrix::causal(1),
            )
            .unwrap();
            assert_eq!(full.row(r), single.row(0));
        }
    }

    #[test]
    fn prefill_cache_sizes_and_normalised_logits() {
        let m = ModelWeights::random(tiny(), 8).unwrap();
        let s = m.embed_inputs(&feats(3, 5, 9), &[4, 5]).unwrap();
        let (logits, cache) = prefill(&m, &s).unwrap();
        assert_eq!(cache.layer_lens(), vec![5, 5]);
        let probs = kernels::softmax_rows(&Matrix::from_rows(&[logits.clone()]));
        assert!((probs.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(decode_step_no_cache(&m, &s).unwrap(), logits);
    }

    #[test]
    fn cached_decode_matches_full_forward() {
        let m = ModelWeights::random(tiny(), 10).unwrap();
        let mut s = m.embed_inputs(&feats(2, 5, 11), &[1, 2]).unwrap();
        let (_, mut cache) = prefill(&m, &s).unwrap();
        for t in [3, 7, 9] {
            s.push_output(&m, t).unwrap();
            let pos = s.len() - 1;
            let full = decode_step_no_cache(&m, &s).unwrap();
            let cached = decode_step_with_cache(&m, &mut cache, s.output.row(s.n_output() - 1), pos).unwrap();
            let diff = full.iter().zip(&cached).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9, "{diff}");
            assert!(cache.layer_lens().iter().all(|&l| l == pos + 1));
        }
    }

    #[test]
    fn cached_decode_rejects_stale_position() {
        let m = ModelWeights::random(tiny(), 12).unwrap();
        let s = m.embed_inputs(&[], &[1, 2]).unwrap();
        let (_, mut cache) = prefill(&m, &s).unwrap();
        let tok = m.embed_token(3, 1).unwrap();
        assert_eq!(
            decode_step_with_cache(&m, &mut cache, &tok, 1).unwrap_err(),
            Error::PositionConflict { position: 1, last: 1 }
        );
    }

    #[test]
    fn generation_modes_agree() {
        let m = ModelWeights::random(tiny(), 13).unwrap();
        let s = m.embed_inputs(&feats(2, 5, 14), &[5, 6]).unwrap();
        assert!(greedy_generate(&m, &s, 0, DecodeMode::WithCache).unwrap().is_empty());
        let a = greedy_generate(&m, &s, 12, DecodeMode::NoCache).unwrap();
        let b = greedy_generate(&m, &s, 12, DecodeMode::WithCache).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eos_first_prediction_stops() {
        let mut m = ModelWeights::random(tiny(), 15).unwrap();
        // Force EOS by biasing the head column of the reserved id.
        for r in 0..m.lm_head.rows() {
            for c in 0..m.lm_head.cols() {
                m.lm_head.set(r, c, if c == EOS_TOKEN { 1.0 } else { 0.0 });
            }
        }
        m.final_norm = Matrix::filled(1, 8, 0.0);
        let s = m.embed_inputs(&[], &[1]).unwrap();
        // All-zero logits; argmax ties go to index 0 == EOS.
        assert_eq!(greedy_generate(&m, &s, 5, DecodeMode::NoCache).unwrap(), vec![EOS_TOKEN]);
        assert_eq!(greedy_generate(&m, &s, 5, DecodeMode::WithCache).unwrap(), vec![EOS_TOKEN]);
    }
}
