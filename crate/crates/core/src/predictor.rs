//! Learnable keep/drop predictors.
//!
//! The image predictor projects layer-`l` image hidden states to a narrow
//! width, mixes them with two bidirectional self-attention blocks and scores
//! each token with a three-layer decision MLP. The output-token predictor is
//! the same projection and decision MLP without attention blocks, so every
//! decision depends on that token's own feature only.
//!
//! Decision matrices are `n × 2`: column 0 is the drop score, column 1 the
//! keep score.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, Matrix};
use crate::model::ModelConfig;
use crate::rng;

pub const DROP: usize = 0;
pub const KEEP: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictorConfig {
    pub input_dim: usize,
    pub width: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Hidden width of the feed-forward sublayer inside each block, as a
    /// multiple of `width`.
    pub block_ffn_ratio: usize,
}

impl PredictorConfig {
    /// Width scaled to the model the way 512 relates to a 4096-wide decoder.
    pub fn for_model(model: &ModelConfig) -> Self {
        let width = (model.hidden_dim / 8).max(4);
        Self {
            input_dim: model.hidden_dim,
            width,
            num_heads: if width % 4 == 0 && width >= 32 { 4 } else { 1 },
            num_blocks: 2,
            block_ffn_ratio: 4,
        }
    }

    /// Width 512 with four heads, for a decoder of width `input_dim`.
    pub fn full_scale(input_dim: usize) -> Self {
        Self {
            input_dim,
            width: 512,
            num_heads: 4,
            num_blocks: 2,
            block_ffn_ratio: 4,
        }
    }

    /// Decision MLP widths `width → width/2 → width/4 → 2`.
    pub fn mlp_dims(&self) -> [usize; 4] {
        [self.width, (self.width / 2).max(1), (self.width / 4).max(1), 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "predictor width {} not divisible into {} heads",
                self.width,
                self.num_heads
            )));
        }
        Ok(())
    }

    fn head_params(&self) -> usize {
        let [a, b, c, o] = self.mlp_dims();
        a + a * b + b + b * c + c + c * o + o
    }

    fn block_params(&self) -> usize {
        let w = self.width;
        let f = w * self.block_ffn_ratio;
        2 * w + 4 * w * w + w * f + f + f * w + w
    }

    pub fn image_param_count(&self) -> usize {
        self.input_dim * self.width + self.width + self.num_blocks * self.block_params() + self.head_params()
    }

    pub fn output_param_count(&self) -> usize {
        self.input_dim * self.width + self.width + self.head_params()
    }

    pub fn param_count(&self) -> usize {
        self.image_param_count() + self.output_param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionHead {
    pub norm: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorBlock {
    pub norm1: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: Matrix,
    pub fc1: Matrix,
    pub b1: Matrix,
    pub fc2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePredictor {
    pub proj: Matrix,
    pub proj_bias: Matrix,
    pub blocks: Vec<PredictorBlock>,
    pub head: DecisionHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputPredictor {
    pub proj: Matrix,
    pub proj_bias: Matrix,
    pub head: DecisionHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorWeights {
    pub config: PredictorConfig,
    pub image: ImagePredictor,
    pub output: OutputPredictor,
}

fn init_head(cfg: &PredictorConfig, r: &mut rng::DetRng) -> DecisionHead {
    let [a, b, c, o] = cfg.mlp_dims();
    let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
    DecisionHead {
        norm: Matrix::filled(1, a, 1.0),
        w1: rng::normal_matrix(r, a, b, inv(a)),
        b1: Matrix::zeros(1, b),
        w2: rng::normal_matrix(r, b, c, inv(b)),
        b2: Matrix::zeros(1, c),
        w3: rng::normal_matrix(r, c, o, inv(c)),
        b3: Matrix::zeros(1, o),
    }
}

impl PredictorWeights {
    pub fn random(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let w = config.width;
        let f = w * config.block_ffn_ratio;
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        let blocks = (0..config.num_blocks)
            .map(|_| PredictorBlock {
                norm1: Matrix::filled(1, w, 1.0),
                wq: rng::normal_matrix(&mut r, w, w, inv(w)),
                wk: rng::normal_matrix(&mut r, w, w, inv(w)),
                wv: rng::normal_matrix(&mut r, w, w, inv(w)),
                wo: rng::normal_matrix(&mut r, w, w, inv(w)),
                norm2: Matrix::filled(1, w, 1.0),
                fc1: rng::normal_matrix(&mut r, w, f, inv(w)),
                b1: Matrix::zeros(1, f),
                fc2: rng::normal_matrix(&mut r, f, w, inv(f)),
                b2: Matrix::zeros(1, w),
            })
            .collect();
        let image = ImagePredictor {
            proj: rng::normal_matrix(&mut r, config.input_dim, w, inv(config.input_dim)),
            proj_bias: Matrix::zeros(1, w),
            blocks,
            head: init_head(&config, &mut r),
        };
        let output = OutputPredictor {
            proj: rng::normal_matrix(&mut r, config.input_dim, w, inv(config.input_dim)),
            proj_bias: Matrix::zeros(1, w),
            head: init_head(&config, &mut r),
        };
        Ok(Self {
            config,
            image,
            output,
        })
    }

    /// Every tensor zeroed (including normalisation gains).
    pub fn zeroed(config: PredictorConfig) -> Result<Self> {
        let mut p = Self::random(config, 0)?;
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        Ok(p)
    }

    pub fn image_tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.image.proj, &self.image.proj_bias];
        for b in &self.image.blocks {
            v.extend([
                &b.norm1, &b.wq, &b.wk, &b.wv, &b.wo, &b.norm2, &b.fc1, &b.b1, &b.fc2, &b.b2,
            ]);
        }
        v.extend(head_tensors(&self.image.head));
        v
    }

    pub fn output_tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.output.proj, &self.output.proj_bias];
        v.extend(head_tensors(&self.output.head));
        v
    }

    /// Image predictor tensors followed by output predictor tensors.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.image_tensors();
        v.extend(self.output_tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = vec![&mut self.image.proj, &mut self.image.proj_bias];
        for b in &mut self.image.blocks {
            v.push(&mut b.norm1);
            v.push(&mut b.wq);
            v.push(&mut b.wk);
            v.push(&mut b.wv);
            v.push(&mut b.wo);
            v.push(&mut b.norm2);
            v.push(&mut b.fc1);
            v.push(&mut b.b1);
            v.push(&mut b.fc2);
            v.push(&mut b.b2);
        }
        head_tensors_mut(&mut self.image.head, &mut v);
        v.push(&mut self.output.proj);
        v.push(&mut self.output.proj_bias);
        head_tensors_mut(&mut self.output.head, &mut v);
        v
    }

    pub fn image_tensor_count(&self) -> usize {
        2 + 10 * self.image.blocks.len() + 7
    }
}

fn head_tensors(h: &DecisionHead) -> [&Matrix; 7] {
    [&h.norm, &h.w1, &h.b1, &h.w2, &h.b2, &h.w3, &h.b3]
}

fn head_tensors_mut<'a>(h: &'a mut DecisionHead, v: &mut Vec<&'a mut Matrix>) {
    v.push(&mut h.norm);
    v.push(&mut h.w1);
    v.push(&mut h.b1);
    v.push(&mut h.w2);
    v.push(&mut h.b2);
    v.push(&mut h.w3);
    v.push(&mut h.b3);
}

fn apply_head(h: &DecisionHead, x: &Matrix) -> Result<Matrix> {
    let n = kernels::rms_norm(x, h.norm.data());
    let mut a = kernels::linear(&n, &h.w1, Some(h.b1.data()))?;
    kernels::silu_inplace(&mut a);
    let mut b = kernels::linear(&a, &h.w2, Some(h.b2.data()))?;
    kernels::silu_inplace(&mut b);
    kernels::linear(&b, &h.w3, Some(h.b3.data()))
}

fn apply_block(cfg: &PredictorConfig, b: &PredictorBlock, x: &Matrix, valid: Option<&[bool]>) -> Result<Matrix> {
    let n = x.rows();
    let w = cfg.width;
    let dh = w / cfg.num_heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let h = kernels::rms_norm(x, b.norm1.data());
    let q = kernels::matmul(&h, &b.wq)?;
    let k = kernels::matmul(&h, &b.wk)?;
    let v = kernels::matmul(&h, &b.wv)?;
    let admit: Vec<bool> = match valid {
        Some(m) => m.to_vec(),
        None => vec![true; n],
    };
    let mut attn = Matrix::zeros(n, w);
    let mut probs = Matrix::zeros(n, n);
    for head in 0..cfg.num_heads {
        let qh = q.slice_cols(head * dh, dh);
        let kh = k.slice_cols(head * dh, dh);
        let vh = v.slice_cols(head * dh, dh);
        let mut scores = kernels::matmul_transb(&qh, &kh)?;
        scores.scale(scale);
        for r in 0..n {
            if !kernels::softmax_slice_masked(scores.row(r), &admit, probs.row_mut(r)) {
                // Only reachable for an all-padding input; attend to self.
                probs.row_mut(r).iter_mut().for_each(|p| *p = 0.0);
                probs.set(r, r, 1.0);
            }
        }
        attn.set_cols(head * dh, &kernels::matmul(&probs, &vh)?);
    }
    let mut out = x.clone();
    out.add_assign(&kernels::matmul(&attn, &b.wo)?);
    let h2 = kernels::rms_norm(&out, b.norm2.data());
    let mut a = kernels::linear(&h2, &b.fc1, Some(b.b1.data()))?;
    kernels::silu_inplace(&mut a);
    out.add_assign(&kernels::linear(&a, &b.fc2, Some(b.b2.data()))?);
    Ok(out)
}

/// Image decisions `D^I ∈ R^{N^I × 2}` from layer-`l` image hidden states.
pub fn image_decisions(p: &PredictorWeights, image_tokens: &Matrix) -> Result<Matrix> {
    image_decisions_masked(p, image_tokens, None)
}

/// As [`image_decisions`], with attention inside the predictor limited to
/// rows flagged valid (padding excluded). Rows of padding still get scores.
pub fn image_decisions_masked(
    p: &PredictorWeights,
    image_tokens: &Matrix,
    valid: Option<&[bool]>,
) -> Result<Matrix> {
    if image_tokens.rows() == 0 {
        return Ok(Matrix::zeros(0, 2));
    }
    let mut x = kernels::linear(image_tokens, &p.image.proj, Some(p.image.proj_bias.data()))?;
    for b in &p.image.blocks {
        x = apply_block(&p.config, b, &x, valid)?;
    }
    apply_head(&p.image.head, &x)
}

/// Image decisions for `B` left-padded samples of `seg_len` rows each,
/// stacked row-wise. Projections and the head run over all rows at once;
/// predictor attention stays inside each sample's valid rows.
pub fn image_decisions_padded(
    p: &PredictorWeights,
    tokens: &Matrix,
    seg_len: usize,
    valid: &[bool],
) -> Result<Matrix> {
    if tokens.rows() == 0 {
        return Ok(Matrix::zeros(0, 2));
    }
    if seg_len == 0 || tokens.rows() % seg_len != 0 || valid.len() != tokens.rows() {
        return Err(Error::ShapeMismatch {
            op: "image_decisions_padded",
            lhs: tokens.shape(),
            rhs: (seg_len, valid.len()),
        });
    }
    let mut x = kernels::linear(tokens, &p.image.proj, Some(p.image.proj_bias.data()))?;
    for b in &p.image.blocks {
        let mut next = Matrix::zeros(x.rows(), x.cols());
        for start in (0..x.rows()).step_by(seg_len) {
            let seg = apply_block(
                &p.config,
                b,
                &x.slice_rows(start, seg_len),
                Some(&valid[start..start + seg_len]),
            )?;
            for r in 0..seg_len {
                next.row_mut(start + r).copy_from_slice(seg.row(r));
            }
        }
        x = next;
    }
    apply_head(&p.image.head, &x)
}

/// Per-token output decisions `D^OT`; row `i` depends on token `i` only.
pub fn output_decisions(p: &PredictorWeights, output_tokens: &Matrix) -> Result<Matrix> {
    if output_tokens.rows() == 0 {
        return Ok(Matrix::zeros(0, 2));
    }
    let x = kernels::linear(output_tokens, &p.output.proj, Some(p.output.proj_bias.data()))?;
    apply_head(&p.output.head, &x)
}

/// Per-token keep flags.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BinaryMask(pub Vec<bool>);

impl BinaryMask {
    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn from_indices(n: usize, idx: &[usize]) -> Self {
        let mut m = vec![false; n];
        for &i in idx {
            m[i] = true;
        }
        Self(m)
    }

    pub fn force_keep_last(&mut self) {
        if let Some(l) = self.0.last_mut() {
            *l = true;
        }
    }
}

/// Keep iff the keep score strictly exceeds the drop score.
pub fn decisions_to_mask(d: &Matrix, force_keep_last: bool) -> BinaryMask {
    let mut m = BinaryMask(
        kernels::argmax_lastdim(d)
            .into_iter()
            .map(|j| j == KEEP)
            .collect(),
    );
    if force_keep_last {
        m.force_keep_last();
    }
    m
}

/// `⌊rate · n⌋`, tolerant to the binary representation of decimal rates.
pub fn keep_count(rate: f64, n: usize) -> usize {
    libm::floor(rate * n as f64 + 1e-9) as usize
}

/// The `⌊r·N⌋` indices with the highest keep scores, ascending.
pub fn select_topk_keep(d: &Matrix, keep_rate: f64) -> Result<Vec<usize>> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "keep rate {keep_rate} outside (0, 1]"
        )));
    }
    let n = d.rows();
    let k = keep_count(keep_rate, n);
    if k == 0 && n > 0 {
        return Err(Error::EmptyKeepSet { len: n, rate: keep_rate });
    }
    let scores: Vec<f64> = (0..n).map(|i| d.get(i, KEEP)).collect();
    kernels::topk_argmax(&scores, k)
}
