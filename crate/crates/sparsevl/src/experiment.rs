//! Training runs and policy comparisons on the synthetic tasks.

use serde::{Deserialize, Serialize};
use sparsevl_core::model::{ModelConfig, ModelWeights};
use sparsevl_core::predictor::{PredictorConfig, PredictorWeights};
use sparsevl_core::rng;
use sparsevl_core::train::{self, LossBreakdown, MaskPolicy, TrainConfig, Trainer, TrainingSample};

use crate::task::TaskSpec;

pub const TRAIN_SPLIT: u64 = 0;
pub const EVAL_SPLIT: u64 = 1;

/// One training-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub tau: f64,
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub total: f64,
    pub image_keep_fraction: f64,
    pub output_keep_fraction: f64,
}

impl StepRecord {
    fn new(step: usize, tau: f64, b: &LossBreakdown) -> Self {
        Self {
            step,
            tau,
            cross_entropy: b.cross_entropy,
            regularizer: b.regularizer,
            total: b.total,
            image_keep_fraction: b.image_keep_fraction,
            output_keep_fraction: b.output_keep_fraction,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: ModelWeights,
    pub predictor: PredictorWeights,
    pub log: Vec<StepRecord>,
}

/// Which masks drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    Learned,
    /// Predictors frozen, random masks at the target rates.
    RandomControl,
}

/// Trains from seeded initial weights on fresh task samples every step.
pub fn train_run(
    model_cfg: ModelConfig,
    pred_cfg: PredictorConfig,
    cfg: TrainConfig,
    task: &TaskSpec,
    kind: RunKind,
    mut on_step: impl FnMut(&StepRecord),
) -> sparsevl_core::Result<TrainedRun> {
    let model = ModelWeights::random(model_cfg, rng::mix(cfg.seed, 11))?;
    let predictor = PredictorWeights::random(pred_cfg, rng::mix(cfg.seed, 12))?;
    let mut trainer = Trainer::new(cfg, model, predictor)?;
    if kind == RunKind::RandomControl {
        trainer = trainer.random_mask_control();
    }
    let task = TaskSpec {
        seed: rng::mix(task.seed, cfg.seed),
        ..task.clone()
    };
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch: Vec<TrainingSample> = (0..cfg.batch_size)
            .map(|i| task.sample(TRAIN_SPLIT, (step * cfg.batch_size + i) as u64))
            .collect();
        let tau = train::tau_at(step, &cfg);
        let b = trainer.training_step(&batch)?;
        let rec = StepRecord::new(step, tau, &b);
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainedRun {
        model: trainer.model,
        predictor: trainer.predictor,
        log,
    })
}

/// Held-out evaluation set shared by every policy.
pub fn eval_set(task: &TaskSpec, count: usize) -> Vec<TrainingSample> {
    task.samples(EVAL_SPLIT, count)
}

pub fn evaluate_policy(
    run: &TrainedRun,
    cfg: &TrainConfig,
    samples: &[TrainingSample],
    image: MaskPolicy,
    output: MaskPolicy,
) -> sparsevl_core::Result<LossBreakdown> {
    train::evaluate(&run.model, &run.predictor, samples, cfg, image, output, rng::mix(cfg.seed, 77))
}

/// Means over the last `fraction` of a training log (at least one record).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub window: usize,
    pub cross_entropy: f64,
    pub total: f64,
    pub image_keep_fraction: f64,
    pub output_keep_fraction: f64,
}

pub fn final_stats(log: &[StepRecord], fraction: f64) -> FinalStats {
    let window = ((log.len() as f64 * fraction).ceil() as usize).clamp(1, log.len().max(1));
    let tail = &log[log.len().saturating_sub(window)..];
    let mean = |f: fn(&StepRecord) -> f64| {
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        }
    };
    FinalStats {
        window: tail.len(),
        cross_entropy: mean(|r| r.cross_entropy),
        total: mean(|r| r.total),
        image_keep_fraction: mean(|r| r.image_keep_fraction),
        output_keep_fraction: mean(|r| r.output_keep_fraction),
    }
}

/// Dimensions of the convergence study: small enough that five seeds plus
/// their controls train in minutes on one core.
pub fn study_model() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        hidden_dim: 32,
        num_heads: 4,
        ffn_dim: 64,
        vocab_size: 32,
        max_seq_len: 128,
        image_feature_dim: TaskSpec::default().feature_dim,
    }
}

pub fn study_predictor(model: &ModelConfig) -> PredictorConfig {
    PredictorConfig {
        width: 16,
        num_heads: 2,
        ..PredictorConfig::for_model(model)
    }
}

/// Sparsification layer of the study: one full layer, so the second hop of
/// the lookup has to read image tokens that survived the predictor.
pub const STUDY_SPARSIFY_LAYER: usize = 1;

pub fn study_train_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        sparsify_layer: STUDY_SPARSIFY_LAYER,
        seed,
        ..TrainConfig::default()
    }
}

/// Learned run, its random-mask control and the held-out policy losses of
/// one seed.
#[derive(Clone, Debug)]
pub struct SeedStudy {
    pub seed: u64,
    pub learned: TrainedRun,
    pub learned_final: FinalStats,
    pub control_final: FinalStats,
    /// Held-out loss with predictor argmax decisions (deployment path).
    pub eval_argmax: LossBreakdown,
    /// Held-out losses with every output policy at the same `⌊r·n⌋` keeps
    /// (images follow the learned ranking in all three).
    pub eval_learned: LossBreakdown,
    pub eval_random: LossBreakdown,
    pub eval_structure: LossBreakdown,
}

pub const FINAL_FRACTION: f64 = 0.1;
pub const STUDY_EVAL_SAMPLES: usize = 48;

pub fn seed_study(seed: u64, steps: usize) -> sparsevl_core::Result<SeedStudy> {
    let mc = study_model();
    let pc = study_predictor(&mc);
    let cfg = study_train_config(seed, steps);
    let task = TaskSpec::default();
    let learned = train_run(mc, pc, cfg, &task, RunKind::Learned, |_| {})?;
    let control = train_run(mc, pc, cfg, &task, RunKind::RandomControl, |_| {})?;
    let eval = eval_set(&task, STUDY_EVAL_SAMPLES);
    let with = |o: MaskPolicy| evaluate_policy(&learned, &cfg, &eval, MaskPolicy::LearnedTopk, o);
    Ok(SeedStudy {
        seed,
        learned_final: final_stats(&learned.log, FINAL_FRACTION),
        control_final: final_stats(&control.log, FINAL_FRACTION),
        eval_argmax: evaluate_policy(&learned, &cfg, &eval, MaskPolicy::Learned, MaskPolicy::Learned)?,
        eval_learned: with(MaskPolicy::LearnedTopk)?,
        eval_random: with(MaskPolicy::Random)?,
        eval_structure: evaluate_policy(&learned, &cfg, &eval, MaskPolicy::LearnedTopk, MaskPolicy::Structure)?,
        learned,
    })
}

/// One-sided exact sign test: probability of at least `wins` successes out
/// of `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let total = 2f64.powi(n as i32);
    let tail: f64 = (wins..=n).map(|k| binomial(n, k)).sum();
    tail / total
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Median of a slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
