//! Fine-tuning loop: decoupled-weight-decay Adam over the text
//! encoder only, linear warmup followed by cosine decay, shuffled
//! mini-batches, and a metrics log. The image side never receives an
//! update; its bytes are identical before and after training.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::{ImageBasis, TextEncoderParams, TextGrads, Vocab};
use crate::error::{Error, Result};
use crate::loss::{evaluate_loss, LossBatch, LossKind};
use crate::scene::NegTriplet;
use crate::tensor::{EmbeddingBatch, Rng};

/// Hyperparameters of one fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// 0 means `epochs` full passes over the data.
    pub total_steps: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub dim: usize,
    /// 0 means hidden width equals `dim`.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::ConClip,
            peak_lr: 1e-3,
            warmup_steps: 50,
            total_steps: 0,
            epochs: 5,
            weight_decay: 0.2,
            batch_size: 64,
            tau: 0.07,
            dim: 32,
            hidden: 0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::InvalidConfig("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::NonPositiveTemperature { temperature: self.tau });
        }
        if self.dim < 2 {
            return Err(Error::InvalidConfig("dim must be at least 2".into()));
        }
        if self.total_steps == 0 && self.epochs == 0 {
            return Err(Error::InvalidConfig("either total_steps or epochs must be set".into()));
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            self.dim
        } else {
            self.hidden
        }
    }

    pub fn hash(&self) -> String {
        crate::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learning rate at `step` of `total` with `warmup` linear steps:
/// 0 -> peak over the warmup, then cosine decay to 0 at `total`.
/// Continuous, peaks exactly at the warmup boundary.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    debug_assert!(step <= total);
    let warmup = warmup.min(total);
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return if step == total { 0.0 } else { peak };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Schedule value under a config whose `total_steps` is resolved.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl MomentState {
    pub fn new(len: usize) -> MomentState {
        MomentState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay: the
/// decay term `lr * wd * theta` is applied separately from the
/// adaptive step.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut MomentState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        // Both the adaptive step and the decay read the incoming
        // parameter value; decay never touches the moment buffers.
        let theta = params[i];
        params[i] = theta - lr * m_hat / (v_hat.sqrt() + ADAM_EPS) - lr * weight_decay * theta;
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,lr,loss,wall_ms")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.step, r.lr, r.loss, r.wall_ms)?;
    }
    f.flush()?;
    Ok(())
}

/// Result of a training run: the tuned text parameters, the resolved
/// step budget, and the per-step log.
pub struct TrainOutcome {
    pub text: TextEncoderParams,
    pub total_steps: usize,
    pub metrics: Vec<MetricsRow>,
}

// Substream tags, so that parameter init, shuffling, and data
// generation never share a stream.
const TEXT_INIT_STREAM: u64 = 0x7e87;
const SHUFFLE_STREAM: u64 = 0x5874;

/// Seed for the text-encoder initialization of a run.
pub fn text_init_seed(seed: u64) -> u64 {
    Rng::new(seed).derive(TEXT_INIT_STREAM).seed()
}

/// Fine-tune the text encoder against the frozen image basis.
///
/// Per step: encode the mini-batch on both sides, evaluate the
/// selected objective, push the caption-side gradients (and, when the
/// objective uses them, the negated-caption gradients) through the
/// text encoder, and take one AdamW step. Image embeddings are
/// computed once up front since nothing updates them. Fully
/// deterministic given (config, dataset).
pub fn train(
    dataset: &[NegTriplet],
    cfg: &TrainConfig,
    vocab: &Vocab,
    basis: &ImageBasis,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if basis.dim() != cfg.dim {
        return Err(Error::DimMismatch {
            left: basis.dim(),
            right: cfg.dim,
        });
    }

    let n = dataset.len();
    let d = cfg.dim;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = if cfg.total_steps > 0 {
        cfg.total_steps
    } else {
        cfg.epochs * steps_per_epoch
    };

    // Tuned tensors: the token table and the projection. The pooled
    // bias stays at its zero initialization; with mean-centered
    // concept directions its gradient is pure batch noise, and letting
    // it drift hands every objective a caption-length channel that has
    // nothing to do with matching.
    let mut text = TextEncoderParams::init(
        text_init_seed(cfg.seed),
        vocab.table_size(),
        cfg.hidden_width(),
        d,
    );
    let mut m_embed = MomentState::new(text.embedding.len());
    let mut m_proj = MomentState::new(text.projection.len());

    // Frozen side: image and distractor embeddings never change.
    let mut img_rows = Vec::with_capacity(n);
    let mut img_neg_rows = Vec::with_capacity(n);
    let mut cap_tokens = Vec::with_capacity(n);
    let mut neg_tokens = Vec::with_capacity(n);
    for t in dataset {
        img_rows.push(basis.encode_image(&t.scene)?);
        img_neg_rows.push(basis.encode_image(&t.distractor_scene)?);
        cap_tokens.push(vocab.encode(&t.caption));
        neg_tokens.push(vocab.encode(&t.negated.text));
    }

    let base_rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(total);
    let started = Instant::now();

    for step in 1..=total {
        let pos_in_epoch = (step - 1) % steps_per_epoch;
        if pos_in_epoch == 0 {
            let epoch = (step - 1) / steps_per_epoch;
            let mut shuffle_rng = base_rng.derive(SHUFFLE_STREAM.wrapping_add(epoch as u64));
            order.sort_unstable();
            shuffle_rng.shuffle(&mut order);
        }
        let lo = pos_in_epoch * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let batch_idx = &order[lo..hi];
        let m = batch_idx.len();

        let mut img = EmbeddingBatch::zeros(m, d);
        let mut img_neg = EmbeddingBatch::zeros(m, d);
        let mut cap = EmbeddingBatch::zeros(m, d);
        let mut cap_neg = EmbeddingBatch::zeros(m, d);
        for (r, &i) in batch_idx.iter().enumerate() {
            img.set_row(r, &img_rows[i]);
            img_neg.set_row(r, &img_neg_rows[i]);
            cap.set_row(r, &text.encode_text(&cap_tokens[i])?);
            cap_neg.set_row(r, &text.encode_text(&neg_tokens[i])?);
        }

        let batch = LossBatch {
            img,
            cap,
            cap_neg,
            img_neg,
            tau: cfg.tau,
        };
        let (loss, grads) = evaluate_loss(cfg.loss, &batch)?;

        // Text side only; the basis is frozen.
        let mut tg = TextGrads::zeros_like(&text);
        for (r, &i) in batch_idx.iter().enumerate() {
            text.encode_text_backward_into(&cap_tokens[i], grads.d_cap.row(r), &mut tg)?;
            if cfg.loss.uses_negated_captions() {
                text.encode_text_backward_into(&neg_tokens[i], grads.d_cap_neg.row(r), &mut tg)?;
            }
        }

        let lr = lr_schedule(step, cfg.warmup_steps, total, cfg.peak_lr);
        adamw_step(&mut text.embedding, &tg.embedding, &mut m_embed, lr, cfg.weight_decay)?;
        adamw_step(&mut text.projection, &tg.projection, &mut m_proj, lr, cfg.weight_decay)?;

        metrics.push(MetricsRow {
            step,
            lr,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(TrainOutcome {
        text,
        total_steps: total,
        metrics,
    })
}
