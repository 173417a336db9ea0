//! Staged training driver.
//!
//! Four stages: language-model pretraining, combined contrastive
//! pretraining, decompilation fine-tuning and similarity fine-tuning. All
//! stages share the AdamW optimizer and a linear-warmup/cosine-decay
//! schedule, run deterministically under a fixed seed, and append one CSV
//! log row per step.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::prelude::IndexedRandom;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{filter_for_cl, FunctionRecord};
use crate::model::{checkpoint, ModelParams};
use crate::normalize::OptLevel;
use crate::objectives::{
    bcd_objective, bcsd_objective, cl_objective, form_sequence, lm_objective, ClLossParts, Form,
    ObjectiveError,
};
use crate::tokenizer::{TokenizerConfig, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PretrainLm,
    PretrainCl,
    FtBcd,
    FtBcsd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainLm => "pretrain_lm",
            Stage::PretrainCl => "pretrain_cl",
            Stage::FtBcd => "ft_bcd",
            Stage::FtBcsd => "ft_bcsd",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "pretrain_lm" | "pretrain-lm" | "lm" => Some(Stage::PretrainLm),
            "pretrain_cl" | "pretrain-cl" | "cl" => Some(Stage::PretrainCl),
            "ft_bcd" | "ft-bcd" | "bcd" => Some(Stage::FtBcd),
            "ft_bcsd" | "ft-bcsd" | "bcsd" => Some(Stage::FtBcsd),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    WarmupCosine,
    Constant,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::WarmupCosine => "warmup_cosine",
            Schedule::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Schedule> {
        match s {
            "warmup_cosine" | "warmup-cosine" | "cosine" => Some(Schedule::WarmupCosine),
            "constant" => Some(Schedule::Constant),
            _ => None,
        }
    }
}

/// One stage's training configuration. The paper-shaped defaults are in the
/// constructors; desk-scale runs override sizes, never the schedule shape.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub epochs: usize,
    /// Weight of the contrastive terms in the combined pretraining loss.
    pub lambda: f64,
    pub seed: u64,
    /// Cosine horizon; 0 means "derive from data size x epochs".
    pub total_steps: usize,
    /// Stop once the per-step total loss falls below this value.
    pub early_stop_loss: Option<f64>,
}

impl StageConfig {
    /// Language-model pretraining defaults: batch 128, 1024-token inputs,
    /// peak 5e-5, 1000 warmup steps, cosine decay, one epoch.
    pub fn pretrain_lm() -> Self {
        Self {
            stage: Stage::PretrainLm,
            batch_size: 128,
            max_seq_len: 1024,
            peak_lr: 5e-5,
            warmup_steps: 1000,
            schedule: Schedule::WarmupCosine,
            epochs: 1,
            lambda: 0.0,
            seed: 0,
            total_steps: 0,
            early_stop_loss: None,
        }
    }

    /// Contrastive pretraining defaults: batch 64, 1024-token inputs,
    /// peak 2e-5, lambda 0.1.
    pub fn pretrain_cl() -> Self {
        Self {
            stage: Stage::PretrainCl,
            batch_size: 64,
            peak_lr: 2e-5,
            lambda: 0.1,
            ..Self::pretrain_lm()
        }
    }

    /// Fine-tuning defaults: batch 64, 2048-token inputs, peak 2e-5,
    /// one epoch.
    pub fn fine_tune(stage: Stage) -> Self {
        Self {
            stage,
            batch_size: 64,
            max_seq_len: 2048,
            peak_lr: 2e-5,
            ..Self::pretrain_lm()
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("no usable training items for stage {0}")]
    EmptyStageData(Stage),
    #[error("loss became non-finite at step {0}: {1}")]
    NonFiniteLoss(usize, String),
    #[error("contrastive stage requires a corpus that survives the CL filter unchanged ({0} of {1} records pass)")]
    UnfilteredCorpus(usize, usize),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
}

/// Learning rate at `step`: linear ramp to the peak over the warmup, then
/// cosine decay to zero at `total_steps`. Constant schedules stay at peak.
pub fn lr_at(step: usize, cfg: &StageConfig) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.peak_lr,
        Schedule::WarmupCosine => {
            if step < cfg.warmup_steps {
                return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
            }
            let total = cfg.total_steps.max(cfg.warmup_steps + 1);
            let denom = (total - cfg.warmup_steps) as f64;
            let progress = ((step - cfg.warmup_steps) as f64 / denom).clamp(0.0, 1.0);
            cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// AdamW state: first/second moments per parameter plus the step counter.
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: ModelParams::zeros_like(&params.config),
            v: ModelParams::zeros_like(&params.config),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update: bias-corrected moment estimates plus decoupled weight
/// decay.
pub fn apply_optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let mut p = params.tensors_mut();
    let g = grads.tensors();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    for i in 0..p.len() {
        let pt = &mut p[i].1;
        let gt = &g[i].1;
        let mt = &mut m[i].1;
        let vt = &mut v[i].1;
        for j in 0..pt.len() {
            mt[j] = state.beta1 * mt[j] + (1.0 - state.beta1) * gt[j];
            vt[j] = state.beta2 * vt[j] + (1.0 - state.beta2) * gt[j] * gt[j];
            let mhat = mt[j] / bc1;
            let vhat = vt[j] / bc2;
            pt[j] -= lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * pt[j]);
        }
    }
}

/// One CSV log row per optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub lm: f64,
    pub fcl: f64,
    pub ocl: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lm,fcl,ocl,total,lr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9e}\n",
                r.step, r.lm, r.fcl, r.ocl, r.total, r.lr
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn final_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }
}

/// Periodic checkpointing during a stage.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub every: usize,
    pub path_prefix: PathBuf,
}

enum StageItem {
    /// A standalone language-modeling sequence spec: record index + form.
    LmDoc(usize, Form),
    /// Decompilation triple: record index + level.
    BcdTriple(usize, OptLevel),
    /// A record taking part in a contrastive batch.
    ClRecord(usize),
}

/// Runs one training stage over the corpus, returning updated parameters
/// and the per-step log. Deterministic for a fixed config.
pub fn train_stage(
    params: ModelParams,
    records: &[FunctionRecord],
    vocab: &Vocab,
    tok_cfg: &TokenizerConfig,
    cfg: &StageConfig,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<(ModelParams, TrainingLog), TrainerError> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainerError::BadConfig("batch_size and epochs must be positive".into()));
    }
    let mut params = params;
    let mut items = build_items(records, cfg)?;
    if items.is_empty() {
        return Err(TrainerError::EmptyStageData(cfg.stage));
    }
    let tok_cfg = TokenizerConfig { max_seq_len: cfg.max_seq_len, ..tok_cfg.clone() };

    let steps_per_epoch = match cfg.stage {
        // A contrastive batch consumes batch_size distinct records.
        Stage::PretrainCl | Stage::FtBcsd => {
            (items.len() / cfg.batch_size.min(items.len()).max(1)).max(1)
        }
        _ => items.len().div_ceil(cfg.batch_size),
    };
    let derived_total = steps_per_epoch * cfg.epochs;
    let cfg_resolved = StageConfig {
        total_steps: if cfg.total_steps == 0 { derived_total } else { cfg.total_steps },
        ..cfg.clone()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&params);
    let mut log = TrainingLog::default();
    let max_steps = cfg_resolved.total_steps;

    'outer: for _epoch in 0..cfg.epochs {
        items.shuffle(&mut rng);
        let batch_len = match cfg.stage {
            Stage::PretrainCl | Stage::FtBcsd => cfg.batch_size.min(items.len()).max(2),
            _ => cfg.batch_size,
        };
        for batch in items.chunks(batch_len) {
            if state.step >= max_steps {
                break 'outer;
            }
            if matches!(cfg.stage, Stage::PretrainCl | Stage::FtBcsd) && batch.len() < 2 {
                continue;
            }
            let (parts, mut grads) =
                batch_objective(&params, records, batch, cfg, vocab, &tok_cfg, &mut rng)?;
            if !parts.total.is_finite() {
                return Err(TrainerError::NonFiniteLoss(
                    state.step,
                    format!("lm={} fcl={} ocl={}", parts.lm, parts.fcl, parts.ocl),
                ));
            }
            let norm = grads.global_norm();
            if norm > 1.0 {
                log::debug!("step {}: clipping gradient norm {norm:.3} to 1.0", state.step);
                grads.scale(1.0 / norm);
            }
            let lr = lr_at(state.step, &cfg_resolved);
            apply_optimizer_step(&mut params, &grads, &mut state, lr);
            log.rows.push(LogRow {
                step: state.step,
                lm: parts.lm,
                fcl: parts.fcl,
                ocl: parts.ocl,
                total: parts.total,
                lr,
            });
            if let Some(policy) = checkpoints {
                if policy.every > 0 && state.step % policy.every == 0 {
                    let path = policy
                        .path_prefix
                        .with_extension(format!("step{}.ckpt", state.step));
                    checkpoint::save(&params, &path)?;
                }
            }
            if let Some(stop) = cfg.early_stop_loss {
                if parts.total < stop {
                    break 'outer;
                }
            }
        }
    }
    Ok((params, log))
}

fn build_items(records: &[FunctionRecord], cfg: &StageConfig) -> Result<Vec<StageItem>, TrainerError> {
    let mut items = Vec::new();
    match cfg.stage {
        Stage::PretrainLm => {
            for (i, r) in records.iter().enumerate() {
                if !r.source_text.trim().is_empty() {
                    items.push(StageItem::LmDoc(i, Form::Source));
                }
                for level in r.asm.keys() {
                    items.push(StageItem::LmDoc(i, Form::Asm(*level)));
                }
            }
        }
        Stage::PretrainCl => {
            let kept = filter_for_cl(records.to_vec());
            if kept.len() != records.len() {
                return Err(TrainerError::UnfilteredCorpus(kept.len(), records.len()));
            }
            if records.len() < 2 {
                return Err(TrainerError::EmptyStageData(cfg.stage));
            }
            items.extend((0..records.len()).map(StageItem::ClRecord));
        }
        Stage::FtBcd => {
            for (i, r) in records.iter().enumerate() {
                if r.source_text.trim().is_empty() {
                    continue;
                }
                for level in r.asm.keys() {
                    items.push(StageItem::BcdTriple(i, *level));
                }
            }
        }
        Stage::FtBcsd => {
            for (i, r) in records.iter().enumerate() {
                if r.asm.contains_key(&OptLevel::O0) && r.asm.contains_key(&OptLevel::O3) {
                    items.push(StageItem::ClRecord(i));
                }
            }
            if items.len() < 2 {
                return Err(TrainerError::EmptyStageData(cfg.stage));
            }
        }
    }
    Ok(items)
}

fn batch_objective(
    params: &ModelParams,
    records: &[FunctionRecord],
    batch: &[StageItem],
    cfg: &StageConfig,
    vocab: &Vocab,
    tok_cfg: &TokenizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ClLossParts, ModelParams), TrainerError> {
    match cfg.stage {
        Stage::PretrainLm => {
            let mut grads = ModelParams::zeros_like(&params.config);
            let mut loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for item in batch {
                let StageItem::LmDoc(i, form) = item else { unreachable!() };
                let mut seq = form_sequence(&records[*i], *form, vocab, tok_cfg)?;
                seq.append_eos();
                let (l, g) = lm_objective(params, &seq)?;
                loss += l * scale;
                grads.add_scaled(&g, scale);
            }
            Ok((ClLossParts { lm: loss, fcl: 0.0, ocl: 0.0, total: loss }, grads))
        }
        Stage::FtBcd => {
            let mut grads = ModelParams::zeros_like(&params.config);
            let mut loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for item in batch {
                let StageItem::BcdTriple(i, level) = item else { unreachable!() };
                let record = &records[*i];
                let (l, g) = bcd_objective(
                    params,
                    &record.asm[level],
                    &record.source_text,
                    vocab,
                    tok_cfg,
                )?;
                loss += l * scale;
                grads.add_scaled(&g, scale);
            }
            Ok((ClLossParts { lm: loss, fcl: 0.0, ocl: 0.0, total: loss }, grads))
        }
        Stage::PretrainCl => {
            let refs: Vec<&FunctionRecord> = batch
                .iter()
                .map(|item| {
                    let StageItem::ClRecord(i) = item else { unreachable!() };
                    &records[*i]
                })
                .collect();
            // Ordered form pair with distinct members, sampled per batch.
            let mut pairs = Vec::new();
            for s in Form::ALL {
                for t in Form::ALL {
                    if s != t {
                        pairs.push((s, t));
                    }
                }
            }
            let pair = *pairs.choose(rng).expect("nonempty");
            let (parts, grads) = cl_objective(params, &refs, pair, cfg.lambda, vocab, tok_cfg)?;
            Ok((parts, grads))
        }
        Stage::FtBcsd => {
            let refs: Vec<&FunctionRecord> = batch
                .iter()
                .map(|item| {
                    let StageItem::ClRecord(i) = item else { unreachable!() };
                    &records[*i]
                })
                .collect();
            let (loss, grads) =
                bcsd_objective(params, &refs, OptLevel::O0, OptLevel::O3, vocab, tok_cfg)?;
            Ok((ClLossParts { lm: 0.0, fcl: loss, ocl: 0.0, total: loss }, grads))
        }
    }
}

/// Parses a `key=value` stage-config file. Blank lines and `#` comments are
/// ignored; unknown keys are errors. The `stage` key selects the default
/// profile; other keys override it.
pub fn parse_stage_config(text: &str) -> Result<StageConfig, TrainerError> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainerError::BadConfig(format!("line {}: expected key=value", idx + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let stage_name = pairs
        .iter()
        .find(|(k, _)| k == "stage")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| TrainerError::BadConfig("missing `stage` key".into()))?;
    let stage = Stage::parse(&stage_name)
        .ok_or_else(|| TrainerError::BadConfig(format!("unknown stage `{stage_name}`")))?;
    let mut cfg = match stage {
        Stage::PretrainLm => StageConfig::pretrain_lm(),
        Stage::PretrainCl => StageConfig::pretrain_cl(),
        Stage::FtBcd | Stage::FtBcsd => StageConfig::fine_tune(stage),
    };
    for (k, v) in &pairs {
        let bad = |what: &str| TrainerError::BadConfig(format!("bad value for {what}: `{v}`"));
        match k.as_str() {
            "stage" => {}
            "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad(k))?,
            "max_seq_len" => cfg.max_seq_len = v.parse().map_err(|_| bad(k))?,
            "peak_lr" => cfg.peak_lr = v.parse().map_err(|_| bad(k))?,
            "warmup_steps" => cfg.warmup_steps = v.parse().map_err(|_| bad(k))?,
            "schedule" => {
                cfg.schedule = Schedule::parse(v).ok_or_else(|| bad(k))?;
            }
            "epochs" => cfg.epochs = v.parse().map_err(|_| bad(k))?,
            "lambda" => cfg.lambda = v.parse().map_err(|_| bad(k))?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad(k))?,
            "total_steps" => cfg.total_steps = v.parse().map_err(|_| bad(k))?,
            "early_stop_loss" => cfg.early_stop_loss = Some(v.parse().map_err(|_| bad(k))?),
            other => {
                return Err(TrainerError::BadConfig(format!("unknown key `{other}`")));
            }
        }
    }
    if cfg.lambda < 0.0 {
        return Err(TrainerError::BadConfig("lambda must be >= 0".into()));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::tokenizer::build_vocab;

    fn setup(n: usize) -> (Vec<FunctionRecord>, Vocab, TokenizerConfig) {
        let recs = generate_synthetic(&SyntheticSpec::new(17, n, 8)).unwrap();
        let cfg = TokenizerConfig { max_instructions: 16, max_seq_len: 256, ..Default::default() };
        let vocab = build_vocab(&recs, &cfg).unwrap();
        (recs, vocab, cfg)
    }

    fn tiny_params(vocab: &Vocab, seed: u64) -> ModelParams {
        let config = ModelConfig {
            vocab_size: vocab.len(),
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 256,
            hierarchical_head_count: 1,
            tied_output: false,
        };
        ModelParams::init(config, seed)
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = StageConfig {
            warmup_steps: 100,
            total_steps: 1100,
            peak_lr: 1e-3,
            ..StageConfig::pretrain_lm()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(100, &cfg) - 1e-3).abs() < 1e-15);
        // Midpoint of the decay: peak/2.
        assert!((lr_at(600, &cfg) - 5e-4).abs() < 1e-12);
        // End of the horizon: zero.
        assert!(lr_at(1100, &cfg) < 1e-15);
        // Continuity around the boundary.
        assert!((lr_at(99, &cfg) - lr_at(100, &cfg)).abs() < 2e-5);
        for step in 0..1100 {
            assert!(lr_at(step, &cfg) >= 0.0);
        }
        let constant = StageConfig { schedule: Schedule::Constant, ..cfg };
        assert_eq!(lr_at(0, &constant), 1e-3);
        assert_eq!(lr_at(5000, &constant), 1e-3);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let (_, vocab, _) = setup(2);
        let mut params = tiny_params(&vocab, 5);
        let before = params.clone();
        let grads = ModelParams::zeros_like(&params.config);
        let mut state = OptimizerState::new(&params);
        state.weight_decay = 0.0;
        apply_optimizer_step(&mut params, &grads, &mut state, 1e-3);
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_first_step_is_signed_unit_update() {
        let (_, vocab, _) = setup(2);
        let mut params = tiny_params(&vocab, 6);
        let before = params.clone();
        let mut grads = ModelParams::zeros_like(&params.config);
        grads.tok_emb.data[0] = 0.25;
        grads.tok_emb.data[1] = -3.0;
        let mut state = OptimizerState::new(&params);
        state.weight_decay = 0.0;
        let lr = 1e-3;
        apply_optimizer_step(&mut params, &grads, &mut state, lr);
        // Bias correction makes mhat = g and vhat = g^2 on step one, so the
        // update is -lr * g / (|g| + eps) = -lr * sign(g).
        let d0 = params.tok_emb.data[0] - before.tok_emb.data[0];
        let d1 = params.tok_emb.data[1] - before.tok_emb.data[1];
        assert!((d0 + lr).abs() < 1e-9, "got {d0}");
        assert!((d1 - lr).abs() < 1e-9, "got {d1}");
        // Untouched weights only move if decay is active (it is zero here).
        assert_eq!(params.tok_emb.data[2], before.tok_emb.data[2]);
    }

    #[test]
    fn adamw_decay_shrinks_weights_toward_zero() {
        let (_, vocab, _) = setup(2);
        let mut params = tiny_params(&vocab, 7);
        let before = params.clone();
        let grads = ModelParams::zeros_like(&params.config);
        let mut state = OptimizerState::new(&params);
        state.weight_decay = 0.1;
        apply_optimizer_step(&mut params, &grads, &mut state, 1e-2);
        for (p, b) in params.tok_emb.data.iter().zip(&before.tok_emb.data) {
            assert!((p - b * (1.0 - 1e-2 * 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn pretrain_lm_runs_and_is_deterministic() {
        let (recs, vocab, tok_cfg) = setup(3);
        let cfg = StageConfig {
            batch_size: 4,
            max_seq_len: 256,
            peak_lr: 1e-3,
            warmup_steps: 2,
            epochs: 2,
            seed: 42,
            ..StageConfig::pretrain_lm()
        };
        let p0 = tiny_params(&vocab, 1);
        let (pa, loga) =
            train_stage(p0.clone(), &recs, &vocab, &tok_cfg, &cfg, None).unwrap();
        let (pb, logb) = train_stage(p0, &recs, &vocab, &tok_cfg, &cfg, None).unwrap();
        assert_eq!(pa.digest(), pb.digest());
        assert_eq!(loga.rows.len(), logb.rows.len());
        assert!(!loga.rows.is_empty());
        assert!(loga.rows.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn cl_stage_rejects_unfiltered_corpus() {
        let (recs, vocab, tok_cfg) = setup(6);
        let mut broken = recs.clone();
        broken[0].asm.remove(&OptLevel::O1);
        let cfg = StageConfig {
            batch_size: 2,
            epochs: 1,
            seed: 1,
            ..StageConfig::pretrain_cl()
        };
        let params = tiny_params(&vocab, 2);
        match train_stage(params, &broken, &vocab, &tok_cfg, &cfg, None) {
            Err(TrainerError::UnfilteredCorpus(kept, total)) => {
                assert!(kept < total);
            }
            other => panic!("expected UnfilteredCorpus, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn empty_stage_data_is_reported() {
        let (_, vocab, tok_cfg) = setup(2);
        let cfg = StageConfig { seed: 1, ..StageConfig::pretrain_lm() };
        let params = tiny_params(&vocab, 3);
        assert!(matches!(
            train_stage(params, &[], &vocab, &tok_cfg, &cfg, None),
            Err(TrainerError::EmptyStageData(Stage::PretrainLm))
        ));
    }

    #[test]
    fn config_file_round_trip() {
        let text = "# stage config\nstage=ft_bcd\nbatch_size=8\npeak_lr=0.001\n\
                    warmup_steps=10\nepochs=3\nseed=7\nearly_stop_loss=0.05\n";
        let cfg = parse_stage_config(text).unwrap();
        assert_eq!(cfg.stage, Stage::FtBcd);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.peak_lr, 1e-3);
        assert_eq!(cfg.warmup_steps, 10);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.early_stop_loss, Some(0.05));
        // Defaults from the fine-tune profile survive.
        assert_eq!(cfg.max_seq_len, 2048);
        assert!(matches!(
            parse_stage_config("stage=bogus\n"),
            Err(TrainerError::BadConfig(_))
        ));
        assert!(matches!(
            parse_stage_config("stage=ft_bcd\nwhat=1\n"),
            Err(TrainerError::BadConfig(_))
        ));
        assert!(matches!(
            parse_stage_config("batch_size=8\n"),
            Err(TrainerError::BadConfig(_))
        ));
    }
}
