use std::fmt::Write as _;
use std::time::Instant;

use layoutlab_autodiff::{Adam, AdamConfig, Scalar, Tape};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{assemble_loss, LossWeights, Model};
use crate::data::batch_by_tokens;
use crate::error::{LabError, Result};
use crate::layout::{tokenize_steps, validate, Step, TokenizedSequence};
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    /// Stop after this many optimizer steps; 0 means no step limit.
    pub max_steps: usize,
    pub epochs: usize,
    /// Sequences per batch, unless `max_tokens` is set.
    pub batch_size: usize,
    /// Token budget per batch (layout-inflated lengths).
    pub max_tokens: Option<usize>,
    pub weights: LossWeights,
    pub clip_norm: Option<f64>,
    /// Reshuffle every epoch; otherwise sequences stream in the given order.
    pub shuffle: bool,
    /// Train even when the layout leaks its own targets.
    pub allow_leakage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 100,
            max_steps: 0,
            epochs: 1,
            batch_size: 128,
            max_tokens: None,
            weights: LossWeights::uniform(1),
            clip_norm: Some(1.0),
            shuffle: true,
            allow_leakage: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub item: Option<f64>,
    pub action: Vec<Option<f64>>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    pub steps: usize,
    pub epochs_completed: usize,
    pub tokens: usize,
    /// Wall-clock seconds (informational; not part of determinism).
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|p| p.total)
    }

    pub fn loss_csv(&self) -> String {
        let dims = self.curve.first().map_or(0, |p| p.action.len());
        let mut s = String::from("step,total,item");
        for d in 0..dims {
            write!(s, ",action_{d}").unwrap();
        }
        s.push_str(",grad_norm\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for p in &self.curve {
            write!(s, "{},{},{}", p.step, p.total, opt(p.item)).unwrap();
            for a in &p.action {
                write!(s, ",{}", opt(*a)).unwrap();
            }
            writeln!(s, ",{}", p.grad_norm).unwrap();
        }
        s
    }
}

/// Orders sequences so that batches hold similar lengths: shuffled (when
/// requested), then sorted by length inside windows of several batches.
fn epoch_batches(
    seqs: &[TokenizedSequence],
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if cfg.shuffle {
        order.shuffle(rng);
    }
    let window = cfg.batch_size.max(1) * 16;
    for chunk in order.chunks_mut(window) {
        chunk.sort_by_key(|&i| seqs[i].len());
    }
    let mut batches: Vec<Vec<usize>> = match cfg.max_tokens {
        Some(budget) => {
            let lens: Vec<usize> = order.iter().map(|&i| seqs[i].len()).collect();
            batch_by_tokens(&lens, budget)?.into_iter().map(|r| order[r].to_vec()).collect()
        }
        None => order.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect(),
    };
    if cfg.shuffle {
        batches.shuffle(rng);
    }
    Ok(batches)
}

/// Trains `model` on normalized step sequences.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    sequences: &[Vec<Step>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    let report = validate(&model.spec);
    if !report.p3_pass() && !cfg.allow_leakage {
        let leaked: Vec<String> = report.p3.leaks.iter().map(|l| l.target.to_string()).collect();
        return Err(LabError::Leakage { spec: model.spec.name.clone(), leaked: leaked.join(", ") });
    }
    cfg.weights.validate()?;
    if cfg.weights.action.len() != model.config.action_dims {
        return Err(LabError::Config(format!(
            "{} action loss weights for {} action dims",
            cfg.weights.action.len(),
            model.config.action_dims
        )));
    }
    let mut tokenized = Vec::with_capacity(sequences.len());
    for s in sequences {
        if s.is_empty() {
            continue;
        }
        let seq = tokenize_steps(model.truncate(s), &model.spec)?;
        if seq.included_item_targets() + seq.included_action_targets() > 0 {
            tokenized.push(seq);
        }
    }
    if tokenized.is_empty() {
        return Err(LabError::NoTargets);
    }
    let adam_cfg =
        AdamConfig { lr: cfg.lr, warmup_steps: cfg.warmup_steps, clip_norm: cfg.clip_norm, ..AdamConfig::default() };
    let mut adam = Adam::new(adam_cfg, &model.params)?;
    let mut shuffle_rng = seed::rng(seed, Stream::Shuffle);
    let mut dropout_rng = seed::rng(seed, Stream::Dropout);
    let start = Instant::now();
    let mut out = TrainReport { curve: Vec::new(), steps: 0, epochs_completed: 0, tokens: 0, seconds: 0.0 };
    'epochs: for _ in 0..cfg.epochs {
        for batch in epoch_batches(&tokenized, cfg, &mut shuffle_rng)? {
            if cfg.max_steps > 0 && out.steps >= cfg.max_steps {
                break 'epochs;
            }
            let refs: Vec<&TokenizedSequence> = batch.iter().map(|&i| &tokenized[i]).collect();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let (_, preds, targets) = model.forward(&mut tape, &bound, &refs, Some(&mut dropout_rng))?;
            let loss = assemble_loss(&mut tape, &preds, &targets, &cfg.weights)?;
            let grads = tape.backward(loss.total)?;
            let grads = model.params.collect_grads(&bound, &grads)?;
            let grad_norm = adam.step(&mut model.params, &grads)?;
            out.steps += 1;
            out.tokens += refs.iter().map(|s| s.len()).sum::<usize>();
            out.curve.push(LossPoint {
                step: out.steps,
                total: tape.value(loss.total).data()[0].as_f64(),
                item: loss.item,
                action: loss.action,
                grad_norm,
            });
        }
        out.epochs_completed += 1;
    }
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}
