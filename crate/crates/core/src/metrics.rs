//! Leave-one-out retrieval metrics, action RMSE and report aggregation.

use std::collections::BTreeSet;

use layoutlab_autodiff::Scalar;
use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::data::{ItemVocab, Split};
use crate::error::{LabError, Result};
use crate::inference::{predict_next, NextPrediction};
use crate::layout::{Step, RESERVED};
use crate::model::Model;
use crate::seed::{self, Stream};

/// 1-based rank of `item` in `ranked`, if present.
pub fn rank_in(ranked: &[u32], item: u32) -> Option<usize> {
    ranked.iter().position(|&i| i == item).map(|p| p + 1)
}

/// 1 when `item` is among the first `k` entries of `ranked`.
pub fn hr_at_k(ranked: &[u32], item: u32, k: usize) -> f64 {
    rank_in(ranked, item).map_or(0.0, |r| hit(r, k))
}

/// `1 / log2(rank + 1)` within the first `k`, else 0.
pub fn ndcg_at_k(ranked: &[u32], item: u32, k: usize) -> f64 {
    rank_in(ranked, item).map_or(0.0, |r| ndcg(r, k))
}

pub fn hit(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(LabError::InvalidArgument(format!(
            "rmse needs equal non-empty lengths, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    let sq: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

/// Rank of `target` among `pool` by descending score, ties to the smaller id.
/// `target` must be in the pool.
pub fn rank_among(scores: &[f64], target: u32, pool: impl IntoIterator<Item = u32>) -> usize {
    let s = scores[target as usize];
    1 + pool
        .into_iter()
        .filter(|&i| i != target)
        .filter(|&i| scores[i as usize] > s || (scores[i as usize] == s && i < target))
        .count()
}

/// One held-out interaction. Actions in `history` and `action` are in native
/// (unnormalized) units.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: u64,
    pub history: Vec<Step>,
    pub item: u32,
    pub action: Vec<f64>,
    /// Every item the user interacted with, including the test item.
    pub seen: BTreeSet<u32>,
}

/// Test cases from a split: each user's first test interaction, with the
/// train and validation segments as history. Users with no history or no
/// test interaction are skipped.
pub fn eval_cases(split: &Split, vocab: &ItemVocab) -> Vec<EvalCase> {
    let mut out = Vec::new();
    for u in &split.users {
        let (Some(test), history) = (u.test.first(), u.history_for_test()) else { continue };
        if history.is_empty() {
            continue;
        }
        let steps = vocab.steps(&history);
        let item = vocab.steps(std::slice::from_ref(test))[0].item;
        let mut seen: BTreeSet<u32> = steps.iter().map(|s| s.item).collect();
        seen.insert(item);
        out.push(EvalCase { user: u.user, history: steps, item, action: test.action.clone(), seen });
    }
    out
}

/// Anything that predicts the next item distribution and the action for a
/// given next item.
pub trait Predictor {
    fn name(&self) -> String;

    /// Vocabulary size including the reserved ids.
    fn vocab_size(&self) -> usize;

    /// For each case: scores over the whole vocabulary (higher is better) and
    /// the action prediction for the case's true item, in native units.
    fn predict(&self, cases: &[&EvalCase]) -> Result<Vec<NextPrediction>>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn name(&self) -> String {
        self.spec.name.clone()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn predict(&self, cases: &[&EvalCase]) -> Result<Vec<NextPrediction>> {
        let histories: Vec<Vec<Step>> = cases
            .iter()
            .map(|c| {
                c.history
                    .iter()
                    .map(|s| Step { action: s.action.as_ref().map(|a| self.normalizer.normalize(a)), ..s.clone() })
                    .collect()
            })
            .collect();
        let requests: Vec<(&[Step], u32)> = histories.iter().zip(cases).map(|(h, c)| (h.as_slice(), c.item)).collect();
        predict_next(self, &requests)
    }
}

/// Uniformly random scores and a constant action prediction.
pub struct RandomPredictor {
    pub vocab_size: usize,
    pub action: Vec<f64>,
    pub seed: u64,
}

impl Predictor for RandomPredictor {
    fn name(&self) -> String {
        "RANDOM".into()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&self, cases: &[&EvalCase]) -> Result<Vec<NextPrediction>> {
        Ok(cases
            .iter()
            .map(|c| {
                let mut rng = seed::rng(self.seed ^ c.user, Stream::Negatives);
                NextPrediction {
                    logprobs: Some((0..self.vocab_size).map(|_| rng.gen::<f64>()).collect()),
                    actions: Some(self.action.clone()),
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Sampled negatives per query; 0 ranks against the full vocabulary.
    pub negatives: usize,
    /// Cases per forward pass.
    pub batch_size: usize,
    /// Evaluate only the first this many cases.
    pub max_cases: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], negatives: 0, batch_size: 256, max_cases: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub predictor: String,
    pub seed: u64,
    pub config: EvalConfig,
    pub cases: usize,
    pub retrieval_cases: usize,
    pub action_cases: usize,
    /// `(k, HR@k)`, in `config.ks` order.
    pub hr: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    /// Per action dimension, native units.
    pub rmse: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.iter().find(|p| p.0 == k).map(|p| p.1)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.iter().find(|p| p.0 == k).map(|p| p.1)
    }

    fn fields(&self) -> Vec<(String, String)> {
        let mut f = vec![
            ("predictor".to_string(), self.predictor.clone()),
            ("seed".into(), self.seed.to_string()),
            ("negatives".into(), self.config.negatives.to_string()),
            ("cases".into(), self.cases.to_string()),
            ("retrieval_cases".into(), self.retrieval_cases.to_string()),
            ("action_cases".into(), self.action_cases.to_string()),
        ];
        for (k, v) in &self.hr {
            f.push((format!("hr@{k}"), format!("{v:.6}")));
        }
        for (k, v) in &self.ndcg {
            f.push((format!("ndcg@{k}"), format!("{v:.6}")));
        }
        for (d, v) in self.rmse.iter().enumerate() {
            f.push((format!("rmse_{d}"), v.map_or(String::new(), |v| format!("{v:.6}"))));
        }
        f
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn csv_header(&self) -> String {
        self.fields().into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }
}

/// Ranks each case's true item and scores its action prediction.
pub fn evaluate(predictor: &dyn Predictor, cases: &[EvalCase], config: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let cases = &cases[..config.max_cases.map_or(cases.len(), |m| m.min(cases.len()))];
    if cases.is_empty() {
        return Err(LabError::Data("no test cases to evaluate".into()));
    }
    let size = predictor.vocab_size() as u32;
    let real = size.saturating_sub(RESERVED) as usize;
    let pool = if config.negatives == 0 { real } else { config.negatives + 1 };
    if let Some(&k) = config.ks.iter().find(|&&k| k == 0 || k > pool) {
        return Err(LabError::Config(format!("K = {k} outside 1..={pool}")));
    }
    let dims = cases[0].action.len();
    let mut rng = seed::rng(seed, Stream::Negatives);
    let mut hr = vec![0.0; config.ks.len()];
    let mut nd = vec![0.0; config.ks.len()];
    let mut sq = vec![0.0; dims];
    let (mut n_ret, mut n_act) = (0usize, 0usize);
    for chunk in cases.chunks(config.batch_size.max(1)) {
        let refs: Vec<&EvalCase> = chunk.iter().collect();
        let preds = predictor.predict(&refs)?;
        for (case, pred) in chunk.iter().zip(preds) {
            if let Some(scores) = &pred.logprobs {
                let rank = if config.negatives == 0 {
                    rank_among(scores, case.item, RESERVED..size)
                } else {
                    let negs = sample_negatives(&mut rng, size, &case.seen, config.negatives);
                    rank_among(scores, case.item, negs)
                };
                n_ret += 1;
                for (j, &k) in config.ks.iter().enumerate() {
                    hr[j] += hit(rank, k);
                    nd[j] += ndcg(rank, k);
                }
            }
            if let Some(a) = &pred.actions {
                n_act += 1;
                for d in 0..dims {
                    sq[d] += (a[d] - case.action[d]).powi(2);
                }
            }
        }
    }
    let avg = |v: Vec<f64>| -> Vec<(usize, f64)> {
        config.ks.iter().zip(v).map(|(&k, s)| (k, if n_ret > 0 { s / n_ret as f64 } else { 0.0 })).collect()
    };
    Ok(EvalReport {
        predictor: predictor.name(),
        seed,
        config: config.clone(),
        cases: cases.len(),
        retrieval_cases: n_ret,
        action_cases: n_act,
        hr: avg(hr),
        ndcg: avg(nd),
        rmse: sq.iter().map(|s| (n_act > 0).then(|| (s / n_act as f64).sqrt())).collect(),
    })
}

/// Up to `n` distinct real items the user never interacted with.
fn sample_negatives(rng: &mut impl Rng, size: u32, seen: &BTreeSet<u32>, n: usize) -> Vec<u32> {
    let unseen: Vec<u32> = (RESERVED..size).filter(|i| !seen.contains(i)).collect();
    let n = n.min(unseen.len());
    index::sample(rng, unseen.len(), n).into_iter().map(|j| unseen[j]).collect()
}
