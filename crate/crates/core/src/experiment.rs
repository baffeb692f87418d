//! End-to-end runs: split a stream, fit the vocabulary and normalizer, train
//! a layout and evaluate it.

use layoutlab_autodiff::{Scalar, Tape};
use serde::Serialize;

use crate::data::{k_core_filter, split, Interaction, ItemVocab, Split, SplitSpec};
use crate::error::{LabError, Result};
use crate::layout::{tokenize_steps, LayoutSpec, Step, TokenizedSequence};
use crate::metrics::{eval_cases, evaluate, EvalCase, EvalConfig, EvalReport};
use crate::model::{train, Model, ModelConfig, Normalizer, TrainConfig, TrainReport};

/// A split dataset ready for any layout.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: ItemVocab,
    pub normalizer: Normalizer,
    pub action_dims: usize,
    pub split: Split,
    /// Train segments as vocabulary ids with normalized actions.
    pub train: Vec<Vec<Step>>,
    /// One held-out interaction per user, native action units.
    pub cases: Vec<EvalCase>,
}

/// k-core filters `rows`, splits them per user, and fits the vocabulary (over
/// all retained interactions) and the action normalizer (train segments
/// only).
pub fn prepare(rows: &[Interaction], spec: &SplitSpec) -> Result<Prepared> {
    let action_dims =
        rows.first().map(|r| r.action.len()).ok_or_else(|| LabError::Data("empty interaction stream".into()))?;
    let rows = if spec.k_core > 1 { k_core_filter(rows, spec.k_core)? } else { rows.to_vec() };
    let split = split(&rows, spec);
    if split.users.is_empty() {
        return Err(LabError::Data("no users survive filtering and splitting".into()));
    }
    let vocab = ItemVocab::from_interactions(&rows);
    let normalizer =
        Normalizer::fit(split.users.iter().flat_map(|u| &u.train).map(|r| r.action.as_slice()), action_dims);
    let train = split
        .users
        .iter()
        .filter(|u| !u.train.is_empty())
        .map(|u| {
            let mut steps = vocab.steps(&u.train);
            for s in &mut steps {
                s.action = s.action.as_ref().map(|a| normalizer.normalize(a));
            }
            steps
        })
        .collect();
    let cases = eval_cases(&split, &vocab);
    Ok(Prepared { vocab, normalizer, action_dims, split, train, cases })
}

impl Prepared {
    /// Model config sized for this dataset.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig { vocab_size: self.vocab.size(), action_dims: self.action_dims, ..base.clone() }
    }

    /// Train segments as evaluation cases: each user's last train
    /// interaction, predicted from the ones before it.
    pub fn train_cases(&self) -> Vec<EvalCase> {
        self.split
            .users
            .iter()
            .filter(|u| u.train.len() >= 2)
            .map(|u| {
                let steps = self.vocab.steps(&u.train);
                let (last, history) = steps.split_last().expect("two or more");
                EvalCase {
                    user: u.user,
                    history: history.to_vec(),
                    item: last.item,
                    action: last.action.clone().expect("observed action"),
                    seen: steps.iter().map(|s| s.item).collect(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayoutRun {
    pub layout: String,
    pub train: TrainReport,
    pub eval: EvalReport,
}

/// Trains a fresh model for `spec` (initialized and shuffled from `seed`) and
/// evaluates it on the held-out cases.
pub fn run_layout(
    prepared: &Prepared,
    spec: &LayoutSpec,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<(Model<f32>, LayoutRun)> {
    let spec = spec.clone().with_action_dims(prepared.action_dims)?;
    let config = prepared.model_config(model);
    let mut m = Model::new(config, spec, prepared.vocab.clone(), prepared.normalizer.clone(), seed)?;
    let train_report = train(&mut m, &prepared.train, train_cfg, seed)?;
    let eval = evaluate(&m, &prepared.cases, eval_cfg, seed)?;
    Ok((m, LayoutRun { layout: eval.predictor.clone(), train: train_report, eval }))
}

/// Action RMSE per dimension in native units with every target predicted
/// from exactly the inputs the layout feeds it in training (teacher
/// forcing). `sequences` hold normalized actions, as in [`Prepared::train`].
pub fn teacher_forced_rmse<T: Scalar>(
    model: &Model<T>,
    sequences: &[Vec<Step>],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let dims = model.config.action_dims;
    let tokenized: Vec<TokenizedSequence> = sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| tokenize_steps(model.truncate(s), &model.spec))
        .collect::<Result<_>>()?;
    let mut sq = vec![0.0; dims];
    let mut count = 0usize;
    for chunk in tokenized.chunks(batch_size.max(1)) {
        let batch: Vec<&TokenizedSequence> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let (_, preds, targets) = model.forward(&mut tape, &bound, &batch, None)?;
        for (node, head) in preds.actions.iter().zip(&targets.actions) {
            let Some(node) = node else { continue };
            let p = tape.value(*node).to_f64_vec();
            for (i, (pv, tv)) in p.iter().zip(&head.values).enumerate() {
                let d = i % dims;
                sq[d] += ((pv - tv) * model.normalizer.sd[d]).powi(2);
            }
            count += head.rows.len();
        }
    }
    if count == 0 {
        return Err(LabError::NoTargets);
    }
    Ok(sq.into_iter().map(|s| (s / count as f64).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::LossWeights;

    fn data() -> Prepared {
        let cfg = SyntheticConfig { users: 120, items: 30, clusters: 3, min_len: 6, max_len: 14, ..Default::default() };
        prepare(&generate_synthetic(&cfg, 2).unwrap().interactions, &SplitSpec { k_core: 2, ..SplitSpec::default() })
            .unwrap()
    }

    #[test]
    fn prepared_segments_are_consistent() {
        let p = data();
        assert_eq!(p.cases.len(), p.split.users.len());
        assert_eq!(p.train.len(), p.split.users.len());
        for (u, t) in p.split.users.iter().zip(&p.train) {
            assert_eq!(u.train.len(), t.len());
        }
        let all: Vec<f64> = p.train.iter().flatten().map(|s| s.action.as_ref().unwrap()[0]).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!(p.cases.iter().all(|c| c.seen.contains(&c.item)));
        assert_eq!(p.train_cases().len(), p.split.users.len());
    }

    #[test]
    fn a_short_run_trains_and_evaluates() {
        let p = data();
        let model = ModelConfig { d: 16, heads: 2, max_len: 16, dropout: 0.0, ..ModelConfig::default() };
        let tc = TrainConfig {
            max_steps: 5,
            epochs: 3,
            batch_size: 32,
            weights: LossWeights::uniform(1),
            ..TrainConfig::default()
        };
        let (_, run) =
            run_layout(&p, &LayoutSpec::preset("LAC").unwrap(), &model, &tc, &EvalConfig::default(), 1).unwrap();
        assert_eq!(run.train.steps, 5);
        assert_eq!(run.eval.cases, p.cases.len());
        assert!(run.eval.rmse[0].unwrap().is_finite());
    }

    #[test]
    fn teacher_forced_rmse_matches_a_constant_model() {
        let p = data();
        let model = ModelConfig { d: 8, heads: 2, max_len: 16, dropout: 0.0, ..ModelConfig::default() };
        let mut m: Model<f64> = Model::new(
            p.model_config(&model),
            LayoutSpec::preset("LAC").unwrap(),
            p.vocab.clone(),
            p.normalizer.clone(),
            1,
        )
        .unwrap();
        // Zero the action head so every prediction is the normalized mean.
        for name in ["head[ACTION@0].w", "head[ACTION@0].b"] {
            let id = m.params.ids().find(|&id| m.params.name(id) == name).unwrap();
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let rmse = teacher_forced_rmse(&m, &p.train, 16).unwrap()[0];
        // Oracle: the population sd of train actions, over LAC's targets
        // (every step; histories fit max_len).
        let all: Vec<f64> = p.split.users.iter().flat_map(|u| &u.train).map(|r| r.action[0]).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let sd = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        assert!((rmse - sd).abs() < 1e-9, "{rmse} vs {sd}");
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(prepare(&[], &SplitSpec::default()).is_err());
    }
}
