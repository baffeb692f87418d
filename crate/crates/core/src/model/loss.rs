use layoutlab_autodiff::{NodeId, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{LabError, Result};
use crate::layout::{ChannelRef, TokenizedSequence};

/// Relative weights of the item term and of each action dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub item: f64,
    pub action: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(action_dims: usize) -> Self {
        Self { item: 1.0, action: vec![1.0; action_dims] }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.item).chain(self.action.iter().copied());
        if all.clone().any(|w| !(w >= 0.0) || !w.is_finite()) {
            return Err(LabError::Config("loss weights must be finite and non-negative".into()));
        }
        if all.sum::<f64>() <= 0.0 {
            return Err(LabError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Included targets of one action channel across a padded batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChannelTargets {
    pub channel: Option<ChannelRef>,
    /// Flattened row indices (`seq * len + position`).
    pub rows: Vec<usize>,
    /// Row-major `[rows, action_dims]` normalized targets.
    pub values: Vec<f64>,
    /// Teacher-forced item for each row (PATCHED layouts only).
    pub coupled_items: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchTargets {
    pub item_rows: Vec<usize>,
    pub items: Vec<usize>,
    /// One entry per action head, in head order.
    pub actions: Vec<ChannelTargets>,
}

impl BatchTargets {
    pub fn collect<T: Scalar>(model: &Model<T>, batch: &[&TokenizedSequence], len: usize) -> Result<Self> {
        let channels = model.action_channels();
        let coupled = model.ids.coupler.is_some();
        let mut out = BatchTargets {
            actions: channels.iter().map(|&c| ChannelTargets { channel: Some(c), ..Default::default() }).collect(),
            ..Default::default()
        };
        for (s, seq) in batch.iter().enumerate() {
            for (j, tok) in seq.tokens.iter().enumerate() {
                let row = s * len + j;
                if let Some(item) = tok.item_target.as_ref().and_then(|t| t.value) {
                    out.item_rows.push(row);
                    out.items.push(item as usize);
                }
                for slot in &tok.action_targets {
                    let Some(v) = &slot.value else { continue };
                    let h = channels.iter().position(|&c| c == slot.channel).expect("head per action target");
                    let ct = &mut out.actions[h];
                    if coupled {
                        let item = tok
                            .item_target
                            .as_ref()
                            .filter(|it| it.step == slot.step)
                            .and_then(|it| it.value)
                            .ok_or_else(|| {
                            LabError::InvalidArgument(format!(
                                "coupled action target {} at step {} has no matching item target",
                                slot.channel, slot.step
                            ))
                        })?;
                        ct.coupled_items.push(item as usize);
                    }
                    ct.rows.push(row);
                    ct.values.extend_from_slice(v);
                }
            }
        }
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.item_rows.is_empty() && self.actions.iter().all(|c| c.rows.is_empty())
    }
}

/// Prediction nodes matching a [`BatchTargets`]; `None` where a head has no
/// included rows.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub item_logits: Option<NodeId>,
    pub actions: Vec<Option<NodeId>>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: NodeId,
    /// Mean cross-entropy over included item targets.
    pub item: Option<f64>,
    /// Mean squared error per action dimension (normalized units), pooled
    /// over action heads.
    pub action: Vec<Option<f64>>,
}

/// Mean item cross-entropy plus per-dimension action MSE, weighted.
pub fn assemble_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &Predictions,
    targets: &BatchTargets,
    weights: &LossWeights,
) -> Result<LossOutput> {
    weights.validate()?;
    if targets.is_empty() {
        return Err(LabError::NoTargets);
    }
    let mut terms = Vec::new();
    let mut item = None;
    if let Some(logits) = preds.item_logits {
        let lsm = tape.log_softmax(logits);
        let picked = tape.pick_per_row(lsm, &targets.items)?;
        let nll = tape.mean(picked);
        let nll = tape.scale(nll, -T::one());
        item = Some(tape.value(nll).data()[0].as_f64());
        terms.push(tape.scale(nll, T::of(weights.item)));
    }
    let dims = weights.action.len();
    let heads_with_rows = targets.actions.iter().filter(|c| !c.rows.is_empty()).count();
    let mut sq_sum = vec![0.0; dims];
    let mut sq_n = 0usize;
    let wvec = tape.constant(Tensor::new([dims], weights.action.iter().map(|&w| T::of(w)).collect())?);
    for (ct, pred) in targets.actions.iter().zip(&preds.actions) {
        let Some(pred) = *pred else { continue };
        let k = ct.rows.len();
        let target = tape.constant(Tensor::new([k, dims], ct.values.iter().map(|&v| T::of(v)).collect())?);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        for (i, v) in tape.value(sq).data().iter().enumerate() {
            sq_sum[i % dims] += v.as_f64();
        }
        sq_n += k;
        let weighted = tape.mul(sq, wvec)?;
        let s = tape.sum(weighted);
        terms.push(tape.scale(s, T::of(1.0 / (k * heads_with_rows) as f64)));
    }
    let action = sq_sum.iter().map(|s| (sq_n > 0).then(|| s / sq_n as f64)).collect();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(LossOutput { total, item, action })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets_with_items(n: usize) -> BatchTargets {
        BatchTargets { item_rows: (0..n).collect(), items: (0..n).collect(), actions: Vec::new() }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros([3, 10]).unwrap());
        let preds = Predictions { item_logits: Some(logits), actions: Vec::new() };
        let out = assemble_loss(&mut tape, &preds, &targets_with_items(3), &LossWeights::uniform(1)).unwrap();
        assert!((out.item.unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((tape.value(out.total).data()[0] - 2.302585092994046).abs() < 1e-12);
    }

    fn action_case(pred: Vec<f64>, target: Vec<f64>, weights: &LossWeights) -> (f64, LossOutput) {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros([1, 10]).unwrap());
        let p = tape.leaf(Tensor::new([2, 2], pred).unwrap());
        let targets = BatchTargets {
            item_rows: vec![0],
            items: vec![0],
            actions: vec![ChannelTargets {
                channel: None,
                rows: vec![0, 1],
                values: target,
                coupled_items: Vec::new(),
            }],
        };
        let preds = Predictions { item_logits: Some(logits), actions: vec![Some(p)] };
        let out = assemble_loss(&mut tape, &preds, &targets, weights).unwrap();
        (tape.value(out.total).data()[0], out)
    }

    #[test]
    fn exact_action_predictions_cost_nothing() {
        let (_, out) = action_case(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0], &LossWeights::uniform(2));
        assert_eq!(out.action, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn weights_change_only_the_total() {
        let a = LossWeights { item: 1.0, action: vec![50.0, 50.0] };
        let b = LossWeights { item: 50.0, action: vec![1.0, 1.0] };
        let (ta, oa) = action_case(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0, 1.0], &a);
        let (tb, ob) = action_case(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0, 1.0], &b);
        assert_eq!(oa.item, ob.item);
        assert_eq!(oa.action, ob.action);
        assert_eq!(oa.action, vec![Some(1.0), Some(2.0)]);
        assert!((ta - (10f64.ln() + 50.0 * 3.0)).abs() < 1e-12);
        assert!((tb - (50.0 * 10f64.ln() + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn no_targets_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let err = assemble_loss(&mut tape, &Predictions::default(), &BatchTargets::default(), &LossWeights::uniform(1));
        assert!(matches!(err, Err(LabError::NoTargets)));
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights { item: 0.0, action: vec![0.0] }.validate().is_err());
        assert!(LossWeights { item: -1.0, action: vec![1.0] }.validate().is_err());
        assert!(LossWeights { item: 0.0, action: vec![1.0] }.validate().is_ok());
    }
}
