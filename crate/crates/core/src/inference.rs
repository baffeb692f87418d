//! Retrieval, one-pass candidate scoring under the block-causal mask, the
//! sequential oracle it must agree with, and attention dumps.

use std::fmt::Write as _;

use layoutlab_autodiff::{Scalar, Tape, Tensor};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::layout::{build_mask, tokenize_steps, ChannelRef, Step, TokenizedSequence, VisibilityMask, RESERVED, UNK};
use crate::model::{Model, Packed};

/// Retrieval log-probability and de-normalized action prediction for one
/// candidate next item.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub item: u32,
    /// `None` when the layout has no item target for the scored step.
    pub ret_logprob: Option<f64>,
    /// `None` when the layout has no action target for the scored step.
    pub actions: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Largest absolute difference over every score in two tables of the
    /// same shape; `INFINITY` when shapes or availability differ.
    pub fn max_abs_diff(&self, other: &ScoreTable) -> f64 {
        if self.rows.len() != other.rows.len() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            if a.item != b.item {
                return f64::INFINITY;
            }
            match (a.ret_logprob, b.ret_logprob) {
                (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
            match (&a.actions, &b.actions) {
                (Some(x), Some(y)) if x.len() == y.len() => {
                    worst = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(worst, f64::max)
                }
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
        worst
    }

    /// `candidate_id,ret_logprob,action_0,...` with raw item ids, in input
    /// order. Unavailable scores are left empty.
    pub fn to_csv<T: Scalar>(&self, model: &Model<T>) -> String {
        let dims = model.config.action_dims;
        let mut s = String::from("candidate_id,ret_logprob");
        for d in 0..dims {
            write!(s, ",action_{d}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            let raw = model.vocab.raw(r.item).map_or_else(|| format!("#{}", r.item), |v| v.to_string());
            write!(s, "{raw},{}", r.ret_logprob.map_or(String::new(), |v| v.to_string())).unwrap();
            for d in 0..dims {
                let v = r.actions.as_ref().map_or(String::new(), |a| a[d].to_string());
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Model outputs for step `T` of a history of `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NextPrediction {
    /// Log-softmax over the whole vocabulary (reserved ids included).
    pub logprobs: Option<Vec<f64>>,
    /// De-normalized action prediction, given the supplied next item.
    pub actions: Option<Vec<f64>>,
}

/// Keeps the latest steps so that history plus one appended step fits the
/// position table.
pub fn fit_history<'a, T: Scalar>(model: &Model<T>, history: &'a [Step]) -> &'a [Step] {
    let keep = model.config.max_len.saturating_sub(1).max(1);
    &history[history.len().saturating_sub(keep)..]
}

/// History with a withheld next step `item` appended.
fn with_next(history: &[Step], item: u32) -> Vec<Step> {
    let ts = history.last().map_or(0, |s| s.timestamp);
    let mut v = history.to_vec();
    v.push(Step::withheld(item, ts));
    v
}

/// The action channel whose prediction is reported for the appended step:
/// the first head (in head order) with a target for that step.
fn action_channel_for<T: Scalar>(
    model: &Model<T>,
    seq: &TokenizedSequence,
    step: i64,
) -> Option<(usize, ChannelRef, usize)> {
    model
        .action_channels()
        .into_iter()
        .enumerate()
        .find_map(|(h, c)| seq.action_target_position(c, step).map(|row| (h, c, row)))
}

fn check_candidates<T: Scalar>(model: &Model<T>, items: &[u32]) -> Result<()> {
    let size = model.vocab.size() as u32;
    match items.iter().find(|&&c| c >= size) {
        Some(c) => Err(LabError::InvalidArgument(format!("candidate id {c} outside vocabulary of {size}"))),
        None => Ok(()),
    }
}

/// Batched next-step predictions: for each `(history, item)` request,
/// appends `item` with its action withheld and reads the item distribution
/// and action prediction for that step. One forward pass for all requests.
pub fn predict_next<T: Scalar>(model: &Model<T>, requests: &[(&[Step], u32)]) -> Result<Vec<NextPrediction>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    if requests.iter().any(|(h, _)| h.is_empty()) {
        return Err(LabError::EmptySequence);
    }
    check_candidates(model, &requests.iter().map(|r| r.1).collect::<Vec<_>>())?;
    let seqs: Vec<TokenizedSequence> = requests
        .iter()
        .map(|(h, item)| tokenize_steps(&with_next(fit_history(model, h), *item), &model.spec))
        .collect::<Result<_>>()?;
    let refs: Vec<&TokenizedSequence> = seqs.iter().collect();
    let packed = Packed::from_sequences(&refs, 0, model.config.action_dims);
    let len = packed.len;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let trunk = model.trunk(&mut tape, &bound, &packed, &VisibilityMask::block_causal(len, 0), None)?;

    let mut item_rows = Vec::new();
    let mut action_rows: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); model.action_channels().len()];
    for (s, seq) in seqs.iter().enumerate() {
        let step = seq.steps as i64 - 1;
        if let Some(r) = seq.item_target_position(step) {
            item_rows.push((s, s * len + r));
        }
        if let Some((h, _, r)) = action_channel_for(model, seq, step) {
            action_rows[h].push((s, s * len + r, requests[s].1 as usize));
        }
    }
    let mut out = vec![NextPrediction { logprobs: None, actions: None }; requests.len()];
    if !item_rows.is_empty() {
        let rows: Vec<usize> = item_rows.iter().map(|r| r.1).collect();
        let logits = model.item_logits(&mut tape, &bound, trunk.hidden, &rows)?;
        let lsm = tape.log_softmax(logits);
        let v = tape.value(lsm);
        for (k, &(s, _)) in item_rows.iter().enumerate() {
            out[s].logprobs = Some(v.row(k).iter().map(|x| x.as_f64()).collect());
        }
    }
    for (h, entries) in action_rows.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let rows: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let items: Vec<usize> = entries.iter().map(|e| e.2).collect();
        let p = model.action_predictions(&mut tape, &bound, trunk.hidden, h, &rows, Some(&items))?;
        let v = tape.value(p);
        for (k, &(s, _, _)) in entries.iter().enumerate() {
            let z: Vec<f64> = v.row(k).iter().map(|x| x.as_f64()).collect();
            out[s].actions = Some(model.normalizer.denormalize(&z));
        }
    }
    Ok(out)
}

/// Top-`k` real items by `h · Eᵀ` at the position predicting the step after
/// `history`. Ties go to the smaller id.
pub fn retrieve_topk<T: Scalar>(model: &Model<T>, history: &[Step], k: usize) -> Result<Vec<(u32, f64)>> {
    if k == 0 {
        return Err(LabError::InvalidArgument("K must be positive".into()));
    }
    let pred = predict_next(model, &[(history, UNK)])?.remove(0);
    let logprobs = pred.logprobs.ok_or_else(|| LabError::UnsupportedLayout(model.spec.name.clone()))?;
    let mut ranked: Vec<(u32, f64)> =
        logprobs.iter().enumerate().skip(RESERVED as usize).map(|(i, &v)| (i as u32, v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Reference scorer: one independent forward pass per candidate.
pub fn score_sequential_oracle<T: Scalar>(
    model: &Model<T>,
    history: &[Step],
    candidates: &[u32],
) -> Result<ScoreTable> {
    let mut rows = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let p = predict_next(model, &[(history, c)])?.remove(0);
        rows.push(ScoreRow { item: c, ret_logprob: p.logprobs.map(|l| l[c as usize]), actions: p.actions });
    }
    Ok(ScoreTable { rows })
}

/// Scores every candidate in one forward pass: the history followed by one
/// token per candidate, all at the next step's position, under the
/// block-causal mask. When the action head reads a history row (next-action
/// and PATCHED layouts) the trunk output is shared and only the head, or the
/// coupler, runs per candidate as one batched product.
pub fn score_parallel<T: Scalar>(model: &Model<T>, history: &[Step], candidates: &[u32]) -> Result<ScoreTable> {
    if history.is_empty() {
        return Err(LabError::EmptySequence);
    }
    if candidates.is_empty() {
        return Ok(ScoreTable::default());
    }
    check_candidates(model, candidates)?;
    let history = fit_history(model, history);
    let hist = tokenize_steps(history, &model.spec)?;
    let t = hist.len();
    let step = history.len() as i64;
    let mut extra = Vec::with_capacity(candidates.len());
    let mut template = None;
    for &c in candidates {
        let full = tokenize_steps(&with_next(history, c), &model.spec)?;
        let tok = &full.tokens[t];
        extra.push((tok.input.item, tok.input.action.clone()));
        template.get_or_insert(full);
    }
    let template = template.expect("at least one candidate");
    let c = candidates.len();
    // Row index within the packed sequence: history rows are shared, row `t`
    // stands for each candidate's own token.
    let locate = |r: usize| -> Result<Option<usize>> {
        match r.cmp(&t) {
            std::cmp::Ordering::Less => Ok(Some(r)),
            std::cmp::Ordering::Equal => Ok(None),
            std::cmp::Ordering::Greater => Err(LabError::UnsupportedLayout(model.spec.name.clone())),
        }
    };
    let packed = Packed::with_candidates(&hist, &extra, t, model.config.action_dims);
    let mask = VisibilityMask::block_causal(t, c);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let trunk = model.trunk(&mut tape, &bound, &packed, &mask, None)?;

    let mut ret = vec![None; c];
    if let Some(r) = template.item_target_position(step) {
        let rows: Vec<usize> = match locate(r)? {
            Some(r) => vec![r],
            None => (0..c).map(|k| t + k).collect(),
        };
        let logits = model.item_logits(&mut tape, &bound, trunk.hidden, &rows)?;
        let lsm = tape.log_softmax(logits);
        let v = tape.value(lsm);
        for (k, &cand) in candidates.iter().enumerate() {
            let row = if rows.len() == 1 { 0 } else { k };
            ret[k] = Some(v.row(row)[cand as usize].as_f64());
        }
    }
    let mut actions = vec![None; c];
    if let Some((h, _, r)) = action_channel_for(model, &template, step) {
        let rows: Vec<usize> = match locate(r)? {
            Some(r) => vec![r; c],
            None => (0..c).map(|k| t + k).collect(),
        };
        let items: Vec<usize> = candidates.iter().map(|&x| x as usize).collect();
        let p = model.action_predictions(&mut tape, &bound, trunk.hidden, h, &rows, Some(&items))?;
        let v = tape.value(p);
        for (k, a) in actions.iter_mut().enumerate() {
            let z: Vec<f64> = v.row(k).iter().map(|x| x.as_f64()).collect();
            *a = Some(model.normalizer.denormalize(&z));
        }
    }
    let rows = candidates
        .iter()
        .zip(ret.into_iter().zip(actions))
        .map(|(&item, (ret_logprob, actions))| ScoreRow { item, ret_logprob, actions })
        .collect();
    Ok(ScoreTable { rows })
}

/// Hidden states of the history rows when `candidates` are packed behind
/// them (for checking candidate isolation).
pub fn packed_history_states<T: Scalar>(model: &Model<T>, history: &[Step], candidates: &[u32]) -> Result<Tensor<T>> {
    let history = fit_history(model, history);
    let hist = tokenize_steps(history, &model.spec)?;
    let t = hist.len();
    let mut extra = Vec::new();
    for &c in candidates {
        let full = tokenize_steps(&with_next(history, c), &model.spec)?;
        extra.push((full.tokens[t].input.item, full.tokens[t].input.action.clone()));
    }
    let packed = Packed::with_candidates(&hist, &extra, t, model.config.action_dims);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let trunk = model.trunk(&mut tape, &bound, &packed, &VisibilityMask::block_causal(t, candidates.len()), None)?;
    let d = model.config.d;
    let h = tape.value(trunk.hidden);
    Ok(Tensor::new([t, d], h.data()[..t * d].to_vec())?)
}

/// Per-layer, per-head attention weights of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionDump {
    pub len: usize,
    pub heads: usize,
    /// `[layer][head]` row-major `len x len` matrices.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub mask: Vec<bool>,
}

impl AttentionDump {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.weights[layer][head][query * self.len + key]
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for m in self.weights.iter().flatten() {
            for row in m.chunks(self.len) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }

    /// Largest absolute weight on a masked (query, key) pair.
    pub fn max_masked_weight(&self) -> f64 {
        let mut worst = 0.0f64;
        for m in self.weights.iter().flatten() {
            for (v, allowed) in m.iter().zip(&self.mask) {
                if !allowed {
                    worst = worst.max(v.abs());
                }
            }
        }
        worst
    }

    /// Mean attention mass on key `q - 1` over queries `q >= 1`, maximized
    /// over the heads of `layer`.
    pub fn lag_mass(&self, layer: usize) -> f64 {
        if self.len < 2 {
            return 0.0;
        }
        (0..self.heads)
            .map(|h| (1..self.len).map(|q| self.get(layer, h, q, q - 1)).sum::<f64>() / (self.len - 1) as f64)
            .fold(0.0, f64::max)
    }

    /// One CSV matrix with a `query` column and one column per key.
    pub fn matrix_csv(&self, layer: usize, head: usize) -> String {
        let mut s = String::from("query");
        for k in 0..self.len {
            write!(s, ",k{k}").unwrap();
        }
        s.push('\n');
        for q in 0..self.len {
            write!(s, "{q}").unwrap();
            for k in 0..self.len {
                write!(s, ",{}", self.get(layer, head, q, k)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn dump_attention<T: Scalar>(
    model: &Model<T>,
    seq: &TokenizedSequence,
    mask: &VisibilityMask,
) -> Result<AttentionDump> {
    let packed = Packed::from_sequences(&[seq], 0, model.config.action_dims);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let trunk = model.trunk(&mut tape, &bound, &packed, mask, None)?;
    let (len, heads) = (seq.len(), model.config.heads);
    let weights = trunk
        .attention
        .iter()
        .map(|&node| {
            let v = tape.value(node).to_f64_vec();
            v.chunks(len * len).map(<[f64]>::to_vec).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    debug_assert!(weights.iter().all(|l| l.len() == heads));
    Ok(AttentionDump { len, heads, weights, mask: mask.as_slice().to_vec() })
}

/// The dummy sequence `[unk, item, unk, unk, unk, item]` with neutral
/// (normalized zero) actions.
pub fn probe_sequence(item: u32, action_dims: usize) -> Vec<Step> {
    [UNK, item, UNK, UNK, UNK, item]
        .iter()
        .enumerate()
        .map(|(t, &i)| Step::new(i, vec![0.0; action_dims], t as i64))
        .collect()
}

pub fn attention_probe<T: Scalar>(model: &Model<T>, item: u32) -> Result<AttentionDump> {
    check_candidates(model, &[item])?;
    let steps = probe_sequence(item, model.config.action_dims);
    let seq = tokenize_steps(&steps, &model.spec)?;
    dump_attention(model, &seq, &build_mask(&model.spec, steps.len(), 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemVocab;
    use crate::layout::{LayoutSpec, PRESETS};
    use crate::model::{ModelConfig, Normalizer, Precision};
    use rand::{Rng, SeedableRng};

    fn model(preset: &str) -> Model<f64> {
        let vocab = ItemVocab::new((1..=30).collect());
        let config = ModelConfig {
            d: 16,
            layers: 2,
            heads: 2,
            vocab_size: vocab.size(),
            max_len: 12,
            action_dims: 1,
            dropout: 0.0,
            precision: Precision::F64,
        };
        let norm = Normalizer { mean: vec![2.0], sd: vec![0.5] };
        Model::new(config, LayoutSpec::preset(preset).unwrap(), vocab, norm, 3).unwrap()
    }

    fn history(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Step> {
        (0..n).map(|t| Step::new(3 + rng.gen_range(0..30), vec![rng.gen_range(-2.0..2.0)], t as i64)).collect()
    }

    #[test]
    fn parallel_matches_sequential_for_every_preset() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for preset in PRESETS {
            let m = model(preset);
            for _ in 0..5 {
                let n = rng.gen_range(1..14);
                let h = history(&mut rng, n);
                let cands: Vec<u32> = (0..rng.gen_range(1..8)).map(|_| 3 + rng.gen_range(0..30)).collect();
                let par = score_parallel(&m, &h, &cands).unwrap();
                let seq = score_sequential_oracle(&m, &h, &cands).unwrap();
                assert!(par.max_abs_diff(&seq) < 1e-9, "{preset}: {par:?} vs {seq:?}");
            }
        }
    }

    #[test]
    fn candidate_order_only_permutes_rows() {
        let m = model("LAC");
        let h = history(&mut rand_chacha::ChaCha8Rng::seed_from_u64(2), 6);
        let a = score_parallel(&m, &h, &[4, 9, 17]).unwrap();
        let b = score_parallel(&m, &h, &[17, 4, 9]).unwrap();
        assert_eq!(a.rows[0], b.rows[1]);
        assert_eq!(a.rows[1], b.rows[2]);
        assert_eq!(a.rows[2], b.rows[0]);
    }

    #[test]
    fn candidates_do_not_touch_history_states() {
        let m = model("INTERLEAVED");
        let h = history(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3), 7);
        let none = packed_history_states(&m, &h, &[]).unwrap();
        let five = packed_history_states(&m, &h, &[3, 5, 8, 13, 21]).unwrap();
        let d = none.data().iter().zip(five.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12);
    }

    #[test]
    fn lac_candidates_carry_the_last_action() {
        let m = model("LAC");
        let h = vec![Step::new(5, vec![0.3], 0), Step::new(6, vec![-1.1], 1)];
        let full = tokenize_steps(&with_next(&h, 9), &m.spec).unwrap();
        assert_eq!(full.tokens[2].input.item, 9);
        assert_eq!(full.tokens[2].input.action, crate::layout::ActionInput::Value(vec![-1.1]));
    }

    #[test]
    fn single_candidate_and_empty_cases() {
        let m = model("IO_IA_BOTH_PC");
        let h = history(&mut rand_chacha::ChaCha8Rng::seed_from_u64(4), 5);
        assert!(score_parallel(&m, &h, &[]).unwrap().is_empty());
        assert!(score_sequential_oracle(&m, &h, &[]).unwrap().is_empty());
        assert!(matches!(score_parallel(&m, &[], &[4]), Err(LabError::EmptySequence)));
        assert!(score_parallel(&m, &h, &[99]).is_err());
        let one = score_parallel(&m, &h, &[7]).unwrap();
        assert_eq!(one.max_abs_diff(&score_sequential_oracle(&m, &h, &[7]).unwrap()), 0.0);
        assert_eq!(score_parallel(&m, &h, &[7]).unwrap(), one);
    }

    #[test]
    fn topk_ranks_the_real_vocabulary() {
        let m = model("ITEM_ONLY");
        let h = history(&mut rand_chacha::ChaCha8Rng::seed_from_u64(5), 4);
        let all = retrieve_topk(&m, &h, 1000).unwrap();
        let mut ids: Vec<u32> = all.iter().map(|r| r.0).collect();
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        ids.sort_unstable();
        assert_eq!(ids, (3..33).collect::<Vec<_>>());
        let lp = predict_next(&m, &[(&h, UNK)]).unwrap().remove(0).logprobs.unwrap();
        let best = (3..33).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(retrieve_topk(&m, &h, 1).unwrap()[0].0, best as u32);
        assert!(retrieve_topk(&m, &h, 0).is_err());
    }

    #[test]
    fn ties_go_to_the_smaller_id() {
        let mut m = model("ITEM_ONLY");
        let e = m.item_embedding_id();
        let row10: Vec<f64> = m.params.get(e).row(10).to_vec();
        let d = m.config.d;
        m.params.get_mut(e).data_mut()[20 * d..21 * d].copy_from_slice(&row10);
        let h = history(&mut rand_chacha::ChaCha8Rng::seed_from_u64(6), 4);
        let all = retrieve_topk(&m, &h, 1000).unwrap();
        let p10 = all.iter().position(|r| r.0 == 10).unwrap();
        let p20 = all.iter().position(|r| r.0 == 20).unwrap();
        assert_eq!(all[p10].1, all[p20].1);
        assert_eq!(p20, p10 + 1);
    }

    #[test]
    fn attention_dump_is_normalized_and_masked() {
        let m = model("LAC");
        let dump = attention_probe(&m, 7).unwrap();
        assert_eq!(dump.len, 6);
        assert_eq!(dump.layers(), 2);
        assert!(dump.max_row_sum_error() < 1e-9);
        assert_eq!(dump.max_masked_weight(), 0.0);
        assert!((0.0..=1.0).contains(&dump.lag_mass(1)));
        assert_eq!(dump.matrix_csv(1, 0).lines().count(), 7);
    }

    #[test]
    fn score_csv_uses_raw_ids() {
        let m = model("LAC");
        let h = history(&mut rand_chacha::ChaCha8Rng::seed_from_u64(7), 3);
        let csv = score_parallel(&m, &h, &[3, 4]).unwrap().to_csv(&m);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "candidate_id,ret_logprob,action_0");
        assert!(lines[1].starts_with("1,"));
        assert!(lines[2].starts_with("2,"));
    }
}
