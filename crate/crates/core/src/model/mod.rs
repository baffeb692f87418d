//! Decoder-only transformer trunk with a tied item head, per-channel action
//! regression heads and an optional late-fusion coupler.

mod checkpoint;
mod loss;
mod train;

use layoutlab_autodiff::{Bound, NodeId, ParamId, ParamStore, Scalar, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, ItemVocab};
use crate::error::{LabError, Result};
use crate::layout::{
    build_mask, ActionInput, ChannelKind, ChannelRef, Conditioning, LayoutSpec, Step, TokenizedSequence,
    VisibilityMask, PAD,
};
use crate::seed::{self, Stream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{assemble_loss, BatchTargets, LossOutput, LossWeights, Predictions};
pub use train::{train, LossPoint, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Item vocabulary size including the reserved ids.
    pub vocab_size: usize,
    /// Longest history, in interactions, the position table covers.
    pub max_len: usize,
    pub action_dims: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            vocab_size: 0,
            max_len: 50,
            action_dims: 1,
            dropout: 0.2,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(format!("model: {m}")));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.d, self.heads));
        }
        if self.layers == 0 || self.max_len == 0 || self.action_dims == 0 {
            return bad("layers, max_len and action_dims must be positive".into());
        }
        if self.vocab_size <= crate::layout::RESERVED as usize {
            return bad(format!("vocabulary of {} has no real items beyond the reserved ids", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Per-dimension z-scoring of actions, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dims: usize) -> Self {
        Self { mean: vec![0.0; dims], sd: vec![1.0; dims] }
    }

    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a [f64]>, dims: usize) -> Self {
        let mut n = 0.0;
        let mut sum = vec![0.0; dims];
        let mut sq = vec![0.0; dims];
        for a in actions {
            n += 1.0;
            for d in 0..dims {
                sum[d] += a[d];
                sq[d] += a[d] * a[d];
            }
        }
        if n == 0.0 {
            return Self::identity(dims);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let sd = (0..dims)
            .map(|d| (sq[d] / n - mean[d] * mean[d]).max(0.0).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Self { mean, sd }
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(d, v)| (v - self.mean[d]) / self.sd[d]).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(d, v)| v * self.sd[d] + self.mean[d]).collect()
    }
}

/// Token rows of one or more sequences, right-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Packed {
    pub seqs: usize,
    pub len: usize,
    pub items: Vec<usize>,
    pub positions: Vec<usize>,
    /// Per row: normalized action values, then a value flag and a sentinel
    /// flag. All zero when the token has no action channel.
    pub action_feats: Vec<f64>,
}

impl Packed {
    fn feat_width(action_dims: usize) -> usize {
        action_dims + 2
    }

    fn push_row(&mut self, item: u32, position: usize, action: &ActionInput, dims: usize) {
        self.items.push(item as usize);
        self.positions.push(position);
        match action {
            ActionInput::Absent => self.action_feats.extend(std::iter::repeat_n(0.0, dims + 2)),
            ActionInput::Sentinel => {
                self.action_feats.extend(std::iter::repeat_n(0.0, dims));
                self.action_feats.extend([0.0, 1.0]);
            }
            ActionInput::Value(v) => {
                self.action_feats.extend(v.iter().copied());
                self.action_feats.extend([1.0, 0.0]);
            }
        }
    }

    /// Pads every sequence to `len` (at least the longest).
    pub fn from_sequences(seqs: &[&TokenizedSequence], len: usize, action_dims: usize) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(len);
        let mut p =
            Packed { seqs: seqs.len(), len, items: Vec::new(), positions: Vec::new(), action_feats: Vec::new() };
        for s in seqs {
            for (j, t) in s.tokens.iter().enumerate() {
                p.push_row(t.input.item, j, &t.input.action, action_dims);
            }
            for j in s.len()..len {
                p.push_row(PAD, j, &ActionInput::Absent, action_dims);
            }
        }
        p
    }

    /// A single sequence followed by extra rows (packed candidates) that all
    /// share `position`.
    pub fn with_candidates(
        seq: &TokenizedSequence,
        extra: &[(u32, ActionInput)],
        position: usize,
        action_dims: usize,
    ) -> Self {
        let mut p = Self::from_sequences(&[seq], 0, action_dims);
        for (item, action) in extra {
            p.push_row(*item, position, action, action_dims);
        }
        p.len += extra.len();
        p
    }
}

struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct ActionHead {
    channel: ChannelRef,
    w: ParamId,
    b: ParamId,
}

struct Ids {
    item_emb: ParamId,
    pos_emb: ParamId,
    action_in: Option<ParamId>,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    heads: Vec<ActionHead>,
    coupler: Option<(ParamId, ParamId)>,
}

/// Output of the trunk on a packed batch.
pub struct Trunk {
    /// `[seqs * len, d]` final hidden states (after the last layer norm).
    pub hidden: NodeId,
    /// Per layer, `[seqs * heads, len, len]` attention weights.
    pub attention: Vec<NodeId>,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub spec: LayoutSpec,
    pub vocab: ItemVocab,
    pub normalizer: Normalizer,
    pub params: ParamStore<T>,
    ids: Ids,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self::from_params(
            self.config.clone(),
            self.spec.clone(),
            self.vocab.clone(),
            self.normalizer.clone(),
            self.params.clone(),
        )
        .expect("cloned model is consistent")
    }
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, sd).expect("positive sd");
    Tensor::from_fn(shape.to_vec(), |_| T::of(dist.sample(rng))).expect("valid shape")
}

fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec()).expect("valid shape")
}

fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape.to_vec(), T::one()).expect("valid shape")
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model for `spec`.
    pub fn new(
        config: ModelConfig,
        spec: LayoutSpec,
        vocab: ItemVocab,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        let params = Self::init_params(&config, &spec, seed)?;
        Self::from_params(config, spec, vocab, normalizer, params)
    }

    fn init_params(config: &ModelConfig, spec: &LayoutSpec, seed: u64) -> Result<ParamStore<T>> {
        config.validate()?;
        Self::check_spec(config, spec)?;
        let mut rng = seed::rng(seed, Stream::Init);
        let (d, a) = (config.d, config.action_dims);
        let sd = 0.02;
        let out_sd = sd / (2.0 * config.layers as f64).sqrt();
        let mut p = ParamStore::new();
        p.add("item_emb", normal(&mut rng, &[config.vocab_size, d], sd));
        p.add("pos_emb", normal(&mut rng, &[Self::positions(config, spec), d], sd));
        if spec.input(ChannelKind::Action).is_some() {
            p.add("action_in", normal(&mut rng, &[Packed::feat_width(a), d], sd));
        }
        for l in 0..config.layers {
            let n = |s: &str| format!("block{l}.{s}");
            p.add(n("ln1.g"), ones(&[d]));
            p.add(n("ln1.b"), zeros(&[d]));
            for w in ["q", "k", "v"] {
                p.add(n(&format!("w{w}")), normal(&mut rng, &[d, d], sd));
                p.add(n(&format!("b{w}")), zeros(&[d]));
            }
            p.add(n("wo"), normal(&mut rng, &[d, d], out_sd));
            p.add(n("bo"), zeros(&[d]));
            p.add(n("ln2.g"), ones(&[d]));
            p.add(n("ln2.b"), zeros(&[d]));
            p.add(n("w1"), normal(&mut rng, &[d, 4 * d], sd));
            p.add(n("b1"), zeros(&[4 * d]));
            p.add(n("w2"), normal(&mut rng, &[4 * d, d], out_sd));
            p.add(n("b2"), zeros(&[d]));
        }
        p.add("lnf.g", ones(&[d]));
        p.add("lnf.b", zeros(&[d]));
        for c in spec.action_targets() {
            p.add(format!("head[{c}].w"), normal(&mut rng, &[d, a], sd));
            p.add(format!("head[{c}].b"), zeros(&[a]));
        }
        if spec.conditioning == Conditioning::Patched {
            p.add("coupler.w", normal(&mut rng, &[2 * d, d], sd));
            p.add("coupler.b", zeros(&[d]));
        }
        Ok(p)
    }

    fn check_spec(config: &ModelConfig, spec: &LayoutSpec) -> Result<()> {
        if spec.action_dims != config.action_dims {
            return Err(LabError::Config(format!(
                "layout has {} action dims, model has {}",
                spec.action_dims, config.action_dims
            )));
        }
        if spec.conditioning == Conditioning::Patched && spec.item_target().is_none() {
            return Err(LabError::InvalidSpec(format!("{}: PATCHED needs an item target to couple", spec.name)));
        }
        Ok(())
    }

    /// Position table size: the longest history plus one packed step.
    fn positions(config: &ModelConfig, spec: &LayoutSpec) -> usize {
        spec.token_count(config.max_len + 1)
    }

    /// Wraps existing parameters, checking names and shapes against what
    /// `config` and `spec` require.
    pub fn from_params(
        config: ModelConfig,
        spec: LayoutSpec,
        vocab: ItemVocab,
        normalizer: Normalizer,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let template = Self::init_params(&config, &spec, 0)?;
        if template.len() != params.len() {
            return Err(LabError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.len(),
                params.len()
            )));
        }
        for (id, (name, t)) in template.ids().zip(template.iter()) {
            let got = params.get(id);
            if params.name(id) != name || got.shape() != t.shape() {
                return Err(LabError::Checkpoint(format!(
                    "parameter {} is `{}` {:?}, expected `{name}` {:?}",
                    id.index(),
                    params.name(id),
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if vocab.size() != config.vocab_size {
            return Err(LabError::Config(format!(
                "vocabulary has {} ids, model expects {}",
                vocab.size(),
                config.vocab_size
            )));
        }
        let f = |n: &str| params.find(n).expect("validated against template");
        let blocks = (0..config.layers)
            .map(|l| {
                let g = |s: &str| f(&format!("block{l}.{s}"));
                BlockIds {
                    ln1_g: g("ln1.g"),
                    ln1_b: g("ln1.b"),
                    wq: g("wq"),
                    bq: g("bq"),
                    wk: g("wk"),
                    bk: g("bk"),
                    wv: g("wv"),
                    bv: g("bv"),
                    wo: g("wo"),
                    bo: g("bo"),
                    ln2_g: g("ln2.g"),
                    ln2_b: g("ln2.b"),
                    w1: g("w1"),
                    b1: g("b1"),
                    w2: g("w2"),
                    b2: g("b2"),
                }
            })
            .collect();
        let heads = spec
            .action_targets()
            .into_iter()
            .map(|c| ActionHead { channel: c, w: f(&format!("head[{c}].w")), b: f(&format!("head[{c}].b")) })
            .collect();
        let ids = Ids {
            item_emb: f("item_emb"),
            pos_emb: f("pos_emb"),
            action_in: params.find("action_in"),
            blocks,
            lnf_g: f("lnf.g"),
            lnf_b: f("lnf.b"),
            heads,
            coupler: params.find("coupler.w").map(|w| (w, f("coupler.b"))),
        };
        Ok(Self { config, spec, vocab, normalizer, params, ids })
    }

    pub fn item_embedding_id(&self) -> ParamId {
        self.ids.item_emb
    }

    /// Action target channels with a head, in head order.
    pub fn action_channels(&self) -> Vec<ChannelRef> {
        self.ids.heads.iter().map(|h| h.channel).collect()
    }

    pub fn head_index(&self, channel: ChannelRef) -> Option<usize> {
        self.ids.heads.iter().position(|h| h.channel == channel)
    }

    /// Maps raw interactions to normalized tokenizer steps.
    pub fn steps(&self, rows: &[Interaction]) -> Vec<Step> {
        self.vocab
            .steps(rows)
            .into_iter()
            .map(|mut s| {
                s.action = s.action.map(|a| self.normalizer.normalize(&a));
                s
            })
            .collect()
    }

    /// Keeps the most recent `max_len` steps.
    pub fn truncate<'a>(&self, steps: &'a [Step]) -> &'a [Step] {
        &steps[steps.len().saturating_sub(self.config.max_len)..]
    }

    /// Runs the trunk. `dropout` is `Some` only while training.
    pub fn trunk(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        packed: &Packed,
        mask: &VisibilityMask,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Trunk> {
        let (b, l, d, h) = (packed.seqs, packed.len, self.config.d, self.config.heads);
        if mask.size() != l {
            return Err(LabError::InvalidArgument(format!(
                "mask is {0}x{0}, batch has {l} tokens per sequence",
                mask.size()
            )));
        }
        let max_pos = packed.positions.iter().copied().max().unwrap_or(0);
        let table = self.params.get(self.ids.pos_emb).rows();
        if max_pos >= table {
            return Err(LabError::InvalidArgument(format!(
                "sequence needs position {max_pos}, model supports {table} (max_len {})",
                self.config.max_len
            )));
        }
        let n = |p: ParamId| bound.node(p);
        let e = tape.embedding(n(self.ids.item_emb), &packed.items)?;
        let pos = tape.embedding(n(self.ids.pos_emb), &packed.positions)?;
        let mut x = tape.add(e, pos)?;
        if let Some(w) = self.ids.action_in {
            let fw = Packed::feat_width(self.config.action_dims);
            let feats = Tensor::new([b * l, fw], packed.action_feats.iter().map(|&v| T::of(v)).collect())?;
            let feats = tape.constant(feats);
            let a = tape.matmul(feats, n(w))?;
            x = tape.add(x, a)?;
        }
        let scale = T::of(1.0 / ((d / h) as f64).sqrt());
        let rate = self.config.dropout;
        let mut attention = Vec::with_capacity(self.ids.blocks.len());
        for blk in &self.ids.blocks {
            let y = tape.layernorm(x, n(blk.ln1_g), n(blk.ln1_b), 1e-5)?;
            let proj = |tape: &mut Tape<T>, w: ParamId, bias: ParamId| -> Result<NodeId> {
                let m = tape.matmul(y, n(w))?;
                let m = tape.add(m, n(bias))?;
                Ok(tape.split_heads(m, b, l, h)?)
            };
            let q = proj(tape, blk.wq, blk.bq)?;
            let k = proj(tape, blk.wk, blk.bk)?;
            let v = proj(tape, blk.wv, blk.bv)?;
            let s = tape.bmm(q, k, true)?;
            let s = tape.scale(s, scale);
            let s = tape.masked_fill(s, mask.as_slice())?;
            let att = tape.softmax(s);
            attention.push(att);
            let att = dropout_node(tape, att, rate, dropout.as_deref_mut())?;
            let o = tape.bmm(att, v, false)?;
            let o = tape.merge_heads(o, b, h)?;
            let o = tape.matmul(o, n(blk.wo))?;
            let o = tape.add(o, n(blk.bo))?;
            x = tape.add(x, o)?;
            let y = tape.layernorm(x, n(blk.ln2_g), n(blk.ln2_b), 1e-5)?;
            let m = tape.matmul(y, n(blk.w1))?;
            let m = tape.add(m, n(blk.b1))?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, n(blk.w2))?;
            let m = tape.add(m, n(blk.b2))?;
            let m = dropout_node(tape, m, rate, dropout.as_deref_mut())?;
            x = tape.add(x, m)?;
        }
        let hidden = tape.layernorm(x, n(self.ids.lnf_g), n(self.ids.lnf_b), 1e-5)?;
        Ok(Trunk { hidden, attention })
    }

    /// `[rows, vocab]` logits `h · Eᵀ` with the tied item table.
    pub fn item_logits(&self, tape: &mut Tape<T>, bound: &Bound, hidden: NodeId, rows: &[usize]) -> Result<NodeId> {
        let hs = tape.gather_rows(hidden, rows)?;
        Ok(tape.matmul_t(hs, bound.node(self.ids.item_emb))?)
    }

    /// `[rows, action_dims]` normalized predictions of head `head`. PATCHED
    /// layouts couple each row with the embedding of `items[r]`.
    pub fn action_predictions(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        hidden: NodeId,
        head: usize,
        rows: &[usize],
        items: Option<&[usize]>,
    ) -> Result<NodeId> {
        let hd = &self.ids.heads[head];
        let mut z = tape.gather_rows(hidden, rows)?;
        if let Some((w, b)) = self.ids.coupler {
            let items = items.ok_or_else(|| LabError::InvalidArgument("coupled head needs target items".into()))?;
            let e = tape.embedding(bound.node(self.ids.item_emb), items)?;
            let cat = tape.concat_cols(z, e)?;
            let c = tape.matmul(cat, bound.node(w))?;
            let c = tape.add(c, bound.node(b))?;
            z = tape.gelu(c);
        }
        let out = tape.matmul(z, bound.node(hd.w))?;
        Ok(tape.add(out, bound.node(hd.b))?)
    }

    /// Forward pass over tokenized sequences: trunk, item logits at rows with
    /// included item targets, and action predictions at rows with included
    /// action targets (teacher-forced coupling for PATCHED).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &[&TokenizedSequence],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Trunk, Predictions, BatchTargets)> {
        let packed = Packed::from_sequences(batch, 0, self.config.action_dims);
        let mask = VisibilityMask::block_causal(packed.len, 0);
        let trunk = self.trunk(tape, bound, &packed, &mask, dropout)?;
        let targets = BatchTargets::collect(self, batch, packed.len)?;
        let item_logits = if targets.item_rows.is_empty() {
            None
        } else {
            Some(self.item_logits(tape, bound, trunk.hidden, &targets.item_rows)?)
        };
        let mut actions = Vec::new();
        for (h, ch) in targets.actions.iter().enumerate() {
            actions.push(if ch.rows.is_empty() {
                None
            } else {
                let items = self.ids.coupler.is_some().then_some(ch.coupled_items.as_slice());
                Some(self.action_predictions(tape, bound, trunk.hidden, h, &ch.rows, items)?)
            });
        }
        Ok((trunk, Predictions { item_logits, actions }, targets))
    }

    /// Hidden states `[len, d]` of one sequence, no dropout.
    pub fn hidden_states(&self, seq: &TokenizedSequence) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let packed = Packed::from_sequences(&[seq], 0, self.config.action_dims);
        let mask = build_mask(&self.spec, seq.steps, 0);
        let trunk = self.trunk(&mut tape, &bound, &packed, &mask, None)?;
        Ok(tape.value(trunk.hidden).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut config = self.config.clone();
        config.precision = if U::BYTES == 8 { Precision::F64 } else { Precision::F32 };
        Model::from_params(config, self.spec.clone(), self.vocab.clone(), self.normalizer.clone(), self.params.cast())
            .expect("same structure")
    }
}

fn dropout_node<T: Scalar>(tape: &mut Tape<T>, x: NodeId, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = tape.value(x).shape().to_vec();
    let m = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < rate { T::zero() } else { keep })?;
    let m = tape.constant(m);
    Ok(tape.mul(x, m)?)
}
