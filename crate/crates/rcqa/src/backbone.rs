//! The span-prediction reader.
//!
//! Every passage position (plus one learned "no answer" slot appended after
//! the last real position) carries a representation that is refined through
//! `layers` blocks. A block lets each position attend over the query token
//! embeddings, mixes the attended context with the position's own state
//! through a relu feed-forward, and adds a projected residual. Two linear
//! heads score each slot as span start / span end; softmax over slots gives
//! the start and end distributions, and [`decode`] turns those into a span
//! prediction or a null (the appended slot).
//!
//! Blocks never mix information between passage positions, only between a
//! position and the query, so representations are permutation-equivariant in
//! the passage unless positional encodings are enabled.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{GoldAnswer, Prediction, QaInstance, Span, Token};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Adam, Dense2, GradTape, Var};

/// Checkpoint kind tag for the reader.
pub const CHECKPOINT_KIND: &str = "backbone";

/// Hyperparameters of the reader and its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: u32,
    /// Embedding width (the width of layer-0 representations).
    pub embed_width: usize,
    /// Width of every later layer's representations.
    pub hidden_width: usize,
    /// Number of blocks; activations run from layer 0 to this depth.
    pub layers: usize,
    /// Longest decodable span, in tokens.
    pub span_cap: usize,
    /// Add sinusoidal position information to the embeddings.
    #[serde(default)]
    pub positional: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 50,
            embed_width: 16,
            hidden_width: 16,
            layers: 4,
            span_cap: 16,
            positional: false,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.vocab_size >= 1, "vocab_size must be at least 1")?;
        check(self.embed_width >= 1, "embed_width must be at least 1")?;
        check(self.hidden_width >= 1, "hidden_width must be at least 1")?;
        check(self.layers >= 1, "layers must be at least 1")?;
        check(self.span_cap >= 1, "span_cap must be at least 1")?;
        check(self.epochs >= 1, "epochs must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive and finite",
        )
    }
}

/// Parameters of one block. `d_in` is the incoming representation width
/// (embed width for the first block, hidden width afterwards).
#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    /// d_in x embed: projects positions into query space for attention scores.
    w_attn: Dense2,
    /// d_in x hidden: the position's own contribution.
    w_self: Dense2,
    /// embed x hidden: the attended query context's contribution.
    w_ctx: Dense2,
    /// 1 x hidden bias before the relu.
    b1: Dense2,
    /// hidden x hidden feed-forward.
    w_ff: Dense2,
    /// 1 x hidden bias after the feed-forward.
    b2: Dense2,
    /// d_in x hidden residual projection.
    w_res: Dense2,
}

/// The reader model.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    /// vocab x embed token embeddings.
    embed: Dense2,
    /// 1 x embed learned representation of the "no answer" slot.
    null_embed: Dense2,
    layers: Vec<LayerParams>,
    /// hidden x 1 span-start head.
    w_start: Dense2,
    /// hidden x 1 span-end head.
    w_end: Dense2,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct BackboneForward {
    /// Per-layer passage representations, layer 0 (embeddings) through the
    /// last block; each has one row per passage position plus the null slot.
    pub activations: Vec<Dense2>,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    /// Softmax of the logits over all slots (the last entry is the null slot).
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
}

/// Leaf handles for one tape; shared by every instance in a batch.
struct LeafVars {
    embed: Var,
    null_embed: Var,
    layers: Vec<LayerLeafVars>,
    w_start: Var,
    w_end: Var,
}

struct LayerLeafVars {
    w_attn: Var,
    w_self: Var,
    w_ctx: Var,
    b1: Var,
    w_ff: Var,
    b2: Var,
    w_res: Var,
}

/// Per-instance graph outputs on a tape.
struct ForwardVars {
    p_layers: Vec<Var>,
    start_logits: Var,
    end_logits: Var,
}

impl BackboneModel {
    /// Initialize with seeded uniform Xavier weights (biases zero).
    pub fn init(config: &BackboneConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(config, &mut rng)
    }

    fn init_with_rng(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d0 = config.embed_width;
        let d = config.hidden_width;
        let mut xavier = |rows: usize, cols: usize| crate::numerics::xavier_uniform(rng, rows, cols);
        let embed = xavier(config.vocab_size as usize, d0);
        let null_embed = xavier(1, d0);
        let mut layers = Vec::with_capacity(config.layers);
        for t in 0..config.layers {
            let d_in = if t == 0 { d0 } else { d };
            layers.push(LayerParams {
                w_attn: xavier(d_in, d0),
                w_self: xavier(d_in, d),
                w_ctx: xavier(d0, d),
                b1: Dense2::zeros(1, d),
                w_ff: xavier(d, d),
                b2: Dense2::zeros(1, d),
                w_res: xavier(d_in, d),
            });
        }
        let w_start = xavier(d, 1);
        let w_end = xavier(d, 1);
        Ok(BackboneModel {
            config: config.clone(),
            embed,
            null_embed,
            layers,
            w_start,
            w_end,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// All parameter tensors in a fixed order (paired with unique names).
    fn named_params(&self) -> Vec<(String, &Dense2)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("null_embed".to_string(), &self.null_embed),
        ];
        for (t, layer) in self.layers.iter().enumerate() {
            for (suffix, tensor) in [
                ("w_attn", &layer.w_attn),
                ("w_self", &layer.w_self),
                ("w_ctx", &layer.w_ctx),
                ("b1", &layer.b1),
                ("w_ff", &layer.w_ff),
                ("b2", &layer.b2),
                ("w_res", &layer.w_res),
            ] {
                out.push((format!("layer{t:02}.{suffix}"), tensor));
            }
        }
        out.push(("head.start".to_string(), &self.w_start));
        out.push(("head.end".to_string(), &self.w_end));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Dense2> {
        let mut out: Vec<&mut Dense2> = vec![&mut self.embed, &mut self.null_embed];
        for layer in &mut self.layers {
            out.push(&mut layer.w_attn);
            out.push(&mut layer.w_self);
            out.push(&mut layer.w_ctx);
            out.push(&mut layer.b1);
            out.push(&mut layer.w_ff);
            out.push(&mut layer.b2);
            out.push(&mut layer.w_res);
        }
        out.push(&mut self.w_start);
        out.push(&mut self.w_end);
        out
    }

    fn insert_leaves(&self, tape: &mut GradTape, trainable: bool) -> LeafVars {
        LeafVars {
            embed: tape.mat(self.embed.clone(), trainable),
            null_embed: tape.mat(self.null_embed.clone(), trainable),
            layers: self
                .layers
                .iter()
                .map(|l| LayerLeafVars {
                    w_attn: tape.mat(l.w_attn.clone(), trainable),
                    w_self: tape.mat(l.w_self.clone(), trainable),
                    w_ctx: tape.mat(l.w_ctx.clone(), trainable),
                    b1: tape.mat(l.b1.clone(), trainable),
                    w_ff: tape.mat(l.w_ff.clone(), trainable),
                    b2: tape.mat(l.b2.clone(), trainable),
                    w_res: tape.mat(l.w_res.clone(), trainable),
                })
                .collect(),
            w_start: tape.mat(self.w_start.clone(), trainable),
            w_end: tape.mat(self.w_end.clone(), trainable),
        }
    }

    /// Leaf vars in the same order as [`BackboneModel::params_mut`].
    fn leaf_order(leaves: &LeafVars) -> Vec<Var> {
        let mut out = vec![leaves.embed, leaves.null_embed];
        for l in &leaves.layers {
            out.extend([l.w_attn, l.w_self, l.w_ctx, l.b1, l.w_ff, l.b2, l.w_res]);
        }
        out.push(leaves.w_start);
        out.push(leaves.w_end);
        out
    }

    fn check_instance_tokens(&self, query: &[Token], passage: &[Token]) -> Result<()> {
        if query.is_empty() {
            return Err(Error::EmptyInput("query has no tokens".into()));
        }
        if passage.is_empty() {
            return Err(Error::EmptyInput("passage has no tokens".into()));
        }
        for tok in query.iter().chain(passage) {
            if tok.0 >= self.config.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {} out of range for vocabulary of {}",
                    tok.0, self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn forward_from_leaves(
        &self,
        tape: &mut GradTape,
        leaves: &LeafVars,
        query: &[Token],
        passage: &[Token],
    ) -> Result<ForwardVars> {
        self.check_instance_tokens(query, passage)?;
        let d0 = self.config.embed_width;
        let query_ids: Vec<usize> = query.iter().map(|t| t.idx()).collect();
        let passage_ids: Vec<usize> = passage.iter().map(|t| t.idx()).collect();

        let mut q0 = tape.embed_rows(leaves.embed, &query_ids)?;
        let mut p_tokens = tape.embed_rows(leaves.embed, &passage_ids)?;
        if self.config.positional {
            q0 = tape.add_const_mat(q0, positional_encoding(query.len(), d0))?;
            p_tokens = tape.add_const_mat(p_tokens, positional_encoding(passage.len(), d0))?;
        }
        let mut p = tape.append_row(p_tokens, leaves.null_embed)?;

        let mut p_layers = vec![p];
        let scale = 1.0 / (d0 as f64).sqrt();
        for layer in &leaves.layers {
            let projected = tape.matmul(p, layer.w_attn)?;
            let scores = tape.matmul_nt(projected, q0)?;
            let scaled = tape.scale(scores, scale)?;
            let attn = tape.softmax_rows(scaled)?;
            let context = tape.matmul(attn, q0)?;
            let own = tape.matmul(p, layer.w_self)?;
            let ctx_part = tape.matmul(context, layer.w_ctx)?;
            let mixed = tape.add(own, ctx_part)?;
            let pre = tape.add_row(mixed, layer.b1)?;
            let hidden = tape.relu(pre)?;
            let ff = tape.matmul(hidden, layer.w_ff)?;
            let ff_biased = tape.add_row(ff, layer.b2)?;
            let residual = tape.matmul(p, layer.w_res)?;
            p = tape.add(ff_biased, residual)?;
            p_layers.push(p);
        }
        let start_logits = tape.matmul(p, leaves.w_start)?;
        let end_logits = tape.matmul(p, leaves.w_end)?;
        Ok(ForwardVars {
            p_layers,
            start_logits,
            end_logits,
        })
    }

    /// Run the reader on one instance; pure with respect to the model.
    pub fn forward(&self, query: &[Token], passage: &[Token]) -> Result<BackboneForward> {
        let mut tape = GradTape::new();
        let leaves = self.insert_leaves(&mut tape, false);
        let fwd = self.forward_from_leaves(&mut tape, &leaves, query, passage)?;
        let activations = fwd
            .p_layers
            .iter()
            .map(|&v| tape.mat_value(v).cloned())
            .collect::<Result<Vec<_>>>()?;
        let start_logits: Vec<f64> = tape.mat_value(fwd.start_logits)?.values().to_vec();
        let end_logits: Vec<f64> = tape.mat_value(fwd.end_logits)?.values().to_vec();
        let start_probs = softmax(&start_logits)?;
        let end_probs = softmax(&end_logits)?;
        Ok(BackboneForward {
            activations,
            start_logits,
            end_logits,
            start_probs,
            end_probs,
        })
    }

    /// Forward plus decoding into a span or null prediction.
    pub fn predict(&self, query: &[Token], passage: &[Token]) -> Result<Prediction> {
        let fwd = self.forward(query, passage)?;
        decode(&fwd.start_probs, &fwd.end_probs, self.config.span_cap)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(CHECKPOINT_KIND, &self.config)?;
        for (name, tensor) in self.named_params() {
            ckpt.push(name, tensor.clone())?;
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind() != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                ckpt.kind()
            )));
        }
        let config: BackboneConfig = ckpt.config_as()?;
        // Template gives expected names/shapes; fill from the checkpoint.
        let mut model = BackboneModel::init(&config)?;
        let expected: Vec<(String, (usize, usize))> = model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape()))
            .collect();
        for ((name, shape), slot) in expected.iter().zip(model.params_mut()) {
            let tensor = ckpt.tensor(name)?;
            if tensor.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *slot = tensor.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Sinusoidal positional encodings, one row per position.
pub fn positional_encoding(rows: usize, width: usize) -> Dense2 {
    Dense2::from_fn(rows, width, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Pick the best direct span or the null slot from start/end distributions.
///
/// Both vectors cover `passage_len + 1` slots (the last is the null slot) and
/// must be probability distributions. A direct candidate is any `(s, e)` with
/// `s <= e`, both inside the passage, covering at most `span_cap` tokens;
/// its score is `start[s] * end[e]`. The null candidate
/// scores `start[null] * end[null]` and wins only when *strictly* better.
/// Direct ties resolve to the smallest start, then smallest end.
pub fn decode(start_probs: &[f64], end_probs: &[f64], span_cap: usize) -> Result<Prediction> {
    if span_cap == 0 {
        return Err(Error::InvalidInput("span_cap must be at least 1".into()));
    }
    if start_probs.len() != end_probs.len() {
        return Err(Error::Shape(format!(
            "start and end distributions differ in length: {} vs {}",
            start_probs.len(),
            end_probs.len()
        )));
    }
    if start_probs.len() < 2 {
        return Err(Error::InvalidInput(
            "distributions need at least one passage slot plus the null slot".into(),
        ));
    }
    for (name, probs) in [("start", start_probs), ("end", end_probs)] {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "{name} distribution is not a probability vector (sum {sum})"
            )));
        }
    }
    let null_slot = start_probs.len() - 1;
    let mut best: Option<(Span, f64)> = None;
    for s in 0..null_slot {
        let cap_end = (s + span_cap - 1).min(null_slot - 1);
        for e in s..=cap_end {
            let score = start_probs[s] * end_probs[e];
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((Span { start: s, end: e }, score));
            }
        }
    }
    let (span, score) = best.expect("at least one direct candidate exists");
    let null_score = start_probs[null_slot] * end_probs[null_slot];
    if null_score > score {
        Ok(Prediction::Null)
    } else {
        Ok(Prediction::Direct { span, score })
    }
}

/// A trained reader plus its per-epoch snapshots and training losses.
#[derive(Debug, Clone)]
pub struct TrainedBackbone {
    pub model: BackboneModel,
    /// Model state after each epoch (the last one equals `model`).
    pub snapshots: Vec<BackboneModel>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Gold target slots for the two heads: the first gold span for answerable
/// instances, the null slot for unanswerable ones.
fn target_slots(instance: &QaInstance) -> (usize, usize) {
    match &instance.gold {
        GoldAnswer::Answerable(spans) => (spans[0].start, spans[0].end),
        GoldAnswer::Null => (instance.passage.len(), instance.passage.len()),
    }
}

/// Train a reader from scratch with Adam on shuffled minibatches. Fully
/// deterministic for a given `(config, instances)` pair.
pub fn train(config: &BackboneConfig, instances: &[QaInstance]) -> Result<TrainedBackbone> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::EmptyInput("backbone training set".into()));
    }
    for inst in instances {
        inst.validate()?;
        inst.validate_vocab(config.vocab_size)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = BackboneModel::init_with_rng(config, &mut rng)?;
    let mut adam = Adam::new(
        model.named_params().iter().map(|(_, t)| t.shape()).collect(),
        config.learning_rate,
    );
    let mut snapshots = Vec::with_capacity(config.epochs);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..instances.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = GradTape::new();
            let leaves = model.insert_leaves(&mut tape, true);
            let mut instance_losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let inst = &instances[idx];
                let fwd = model.forward_from_leaves(&mut tape, &leaves, &inst.query, &inst.passage)?;
                let (s_target, e_target) = target_slots(inst);
                let s_loss = tape.cross_entropy_col(fwd.start_logits, s_target)?;
                let e_loss = tape.cross_entropy_col(fwd.end_logits, e_target)?;
                instance_losses.push(tape.add_num(s_loss, e_loss)?);
            }
            let batch_loss = tape.mean_nums(&instance_losses)?;
            loss_sum += tape.num_value(batch_loss)? * batch.len() as f64;
            let grads = tape.backward(batch_loss)?;
            let leaf_vars = BackboneModel::leaf_order(&leaves);
            let grad_mats: Vec<Dense2> = leaf_vars
                .iter()
                .map(|&v| {
                    grads
                        .mat(v)
                        .cloned()
                        .ok_or_else(|| Error::Shape("parameter received no gradient".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            adam.step(model.params_mut(), &grad_mats)?;
        }
        epoch_losses.push(loss_sum / instances.len() as f64);
        snapshots.push(model.clone());
    }
    Ok(TrainedBackbone {
        model,
        snapshots,
        epoch_losses,
    })
}
