//! The convolutional confidence scorer over stacked probe signals.
//!
//! Input is the 2-channel layers × slots stack from
//! [`stack_signals`](super::stack_signals) (optionally reduced to the top
//! layer by the layer mask). Two padded convolutions with ReLU extract local
//! patterns; a per-channel sorted top-k then reduces the variable-size
//! feature map to a fixed-length vector — the score reacts to the
//! distribution of strong signals, not to where they sit, and passages of any
//! length share one network. Two fully connected layers and a logistic
//! squashing produce the confidence.
//!
//! Training ranks correct direct answers above wrong ones with the pairwise
//! hinge, sampling pairs (correct, wrong) uniformly with replacement each
//! epoch. A stratified slice of the dump is held out to pick the best epoch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pairwise_hinge, stack_signals, LayerMask};
use crate::checkpoint::Checkpoint;
use crate::data::Outcome;
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Adam, Dense2, Dense3, GradTape, Gradients, Var};
use crate::probes::{LayerSignals, SignalRecord};

/// Checkpoint kind tag for the convolutional scorer.
pub const CHECKPOINT_KIND: &str = "qualify-cnn";

/// Pairs per optimizer step during hinge training.
const PAIR_BATCH: usize = 32;

/// Architecture and training hyperparameters of the convolutional scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeCnnConfig {
    /// Which probe layers feed the scorer.
    pub layer_mask: LayerMask,
    pub conv1_channels: usize,
    /// Kernel extents (rows across layers, columns across slots); odd so
    /// zero padding preserves the spatial extents.
    pub conv1_kernel: (usize, usize),
    pub conv2_channels: usize,
    pub conv2_kernel: (usize, usize),
    /// Values kept per channel by the sorted top-k bottleneck.
    pub top_k: usize,
    /// Width of the hidden fully connected layer.
    pub fc_width: usize,
    /// Sampled pairs per epoch; default (None) is 4× the smaller class.
    pub pairs_per_epoch: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fraction of each class held out for best-epoch selection.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeCnnConfig {
    fn default() -> Self {
        ProbeCnnConfig {
            layer_mask: LayerMask::All,
            conv1_channels: 8,
            conv1_kernel: (3, 3),
            conv2_channels: 8,
            conv2_kernel: (3, 3),
            top_k: 16,
            fc_width: 32,
            pairs_per_epoch: None,
            epochs: 30,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ProbeCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv1_channels < 1 || self.conv2_channels < 1 {
            return Err(Error::Config("conv channel counts must be at least 1".into()));
        }
        for (name, (kh, kw)) in [("conv1", self.conv1_kernel), ("conv2", self.conv2_kernel)] {
            if kh < 1 || kw < 1 || kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::Config(format!(
                    "{name} kernel extents must be odd and at least 1, got {kh}x{kw}"
                )));
            }
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.fc_width < 1 {
            return Err(Error::Config("fc_width must be at least 1".into()));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::Config("pairs_per_epoch must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive and finite".into()));
        }
        if !(self.holdout_fraction.is_finite() && (0.0..=0.5).contains(&self.holdout_fraction)) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside [0, 0.5]",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// The scorer's eight parameter tensors. Convolution weights are laid out
/// one output channel per row (`in_channels * kh * kw` columns); biases are
/// column vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    conv1_w: Dense2,
    conv1_b: Dense2,
    conv2_w: Dense2,
    conv2_b: Dense2,
    fc1_w: Dense2,
    fc1_b: Dense2,
    fc2_w: Dense2,
    fc2_b: Dense2,
}

impl CnnParams {
    /// Tensors in checkpoint/flattening order.
    fn named(&self) -> [(&'static str, &Dense2); 8] {
        [
            ("conv1.w", &self.conv1_w),
            ("conv1.b", &self.conv1_b),
            ("conv2.w", &self.conv2_w),
            ("conv2.b", &self.conv2_b),
            ("fc1.w", &self.fc1_w),
            ("fc1.b", &self.fc1_b),
            ("fc2.w", &self.fc2_w),
            ("fc2.b", &self.fc2_b),
        ]
    }

    fn as_mut_vec(&mut self) -> Vec<&mut Dense2> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.named().iter().map(|(_, t)| t.shape()).collect()
    }

    /// Expected tensor shapes for a config, in the same order as `named`.
    fn expected_shapes(config: &ProbeCnnConfig) -> [(usize, usize); 8] {
        let (kh1, kw1) = config.conv1_kernel;
        let (kh2, kw2) = config.conv2_kernel;
        let c1 = config.conv1_channels;
        let c2 = config.conv2_channels;
        [
            (c1, 2 * kh1 * kw1),
            (c1, 1),
            (c2, c1 * kh2 * kw2),
            (c2, 1),
            (config.fc_width, c2 * config.top_k),
            (config.fc_width, 1),
            (1, config.fc_width),
            (1, 1),
        ]
    }
}

/// A (possibly trained) convolutional scorer: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCnnModel {
    config: ProbeCnnConfig,
    params: CnnParams,
}

struct CnnLeaves {
    vars: [Var; 8],
}

impl ProbeCnnModel {
    /// Xavier-initialized scorer, deterministic under `config.seed`.
    pub fn init(config: &ProbeCnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::init_with_rng(config, &mut rng))
    }

    fn init_with_rng(config: &ProbeCnnConfig, rng: &mut ChaCha8Rng) -> Self {
        let [s1, _, s2, _, s3, _, s4, _] = CnnParams::expected_shapes(config);
        let params = CnnParams {
            conv1_w: xavier_uniform(rng, s1.0, s1.1),
            conv1_b: Dense2::zeros(s1.0, 1),
            conv2_w: xavier_uniform(rng, s2.0, s2.1),
            conv2_b: Dense2::zeros(s2.0, 1),
            fc1_w: xavier_uniform(rng, s3.0, s3.1),
            fc1_b: Dense2::zeros(s3.0, 1),
            fc2_w: xavier_uniform(rng, s4.0, s4.1),
            fc2_b: Dense2::zeros(1, 1),
        };
        ProbeCnnModel {
            config: config.clone(),
            params,
        }
    }

    pub fn config(&self) -> &ProbeCnnConfig {
        &self.config
    }

    /// Confidence for one instance's per-layer probe signals.
    pub fn score(&self, signals: &[LayerSignals]) -> Result<f64> {
        let input = stack_signals(self.config.layer_mask.select(signals))?;
        self.score_stacked(&input)
    }

    /// Confidence for an already stacked (and masked) signal array.
    pub fn score_stacked(&self, input: &Dense3) -> Result<f64> {
        let mut tape = GradTape::new();
        let leaves = self.insert_leaves(&mut tape, false);
        let g = self.forward_on_tape(&mut tape, &leaves, input.clone())?;
        tape.num_value(g)
    }

    fn insert_leaves(&self, tape: &mut GradTape, needs_grad: bool) -> CnnLeaves {
        let vars = self
            .params
            .named()
            .map(|(_, tensor)| tape.mat(tensor.clone(), needs_grad));
        CnnLeaves { vars }
    }

    fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        leaves: &CnnLeaves,
        input: Dense3,
    ) -> Result<Var> {
        let [c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b] = leaves.vars;
        let (kh1, kw1) = self.config.conv1_kernel;
        let (kh2, kw2) = self.config.conv2_kernel;
        let x = tape.vol(input, false);
        let h1 = tape.conv2d(x, c1w, c1b, kh1, kw1, (kh1 / 2, kw1 / 2))?;
        let a1 = tape.relu_vol(h1)?;
        let h2 = tape.conv2d(a1, c2w, c2b, kh2, kw2, (kh2 / 2, kw2 / 2))?;
        let a2 = tape.relu_vol(h2)?;
        let features = tape.topk_channels(a2, self.config.top_k)?;
        let z1 = tape.matmul(f1w, features)?;
        let z1 = tape.add(z1, f1b)?;
        let hidden = tape.relu(z1)?;
        let z2 = tape.matmul(f2w, hidden)?;
        let z2 = tape.add(z2, f2b)?;
        let logit = tape.to_num(z2)?;
        tape.sigmoid(logit)
    }

    /// All parameters flattened in checkpoint order (for gradient checks).
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .named()
            .iter()
            .flat_map(|(_, t)| t.values().iter().copied())
            .collect()
    }

    /// Rebuild a scorer from flattened parameters (inverse of
    /// [`flat_params`](Self::flat_params)).
    pub fn with_flat_params(config: &ProbeCnnConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let shapes = CnnParams::expected_shapes(config);
        let total: usize = shapes.iter().map(|&(r, c)| r * c).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} flattened parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut take = |(r, c): (usize, usize)| {
            let slice = flat[offset..offset + r * c].to_vec();
            offset += r * c;
            Dense2::new(r, c, slice)
        };
        let params = CnnParams {
            conv1_w: take(shapes[0])?,
            conv1_b: take(shapes[1])?,
            conv2_w: take(shapes[2])?,
            conv2_b: take(shapes[3])?,
            fc1_w: take(shapes[4])?,
            fc1_b: take(shapes[5])?,
            fc2_w: take(shapes[6])?,
            fc2_b: take(shapes[7])?,
        };
        Ok(ProbeCnnModel {
            config: config.clone(),
            params,
        })
    }

    /// Hinge loss of one (correct, wrong) pair of stacked inputs, with its
    /// analytic gradient flattened in checkpoint order.
    pub fn pair_loss_and_grad(&self, pos: &Dense3, neg: &Dense3) -> Result<(f64, Vec<f64>)> {
        let mut tape = GradTape::new();
        let leaves = self.insert_leaves(&mut tape, true);
        let g_pos = self.forward_on_tape(&mut tape, &leaves, pos.clone())?;
        let g_neg = self.forward_on_tape(&mut tape, &leaves, neg.clone())?;
        let diff = tape.sub_num(g_neg, g_pos)?;
        let arg = tape.add_num_const(diff, 1.0)?;
        let loss = tape.relu_num(arg)?;
        let value = tape.num_value(loss)?;
        let grads = tape.backward(loss)?;
        Ok((value, flatten_grads(&grads, &leaves, &self.params)))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(CHECKPOINT_KIND, &self.config)?;
        for (name, tensor) in self.params.named() {
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
        let config: ProbeCnnConfig = ckpt.config_as()?;
        config.validate()?;
        let shapes = CnnParams::expected_shapes(&config);
        let fetch = |name: &str, shape: (usize, usize)| -> Result<Dense2> {
            let tensor = ckpt.tensor(name)?;
            if tensor.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            Ok(tensor.clone())
        };
        let params = CnnParams {
            conv1_w: fetch("conv1.w", shapes[0])?,
            conv1_b: fetch("conv1.b", shapes[1])?,
            conv2_w: fetch("conv2.w", shapes[2])?,
            conv2_b: fetch("conv2.b", shapes[3])?,
            fc1_w: fetch("fc1.w", shapes[4])?,
            fc1_b: fetch("fc1.b", shapes[5])?,
            fc2_w: fetch("fc2.w", shapes[6])?,
            fc2_b: fetch("fc2.b", shapes[7])?,
        };
        Ok(ProbeCnnModel { config, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Gradients per leaf in checkpoint order; leaves without flow get zeros.
fn flatten_grads(grads: &Gradients, leaves: &CnnLeaves, params: &CnnParams) -> Vec<f64> {
    let mut flat = Vec::new();
    for (var, (_, tensor)) in leaves.vars.iter().zip(params.named()) {
        match grads.mat(*var) {
            Some(g) => flat.extend_from_slice(g.values()),
            None => flat.extend(std::iter::repeat(0.0).take(tensor.values().len())),
        }
    }
    flat
}

/// A trained scorer plus its training history. `best_epoch` indexes the loss
/// vectors; `used_holdout` records whether epoch selection ran on the
/// held-out slice (it falls back to the training loss when a class is too
/// small to hold anything out).
#[derive(Debug, Clone)]
pub struct TrainedProbeCnn {
    pub model: ProbeCnnModel,
    pub epoch_train_losses: Vec<f64>,
    pub epoch_selection_losses: Vec<f64>,
    pub best_epoch: usize,
    pub used_holdout: bool,
}

/// Train the convolutional scorer on a signal dump (normally the validation
/// split). Correct direct answers (AD+) form the positive class; wrong ones
/// (AD−, UD) the negative class; null-answer records are ignored. Each epoch
/// samples pairs uniformly with replacement and minimizes the mean pairwise
/// hinge; the returned model is the epoch with the best held-out pair loss.
pub fn train_probe_cnn(config: &ProbeCnnConfig, dump: &[SignalRecord]) -> Result<TrainedProbeCnn> {
    config.validate()?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for record in dump {
        let class = match record.outcome {
            Outcome::AdPlus => &mut positives,
            Outcome::AdMinus | Outcome::Ud => &mut negatives,
            Outcome::An | Outcome::Un => continue,
        };
        class.push(stack_signals(config.layer_mask.select(&record.signals))?);
    }
    if positives.is_empty() {
        return Err(Error::InsufficientPairSupply { side: "correct (AD+)" });
    }
    if negatives.is_empty() {
        return Err(Error::InsufficientPairSupply { side: "wrong (AD-/UD)" });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let held_pos = (positives.len() as f64 * config.holdout_fraction).floor() as usize;
    let held_neg = (negatives.len() as f64 * config.holdout_fraction).floor() as usize;
    let (holdout_pos, train_pos) = positives.split_at(held_pos);
    let (holdout_neg, train_neg) = negatives.split_at(held_neg);
    let used_holdout = !holdout_pos.is_empty() && !holdout_neg.is_empty();

    let mut model = ProbeCnnModel::init_with_rng(config, &mut rng);
    let pairs_per_epoch = config
        .pairs_per_epoch
        .unwrap_or(4 * train_pos.len().min(train_neg.len()))
        .max(1);
    let mut adam = Adam::new(model.params.shapes(), config.learning_rate);

    let mut epoch_train_losses = Vec::with_capacity(config.epochs);
    let mut epoch_selection_losses = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, CnnParams)> = None;
    for epoch in 0..config.epochs {
        let pairs: Vec<(usize, usize)> = (0..pairs_per_epoch)
            .map(|_| {
                (
                    rng.gen_range(0..train_pos.len()),
                    rng.gen_range(0..train_neg.len()),
                )
            })
            .collect();
        let mut loss_sum = 0.0;
        for batch in pairs.chunks(PAIR_BATCH) {
            let mut tape = GradTape::new();
            let leaves = model.insert_leaves(&mut tape, true);
            let mut hinges = Vec::with_capacity(batch.len());
            for &(pi, ni) in batch {
                let g_pos =
                    model.forward_on_tape(&mut tape, &leaves, train_pos[pi].clone())?;
                let g_neg =
                    model.forward_on_tape(&mut tape, &leaves, train_neg[ni].clone())?;
                let diff = tape.sub_num(g_neg, g_pos)?;
                let arg = tape.add_num_const(diff, 1.0)?;
                hinges.push(tape.relu_num(arg)?);
            }
            let loss = tape.mean_nums(&hinges)?;
            loss_sum += tape.num_value(loss)? * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let flat = flatten_grads(&grads, &leaves, &model.params);
            let grad_tensors = unflatten_like(&flat, &model.params);
            adam.step(model.params.as_mut_vec(), &grad_tensors)?;
        }
        let train_loss = loss_sum / pairs.len() as f64;
        let selection_loss = if used_holdout {
            mean_pair_hinge(&model, holdout_pos, holdout_neg)?
        } else {
            train_loss
        };
        epoch_train_losses.push(train_loss);
        epoch_selection_losses.push(selection_loss);
        if best.as_ref().is_none_or(|&(_, l, _)| selection_loss < l) {
            best = Some((epoch, selection_loss, model.params.clone()));
        }
    }
    let (best_epoch, _, best_params) = best.expect("epochs >= 1 guarantees a best epoch");
    model.params = best_params;
    Ok(TrainedProbeCnn {
        model,
        epoch_train_losses,
        epoch_selection_losses,
        best_epoch,
        used_holdout,
    })
}

/// Mean hinge over every (correct, wrong) pair of the held-out inputs.
fn mean_pair_hinge(model: &ProbeCnnModel, pos: &[Dense3], neg: &[Dense3]) -> Result<f64> {
    let pos_scores: Vec<f64> = pos
        .iter()
        .map(|x| model.score_stacked(x))
        .collect::<Result<_>>()?;
    let neg_scores: Vec<f64> = neg
        .iter()
        .map(|x| model.score_stacked(x))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    for &p in &pos_scores {
        for &q in &neg_scores {
            sum += pairwise_hinge(p, q);
        }
    }
    Ok(sum / (pos_scores.len() * neg_scores.len()) as f64)
}

/// Rebuild per-tensor gradients from a flat vector, shaped like `params`.
fn unflatten_like(flat: &[f64], params: &CnnParams) -> Vec<Dense2> {
    let mut out = Vec::with_capacity(8);
    let mut offset = 0;
    for (_, tensor) in params.named() {
        let (r, c) = tensor.shape();
        out.push(
            Dense2::new(r, c, flat[offset..offset + r * c].to_vec())
                .expect("gradient slices are finite and sized to match"),
        );
        offset += r * c;
    }
    out
}
