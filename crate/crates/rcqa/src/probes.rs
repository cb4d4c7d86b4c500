//! Layerwise linear probes.
//!
//! A probe is a single vector per layer and head: layer `t`'s start
//! distribution is `softmax(P_t @ v_start_t)` over the passage slots plus the
//! null slot, likewise for end. Probes train by full-batch gradient descent
//! on cross-entropy against the same targets as the reader, with the reader's
//! activations precomputed and frozen — probe training never touches reader
//! parameters (it only ever holds `&BackboneModel`). Full-batch descent keeps
//! the per-epoch loss sequence non-increasing at a sane learning rate, which
//! the tests assert.
//!
//! The probe distributions are the *signals* consumed by the confidence
//! models; [`export_signals`] bundles them per instance with the decoded
//! prediction and its outcome.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{decode, BackboneModel};
use crate::checkpoint::Checkpoint;
use crate::data::{categorize, Outcome, Prediction, QaInstance};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Dense2};

/// Checkpoint kind tag for probe parameters.
pub const CHECKPOINT_KIND: &str = "probes";

/// Probe training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper {
            epochs: 60,
            learning_rate: 0.5,
        }
    }
}

impl ProbeHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("probe epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(
                "probe learning_rate must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Probe vectors for layers 1..=T (the embedding layer is not probed).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    /// One `width x 1` start vector per probed layer, bottom to top.
    start: Vec<Dense2>,
    /// One `width x 1` end vector per probed layer.
    end: Vec<Dense2>,
}

impl ProbeParams {
    /// Zero-initialized probes for `layers` probed layers of width `width`
    /// (zero probes yield uniform distributions).
    pub fn zeros(layers: usize, width: usize) -> Self {
        ProbeParams {
            start: (0..layers).map(|_| Dense2::zeros(width, 1)).collect(),
            end: (0..layers).map(|_| Dense2::zeros(width, 1)).collect(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.start.len()
    }

    pub fn width(&self) -> usize {
        self.start.first().map_or(0, |v| v.rows())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        #[derive(Serialize)]
        struct Meta {
            layers: usize,
            width: usize,
        }
        let mut ckpt = Checkpoint::new(
            CHECKPOINT_KIND,
            &Meta {
                layers: self.layer_count(),
                width: self.width(),
            },
        )?;
        for (t, (s, e)) in self.start.iter().zip(&self.end).enumerate() {
            ckpt.push(format!("probe{:02}.start", t + 1), s.clone())?;
            ckpt.push(format!("probe{:02}.end", t + 1), e.clone())?;
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            layers: usize,
            width: usize,
        }
        if ckpt.kind() != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                ckpt.kind()
            )));
        }
        let meta: Meta = ckpt.config_as()?;
        let mut params = ProbeParams {
            start: Vec::with_capacity(meta.layers),
            end: Vec::with_capacity(meta.layers),
        };
        for t in 1..=meta.layers {
            for (side, store) in [("start", &mut params.start), ("end", &mut params.end)] {
                let tensor = ckpt.tensor(&format!("probe{t:02}.{side}"))?;
                if tensor.shape() != (meta.width, 1) {
                    return Err(Error::Checkpoint(format!(
                        "probe tensor for layer {t} has shape {:?}, expected ({}, 1)",
                        tensor.shape(),
                        meta.width
                    )));
                }
                store.push(tensor.clone());
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Start/end probe distributions of one layer; both cover every passage slot
/// plus the null slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSignals {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Per-layer probe distributions for one instance, bottom layer first.
pub type ProbeSignals = Vec<LayerSignals>;

/// Apply probes to the activations of one forward pass (`activations` as
/// returned by the reader: layer 0 first). Probed layers are 1..=T.
pub fn probe_forward(params: &ProbeParams, activations: &[Dense2]) -> Result<ProbeSignals> {
    if activations.len() != params.layer_count() + 1 {
        return Err(Error::Shape(format!(
            "probes cover {} layers but forward produced {} activation sets",
            params.layer_count(),
            activations.len().saturating_sub(1)
        )));
    }
    let mut out = Vec::with_capacity(params.layer_count());
    for (acts, (v_s, v_e)) in activations[1..]
        .iter()
        .zip(params.start.iter().zip(&params.end))
    {
        out.push(LayerSignals {
            start: probe_distribution(acts, v_s)?,
            end: probe_distribution(acts, v_e)?,
        });
    }
    Ok(out)
}

/// `softmax(acts @ v)` as a plain vector.
fn probe_distribution(acts: &Dense2, v: &Dense2) -> Result<Vec<f64>> {
    let z = acts.matmul(v)?;
    softmax(z.values())
}

/// Mean cross-entropy of one probe head over cached activations, with its
/// analytic gradient. `targets[i]` is the gold slot in `activations[i]`.
pub fn probe_loss_and_grad(
    activations: &[Dense2],
    targets: &[usize],
    v: &Dense2,
) -> Result<(f64, Dense2)> {
    if activations.is_empty() {
        return Err(Error::EmptyInput("probe training set".into()));
    }
    if activations.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} activation sets but {} targets",
            activations.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Dense2::zeros(v.rows(), 1);
    let scale = 1.0 / activations.len() as f64;
    for (acts, &target) in activations.iter().zip(targets) {
        if target >= acts.rows() {
            return Err(Error::InvalidInput(format!(
                "probe target {target} out of range for {} slots",
                acts.rows()
            )));
        }
        let probs = probe_distribution(acts, v)?;
        loss -= probs[target].max(f64::MIN_POSITIVE).ln() * scale;
        // d/dv mean CE = mean of acts^T (probs - onehot)
        let mut delta = Dense2::new(acts.rows(), 1, probs)?;
        delta.set(target, 0, delta.get(target, 0) - 1.0);
        grad.add_assign_scaled(&acts.matmul_tn(&delta)?, scale)?;
    }
    Ok((loss, grad))
}

/// Probe parameters after training plus, per probed layer, the loss history
/// (`epochs + 1` entries: evaluated before every update and once at the end).
#[derive(Debug, Clone)]
pub struct TrainedProbes {
    pub params: ProbeParams,
    pub per_layer_losses: Vec<Vec<f64>>,
}

/// Train probes for every layer of `model` on `instances`. The model is read,
/// never written; probes start at zero and follow full-batch gradient
/// descent, independently per layer and head.
pub fn train_probes(
    model: &BackboneModel,
    instances: &[QaInstance],
    hyper: &ProbeHyper,
) -> Result<TrainedProbes> {
    hyper.validate()?;
    if instances.is_empty() {
        return Err(Error::EmptyInput("probe training set".into()));
    }
    let layer_count = model.config().layers;
    let width = model.config().hidden_width;

    // Cache activations once; probe training never reruns the reader.
    let mut cached: Vec<Vec<Dense2>> = Vec::with_capacity(instances.len());
    let mut start_targets = Vec::with_capacity(instances.len());
    let mut end_targets = Vec::with_capacity(instances.len());
    for inst in instances {
        inst.validate()?;
        let fwd = model.forward(&inst.query, &inst.passage)?;
        cached.push(fwd.activations[1..].to_vec());
        let (s, e) = match &inst.gold {
            crate::data::GoldAnswer::Answerable(spans) => (spans[0].start, spans[0].end),
            crate::data::GoldAnswer::Null => (inst.passage.len(), inst.passage.len()),
        };
        start_targets.push(s);
        end_targets.push(e);
    }

    let mut params = ProbeParams::zeros(layer_count, width);
    let mut per_layer_losses = Vec::with_capacity(layer_count);
    for t in 0..layer_count {
        let layer_acts: Vec<Dense2> = cached.iter().map(|acts| acts[t].clone()).collect();
        let mut losses = Vec::with_capacity(hyper.epochs + 1);
        for _ in 0..hyper.epochs {
            let (s_loss, s_grad) =
                probe_loss_and_grad(&layer_acts, &start_targets, &params.start[t])?;
            let (e_loss, e_grad) = probe_loss_and_grad(&layer_acts, &end_targets, &params.end[t])?;
            losses.push(s_loss + e_loss);
            params.start[t].add_assign_scaled(&s_grad, -hyper.learning_rate)?;
            params.end[t].add_assign_scaled(&e_grad, -hyper.learning_rate)?;
        }
        let (s_final, _) = probe_loss_and_grad(&layer_acts, &start_targets, &params.start[t])?;
        let (e_final, _) = probe_loss_and_grad(&layer_acts, &end_targets, &params.end[t])?;
        losses.push(s_final + e_final);
        per_layer_losses.push(losses);
    }
    Ok(TrainedProbes {
        params,
        per_layer_losses,
    })
}

/// One line of a signal dump: the instance's outcome, the reader's decoded
/// prediction, and the per-layer probe distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub qid: String,
    pub outcome: Outcome,
    pub prediction: Prediction,
    pub signals: ProbeSignals,
}

/// Run the reader plus probes over `instances` and collect signal records in
/// input order.
pub fn export_signals(
    model: &BackboneModel,
    probes: &ProbeParams,
    instances: &[QaInstance],
) -> Result<Vec<SignalRecord>> {
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        inst.validate()?;
        let fwd = model.forward(&inst.query, &inst.passage)?;
        let prediction = decode(&fwd.start_probs, &fwd.end_probs, model.config().span_cap)?;
        let outcome = categorize(&inst.gold, &prediction);
        let signals = probe_forward(probes, &fwd.activations)?;
        out.push(SignalRecord {
            qid: inst.qid.clone(),
            outcome,
            prediction,
            signals,
        });
    }
    Ok(out)
}

/// Write signal records as JSON lines.
pub fn save_signals(path: impl AsRef<Path>, records: &[SignalRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("record serialization cannot fail");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load signal records, validating that each line's probe vectors are
/// consistent probability distributions.
pub fn load_signals(path: impl AsRef<Path>) -> Result<Vec<SignalRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SignalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data_format(path, lineno, e.to_string()))?;
        validate_record(&record).map_err(|msg| Error::data_format(path, lineno, msg))?;
        records.push(record);
    }
    Ok(records)
}

fn validate_record(record: &SignalRecord) -> std::result::Result<(), String> {
    if record.signals.is_empty() {
        return Err("record has no probe layers".into());
    }
    let slots = record.signals[0].start.len();
    if slots < 2 {
        return Err("probe vectors need at least two slots".into());
    }
    for (t, layer) in record.signals.iter().enumerate() {
        for (side, vec) in [("start", &layer.start), ("end", &layer.end)] {
            if vec.len() != slots {
                return Err(format!(
                    "layer {t} {side} vector has {} slots, expected {slots}",
                    vec.len()
                ));
            }
            let sum: f64 = vec.iter().sum();
            if vec.iter().any(|&p| !p.is_finite() || p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(format!(
                    "layer {t} {side} vector is not a probability distribution (sum {sum})"
                ));
            }
        }
    }
    Ok(())
}
