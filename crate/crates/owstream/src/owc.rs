//! The convolutional open-world classifier: a unit-sphere embedding shared
//! by K one-vs-rest sigmoid heads, trained jointly on binary classification
//! error plus the triplet margin term, with per-class novelty thresholds
//! derived as one-sided confidence lower bounds on training confidence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metric::{mine_triplets, triplet_term, Label, MarginConfig, Triplet};
use crate::network::{mbgd_step, ForwardCache, NetworkConfig, NetworkGrads, NetworkParams};
use crate::stats::student_t_quantile;
use crate::tensor::euclidean;

pub const REJECT: Label = -1;

/// Smallest value a clamped threshold may take.
pub const EPS_PROB: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvOwcModel {
    pub phi: NetworkParams,
    pub heads: Vec<Head>,
    /// Known labels, in head order.
    pub class_list: Vec<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub mini_batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: MarginConfig,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> TrainHyper {
        TrainHyper {
            mini_batch: 64,
            epochs: 10,
            learning_rate: 5.0,
            margin: MarginConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub label: Label,
    pub threshold: f64,
    pub mean_prob: f64,
    pub sample_std: f64,
    pub count: usize,
}

/// Per-class novelty thresholds, aligned with the model's class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn threshold_for(&self, label: Label) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| e.threshold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutcome {
    /// Class label, or [`REJECT`] when every class probability falls below
    /// its threshold.
    pub estimated_label: Label,
    /// Max class probability.
    pub confidence: f64,
    pub per_class_probs: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable `log(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// BCE of one sigmoid head on one instance, from the pre-sigmoid logit.
/// Equals `-[t log p + (1-t) log(1-p)]` with p = sigmoid(z).
fn bce_from_logit(z: f64, target: bool) -> f64 {
    softplus(z) - if target { z } else { 0.0 }
}

impl ConvOwcModel {
    /// Fresh model with freshly initialized embedding and one zero head per
    /// class.
    pub fn init(
        config: NetworkConfig,
        class_list: Vec<Label>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvOwcModel> {
        let phi = NetworkParams::init(config, rng)?;
        let d = phi.config.embed_dim;
        let heads = class_list
            .iter()
            .map(|_| Head {
                weights: vec![0.0; d],
                bias: 0.0,
            })
            .collect();
        Ok(ConvOwcModel {
            phi,
            heads,
            class_list,
        })
    }

    /// Unit-norm embedding of one instance.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.phi.forward(x)?.embedding)
    }

    /// Independent per-class sigmoid probabilities (they need not sum to 1).
    pub fn class_probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.embed(x)?;
        Ok(self.probs_from_embedding(&e))
    }

    pub fn probs_from_embedding(&self, embedding: &[f64]) -> Vec<f64> {
        self.heads
            .iter()
            .map(|h| sigmoid(logit(h, embedding)))
            .collect()
    }

    fn class_index(&self, label: Label) -> Result<usize> {
        self.class_list
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Usage(format!("label {} not in class list", label)))
    }
}

fn logit(head: &Head, embedding: &[f64]) -> f64 {
    head.weights
        .iter()
        .zip(embedding)
        .map(|(w, e)| w * e)
        .sum::<f64>()
        + head.bias
}

/// Mean one-vs-rest BCE over K heads and the batch.
pub fn class_loss(model: &ConvOwcModel, xs: &[Vec<f64>], labels: &[Label]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Usage("class_loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        model.class_index(y)?;
        let e = model.embed(x)?;
        for (ci, head) in model.heads.iter().enumerate() {
            total += bce_from_logit(logit(head, &e), model.class_list[ci] == y);
        }
    }
    Ok(total / (model.heads.len() * xs.len()) as f64)
}

/// The joint objective on a mini-batch with an already-mined triplet set:
/// BCE averaged over all 3M triplet member slots plus `beta` times the mean
/// hinge term. With no triplets, falls back to plain class loss over the
/// whole batch.
pub fn overall_loss(
    model: &ConvOwcModel,
    xs: &[Vec<f64>],
    labels: &[Label],
    triplets: &[Triplet],
    margin: MarginConfig,
) -> Result<f64> {
    if triplets.is_empty() {
        return class_loss(model, xs, labels);
    }
    let embeddings: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| model.embed(x))
        .collect::<Result<_>>()?;
    let m = triplets.len() as f64;
    let k = model.heads.len() as f64;
    let mut bce = 0.0;
    let mut hinge = 0.0;
    for t in triplets {
        for &idx in &[t.anchor, t.positive, t.negative] {
            let y = labels[idx];
            model.class_index(y)?;
            for (ci, head) in model.heads.iter().enumerate() {
                bce += bce_from_logit(logit(head, &embeddings[idx]), model.class_list[ci] == y);
            }
        }
        let d_ap = euclidean(&embeddings[t.anchor], &embeddings[t.positive]);
        let d_an = euclidean(&embeddings[t.anchor], &embeddings[t.negative]);
        hinge += triplet_term(d_ap, d_an, margin.gamma)?;
    }
    Ok(bce / (3.0 * k * m) + margin.beta * hinge / m)
}

/// Gradients of one head, mirroring [`Head`].
pub type HeadGrads = Vec<Head>;

/// Loss and analytic gradients of the joint objective on a mini-batch with a
/// fixed triplet set. The triplet set must have been mined from this batch's
/// embeddings (or frozen externally for gradient checking).
pub fn overall_grads(
    model: &ConvOwcModel,
    xs: &[Vec<f64>],
    labels: &[Label],
    triplets: &[Triplet],
    margin: MarginConfig,
) -> Result<(f64, NetworkGrads, HeadGrads)> {
    let caches: Vec<ForwardCache> = xs
        .iter()
        .map(|x| model.phi.forward(x))
        .collect::<Result<_>>()?;
    let k = model.heads.len();
    let d = model.phi.config.embed_dim;
    let mut head_grads: HeadGrads = model
        .heads
        .iter()
        .map(|_| Head {
            weights: vec![0.0; d],
            bias: 0.0,
        })
        .collect();
    // accumulated dL/d(embedding) per batch instance
    let mut d_embed = vec![vec![0.0; d]; xs.len()];
    let mut loss = 0.0;

    // slot multiplicity: how many triplet member slots each instance fills
    let mut slot_count = vec![0usize; xs.len()];
    if triplets.is_empty() {
        for c in slot_count.iter_mut() {
            *c = 1;
        }
    } else {
        for t in triplets {
            slot_count[t.anchor] += 1;
            slot_count[t.positive] += 1;
            slot_count[t.negative] += 1;
        }
    }
    let bce_scale = if triplets.is_empty() {
        1.0 / (k * xs.len()) as f64
    } else {
        1.0 / (3.0 * k as f64 * triplets.len() as f64)
    };

    for (idx, &mult) in slot_count.iter().enumerate() {
        if mult == 0 {
            continue;
        }
        let y = labels[idx];
        model.class_index(y)?;
        let e = &caches[idx].embedding;
        let factor = mult as f64 * bce_scale;
        for (ci, head) in model.heads.iter().enumerate() {
            let z = logit(head, e);
            let target = model.class_list[ci] == y;
            loss += factor * bce_from_logit(z, target);
            let dz = factor * (sigmoid(z) - if target { 1.0 } else { 0.0 });
            let hg = &mut head_grads[ci];
            for (gw, ev) in hg.weights.iter_mut().zip(e) {
                *gw += dz * ev;
            }
            hg.bias += dz;
            for (de, w) in d_embed[idx].iter_mut().zip(&head.weights) {
                *de += dz * w;
            }
        }
    }

    if !triplets.is_empty() {
        let m = triplets.len() as f64;
        let scale = margin.beta / m;
        for t in triplets {
            let ea = &caches[t.anchor].embedding;
            let ep = &caches[t.positive].embedding;
            let en = &caches[t.negative].embedding;
            let d_ap = euclidean(ea, ep);
            let d_an = euclidean(ea, en);
            let term = triplet_term(d_ap, d_an, margin.gamma)?;
            loss += scale * term;
            if term <= 0.0 {
                continue;
            }
            // d term / d d_ap = 1/(d_ap+1); d term / d d_an = -1/(d_an+1);
            // d d/d e follows the unit difference direction
            let cap = scale / ((d_ap.max(1e-12)) * (d_ap + 1.0));
            let can = scale / ((d_an.max(1e-12)) * (d_an + 1.0));
            for i in 0..ea.len() {
                let dap_i = ea[i] - ep[i];
                let dan_i = ea[i] - en[i];
                d_embed[t.anchor][i] += cap * dap_i - can * dan_i;
                d_embed[t.positive][i] -= cap * dap_i;
                d_embed[t.negative][i] += can * dan_i;
            }
        }
    }

    let mut net_grads = NetworkGrads::zeros_like(&model.phi);
    for (idx, de) in d_embed.iter().enumerate() {
        if de.iter().all(|v| *v == 0.0) {
            continue;
        }
        model.phi.backward(&caches[idx], de, &mut net_grads)?;
    }
    Ok((loss, net_grads, head_grads))
}

fn apply_head_step(model: &mut ConvOwcModel, grads: &HeadGrads, lr: f64) -> Result<()> {
    for (h, g) in model.heads.iter_mut().zip(grads) {
        if !g.bias.is_finite() || g.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite head gradient".into()));
        }
        for (w, gw) in h.weights.iter_mut().zip(&g.weights) {
            *w -= lr * gw;
        }
        h.bias -= lr * g.bias;
    }
    Ok(())
}

/// Trains a fresh model on a labeled set with mini-batch gradient descent
/// over the joint objective. Returns the model and per-epoch mean loss.
pub fn train(
    config: NetworkConfig,
    data: &[(Vec<f64>, Label)],
    hyper: &TrainHyper,
) -> Result<(ConvOwcModel, Vec<f64>)> {
    hyper.margin.validate()?;
    let mut by_class: BTreeMap<Label, usize> = BTreeMap::new();
    for (_, y) in data {
        *by_class.entry(*y).or_insert(0) += 1;
    }
    if by_class.len() < 2 {
        return Err(Error::Training(format!(
            "training needs at least 2 classes, got {}",
            by_class.len()
        )));
    }
    let class_list: Vec<Label> = by_class.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = ConvOwcModel::init(config, class_list, &mut rng)?;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(hyper.mini_batch) {
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| data[i].1).collect();
            let embeddings: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| model.embed(x))
                .collect::<Result<_>>()?;
            let triplets = mine_triplets(&embeddings, &labels, hyper.margin.gamma);
            let (loss, net_grads, head_grads) =
                overall_grads(&model, &xs, &labels, &triplets, hyper.margin)?;
            mbgd_step(&mut model.phi, &net_grads, hyper.learning_rate)?;
            apply_head_step(&mut model, &head_grads, hyper.learning_rate)?;
            epoch_loss += loss;
            steps += 1;
        }
        epoch_losses.push(if steps > 0 { epoch_loss / steps as f64 } else { 0.0 });
    }
    Ok((model, epoch_losses))
}

/// Like [`train`], but evaluates closed-set validation accuracy after each
/// epoch and returns the best snapshot (earliest epoch on ties) together
/// with the 1-based best epoch and the per-epoch validation accuracies.
pub fn train_with_validation(
    config: NetworkConfig,
    train_data: &[(Vec<f64>, Label)],
    validation: &[(Vec<f64>, Label)],
    hyper: &TrainHyper,
) -> Result<(ConvOwcModel, usize, Vec<f64>)> {
    hyper.margin.validate()?;
    if hyper.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let mut by_class: BTreeMap<Label, usize> = BTreeMap::new();
    for (_, y) in train_data {
        *by_class.entry(*y).or_insert(0) += 1;
    }
    if by_class.len() < 2 {
        return Err(Error::Training(format!(
            "training needs at least 2 classes, got {}",
            by_class.len()
        )));
    }
    let class_list: Vec<Label> = by_class.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = ConvOwcModel::init(config, class_list, &mut rng)?;
    let mut best: Option<(ConvOwcModel, usize, f64)> = None;
    let mut history = Vec::with_capacity(hyper.epochs);

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.mini_batch) {
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| train_data[i].0.clone()).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| train_data[i].1).collect();
            let embeddings: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| model.embed(x))
                .collect::<Result<_>>()?;
            let triplets = mine_triplets(&embeddings, &labels, hyper.margin.gamma);
            let (_, net_grads, head_grads) =
                overall_grads(&model, &xs, &labels, &triplets, hyper.margin)?;
            mbgd_step(&mut model.phi, &net_grads, hyper.learning_rate)?;
            apply_head_step(&mut model, &head_grads, hyper.learning_rate)?;
        }
        let acc = closed_set_accuracy(&model, validation)?;
        history.push(acc);
        if best.as_ref().map_or(true, |(_, _, b)| acc > *b) {
            best = Some((model.clone(), epoch, acc));
        }
    }
    let (best_model, best_epoch, _) = best.expect("epochs >= 1");
    Ok((best_model, best_epoch, history))
}

/// Closed-set accuracy by thresholdless argmax over the heads.
pub fn closed_set_accuracy(model: &ConvOwcModel, data: &[(Vec<f64>, Label)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (x, y) in data {
        let probs = model.class_probabilities(x)?;
        let best = argmax(&probs);
        if model.class_list[best] == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in v.iter().enumerate().skip(1) {
        if *p > v[best] {
            best = i;
        }
    }
    best
}

/// One-sided confidence lower bound on a class's mean training probability.
pub fn threshold_from_probs(probs: &[f64], alpha: f64) -> Result<(f64, f64, f64)> {
    let n = probs.len();
    if n < 2 {
        return Err(Error::Training(format!(
            "threshold needs >= 2 instances, got {}",
            n
        )));
    }
    let mean = probs.iter().sum::<f64>() / n as f64;
    let var = probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = student_t_quantile(alpha, n - 1)?;
    let bound = mean - t * std / (n as f64).sqrt();
    Ok((bound.clamp(EPS_PROB, 1.0), mean, std))
}

/// Per-class thresholds over class-grouped instance sets. `class_data` must
/// cover the model's class list exactly.
pub fn compute_thresholds(
    model: &ConvOwcModel,
    class_data: &[(Label, Vec<Vec<f64>>)],
    alpha: f64,
) -> Result<ThresholdTable> {
    let mut entries = Vec::with_capacity(model.class_list.len());
    for (ci, &label) in model.class_list.iter().enumerate() {
        let (_, instances) = class_data
            .iter()
            .find(|(l, _)| *l == label)
            .ok_or_else(|| Error::Usage(format!("no data for class {}", label)))?;
        let mut probs = Vec::with_capacity(instances.len());
        for x in instances {
            let e = model.embed(x)?;
            probs.push(sigmoid(logit(&model.heads[ci], &e)));
        }
        let (threshold, mean, std) = threshold_from_probs(&probs, alpha)?;
        entries.push(ThresholdEntry {
            label,
            threshold,
            mean_prob: mean,
            sample_std: std,
            count: probs.len(),
        });
    }
    Ok(ThresholdTable { entries })
}

/// Open-world prediction: reject when every class probability falls below
/// its threshold, otherwise argmax over all classes (ties to the lowest
/// class index).
pub fn predict(
    model: &ConvOwcModel,
    thresholds: &ThresholdTable,
    x: &[f64],
) -> Result<PredictionOutcome> {
    let probs = model.class_probabilities(x)?;
    Ok(decide(model, thresholds, probs))
}

/// The decision rule applied to precomputed probabilities.
pub fn decide(
    model: &ConvOwcModel,
    thresholds: &ThresholdTable,
    probs: Vec<f64>,
) -> PredictionOutcome {
    debug_assert_eq!(probs.len(), thresholds.entries.len());
    let all_below = probs
        .iter()
        .zip(&thresholds.entries)
        .all(|(p, e)| *p < e.threshold);
    let best = argmax(&probs);
    let confidence = probs[best];
    let estimated_label = if all_below {
        REJECT
    } else {
        model.class_list[best]
    };
    PredictionOutcome {
        estimated_label,
        confidence,
        per_class_probs: probs,
    }
}
