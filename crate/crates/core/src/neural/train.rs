//! SGD training loops for the verifiers and the toy detector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detector::ToyDetector;
use super::loss::{bce_with_logits_mean, focal_loss, FocalParams};
use super::verifier::VerifierNet;
use super::{sgd_step, Mode, NeuralError, Tensor};
use crate::dataset::{derive_seed, seed_tags, LaneCorpus, Split};
use crate::geometry::LaneLabel;
use crate::img::{BitMap, SceneImage};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate multiplier applied from two thirds of the way through
    /// training onward.
    pub lr_decay_factor: f64,
    /// Fraction of fake examples in each batch replaced by adversarially
    /// perturbed copies.
    pub adv_fraction: f64,
    pub adv_eps: f64,
    pub adv_steps: usize,
    pub focal: FocalParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            adv_fraction: 0.5,
            adv_eps: 8.0 / 255.0,
            adv_steps: 10,
            focal: FocalParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_balanced_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_val_balanced_acc: f64,
    pub epochs: Vec<EpochStats>,
}

fn gather_batch(corpus: &LaneCorpus, idxs: &[usize]) -> (Tensor, Vec<LaneLabel>) {
    let (h, w) = (corpus.images[idxs[0]].h(), corpus.images[idxs[0]].w());
    let mut data = Vec::with_capacity(idxs.len() * h * w);
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        data.extend_from_slice(corpus.images[i].as_slice());
        labels.push(corpus.labels[i]);
    }
    (
        Tensor::from_vec(&[idxs.len(), 1, h, w], data).expect("corpus images share one shape"),
        labels,
    )
}

/// In-place PGD on a batch of fake lane images, ascending the focal loss of
/// the current model. Uses Eval-mode statistics, a random start inside the
/// epsilon ball, and a fixed number of sign steps of size eps / 4.
fn perturb_fakes<V: VerifierNet>(
    model: &V,
    x: &mut Tensor,
    rows: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), NeuralError> {
    if rows.is_empty() || cfg.adv_steps == 0 || cfg.adv_eps <= 0.0 {
        return Ok(());
    }
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let mut clean = Vec::with_capacity(rows.len() * plane);
    for &r in rows {
        clean.extend_from_slice(&x.data()[r * plane..(r + 1) * plane]);
    }
    let clean = Tensor::from_vec(&[rows.len(), 1, h, w], clean)?;

    let mut adv = clean.clone();
    for (a, c) in adv.data_mut().iter_mut().zip(clean.data()) {
        *a = (c + rng.gen_range(-cfg.adv_eps..=cfg.adv_eps)).clamp(0.0, 1.0);
    }
    let step = cfg.adv_eps / 4.0;
    for _ in 0..cfg.adv_steps {
        let (logits, cache) = model.forward(&adv, Mode::Eval)?;
        let dlogits: Vec<f64> = logits
            .iter()
            .map(|&z| focal_loss(z, true, &cfg.focal).1)
            .collect();
        let (_, dx) = model.backward(&cache, &dlogits);
        for ((a, g), c) in adv.data_mut().iter_mut().zip(dx.data()).zip(clean.data()) {
            // Ascend the loss, then project to the ball and the unit box.
            let sign = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = (*a + step * sign)
                .clamp(c - cfg.adv_eps, c + cfg.adv_eps)
                .clamp(0.0, 1.0);
        }
    }
    for (bi, &r) in rows.iter().enumerate() {
        let src = &adv.data()[bi * plane..(bi + 1) * plane];
        x.data_mut()[r * plane..(r + 1) * plane].copy_from_slice(src);
    }
    Ok(())
}

fn balanced_accuracy<V: VerifierNet>(
    model: &V,
    corpus: &LaneCorpus,
    idxs: &[usize],
    batch: usize,
) -> Result<f64, NeuralError> {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for chunk in idxs.chunks(batch.max(1)) {
        let (x, labels) = gather_batch(corpus, chunk);
        let (logits, _) = model.forward(&x, Mode::Eval)?;
        for (&z, &l) in logits.iter().zip(&labels) {
            let cls = usize::from(l == LaneLabel::Fake);
            counts[cls] += 1;
            let predicted_fake = z > 0.0;
            if predicted_fake == (cls == 1) {
                hits[cls] += 1;
            }
        }
    }
    let mut acc = 0.0;
    let mut present = 0.0;
    for c in 0..2 {
        if counts[c] > 0 {
            acc += hits[c] as f64 / counts[c] as f64;
            present += 1.0;
        }
    }
    Ok(if present == 0.0 { 0.0 } else { acc / present })
}

/// Trains a verifier with SGD + momentum, optional adversarial examples on
/// the fake class, and snapshots of the best validation balanced accuracy.
///
/// Returns the best snapshot, not the final iterate.
pub fn train_verifier<V: VerifierNet>(
    mut model: V,
    corpus: &LaneCorpus,
    cfg: &TrainConfig,
) -> Result<(V, TrainReport), NeuralError> {
    let mut train_idx = corpus.indices(Split::Train, None);
    if corpus.indices(Split::Train, Some(LaneLabel::Real)).is_empty() {
        return Err(NeuralError::EmptyClass("real".into()));
    }
    if corpus.indices(Split::Train, Some(LaneLabel::Fake)).is_empty() {
        return Err(NeuralError::EmptyClass("fake".into()));
    }
    let val_idx = {
        let v = corpus.indices(Split::Val, None);
        if v.is_empty() {
            train_idx.clone()
        } else {
            v
        }
    };

    let mut velocity: Vec<Tensor> = model
        .trainable_mut()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let decay_epoch = (cfg.epochs * 2) / 3;

    let mut best = model.clone();
    let mut best_acc = -1.0;
    let mut best_epoch = 0;
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = if decay_epoch > 0 && epoch >= decay_epoch {
            cfg.lr * cfg.lr_decay_factor
        } else {
            cfg.lr
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, seed_tags::TRAIN, epoch as u64]));
        train_idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (mut x, labels) = gather_batch(corpus, chunk);
            let fake_rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == LaneLabel::Fake)
                .map(|(i, _)| i)
                .collect();
            let k = (fake_rows.len() as f64 * cfg.adv_fraction).round() as usize;
            perturb_fakes(&model, &mut x, &fake_rows[..k.min(fake_rows.len())], cfg, &mut rng)?;

            let (logits, cache) = model.forward(&x, Mode::Train)?;
            let n = logits.len() as f64;
            let mut dlogits = Vec::with_capacity(logits.len());
            for (&z, &l) in logits.iter().zip(&labels) {
                let (loss, grad) = focal_loss(z, l == LaneLabel::Fake, &cfg.focal);
                if !loss.is_finite() {
                    return Err(NeuralError::NonFinite("focal loss".into()));
                }
                loss_sum += loss;
                dlogits.push(grad / n);
            }
            seen += logits.len();
            let (grads, _) = model.backward(&cache, &dlogits);
            sgd_step(&mut model.trainable_mut(), &grads, &mut velocity, lr, cfg.momentum);
            model.commit_batchnorm(&cache);
        }

        let val_acc = balanced_accuracy(&model, corpus, &val_idx, cfg.batch_size)?;
        if val_acc > best_acc {
            best_acc = val_acc;
            best = model.clone();
            best_epoch = epoch;
        }
        stats.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_balanced_acc: val_acc,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.4} train loss {:.5} val balanced acc {val_acc:.4}",
            loss_sum / seen.max(1) as f64
        );
    }

    Ok((
        best,
        TrainReport {
            best_epoch,
            best_val_balanced_acc: best_acc,
            epochs: stats,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    /// Number of SGD batches.
    pub steps: usize,
    /// Random crops per batch.
    pub batch: usize,
    /// Square crop side in pixels.
    pub crop: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 300,
            batch: 8,
            crop: 128,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    pub losses: Vec<f64>,
}

/// Trains the toy detector on random square crops with plain binary
/// cross-entropy against the ground truth segmentation.
pub fn train_detector(
    scenes: &[(SceneImage, BitMap)],
    cfg: &DetectorTrainConfig,
) -> Result<(ToyDetector, DetectorTrainReport), NeuralError> {
    if scenes.is_empty() {
        return Err(NeuralError::EmptyClass("scene".into()));
    }
    let (h, w) = (scenes[0].0.h(), scenes[0].0.w());
    if cfg.crop == 0 || cfg.crop > h || cfg.crop > w {
        return Err(NeuralError::ShapeMismatch {
            context: "detector crop".into(),
            expected: vec![h, w],
            got: vec![cfg.crop, cfg.crop],
        });
    }

    let mut model = ToyDetector::seeded(cfg.seed);
    let mut velocity: Vec<Tensor> = model
        .trainable_mut()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, seed_tags::TRAIN]));
    let c = cfg.crop;
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut xdata = Vec::with_capacity(cfg.batch * 3 * c * c);
        let mut target = Vec::with_capacity(cfg.batch * c * c);
        for _ in 0..cfg.batch {
            let (img, seg) = &scenes[rng.gen_range(0..scenes.len())];
            let oy = rng.gen_range(0..=h - c);
            let ox = rng.gen_range(0..=w - c);
            for ch in 0..3 {
                let plane = img.channel(ch);
                for y in 0..c {
                    xdata.extend_from_slice(&plane.row(oy + y)[ox..ox + c]);
                }
            }
            for y in 0..c {
                for x in 0..c {
                    target.push(if seg.get(oy + y, ox + x) { 1.0 } else { 0.0 });
                }
            }
        }
        let x = Tensor::from_vec(&[cfg.batch, 3, c, c], xdata)?;
        let (logits, cache) = model.forward(&x)?;
        let (loss, grad) = bce_with_logits_mean(logits.data(), &target);
        if !loss.is_finite() {
            return Err(NeuralError::NonFinite("detector loss".into()));
        }
        losses.push(loss);
        let g = Tensor::from_vec(logits.shape(), grad)?;
        let (grads, _) = model.backward(&cache, &g)?;
        sgd_step(&mut model.trainable_mut(), &grads, &mut velocity, cfg.lr, cfg.momentum);
    }

    Ok((model, DetectorTrainReport { losses }))
}
