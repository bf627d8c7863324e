//! Dice scoring and model evaluation helpers.

use serde::{Deserialize, Serialize};

use fedroute_nn::layer::softmax_channel_forward;
use fedroute_nn::{ModelWeights, Tensor4D};

use crate::data::{pack_batch, SegmentationSample};
use crate::error::{Result, SimError};

/// Evaluation chunk size; eval-mode BN makes results batch-size independent.
pub const EVAL_CHUNK: usize = 16;

/// Dice overlap `2|P∩G| / (|P|+|G|)` for one class; 1.0 when both empty.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut p = 0usize;
    let mut g = 0usize;
    let mut inter = 0usize;
    for (a, b) in pred.iter().zip(gt) {
        let pa = *a == class;
        let gb = *b == class;
        p += pa as usize;
        g += gb as usize;
        inter += (pa && gb) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_mask(scores: &Tensor4D) -> Vec<Vec<u8>> {
    let [n, c, h, w] = scores.shape();
    let hw = h * w;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut mask = vec![0u8; hw];
        for i in 0..hw {
            let mut best_c = 0u8;
            let mut best = scores.plane(b, 0)[i];
            for ch in 1..c {
                let v = scores.plane(b, ch)[i];
                if v > best {
                    best = v;
                    best_c = ch as u8;
                }
            }
            mask[i] = best_c;
        }
        out.push(mask);
    }
    out
}

/// Per-foreground-class Dice scores of one model over a sample set
/// (per-sample Dice averaged over samples), plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    /// One entry per foreground class (class indices `1..classes`).
    pub per_class: Vec<f64>,
    pub mean: f64,
}

impl DiceScore {
    pub fn from_masks(preds: &[Vec<u8>], samples: &[SegmentationSample], classes: usize) -> Self {
        let fg = classes - 1;
        let mut per_class = vec![0.0; fg];
        for (pred, sample) in preds.iter().zip(samples) {
            for class in 1..classes {
                per_class[class - 1] += dice(pred, &sample.mask, class as u8);
            }
        }
        let n = preds.len().max(1) as f64;
        for v in per_class.iter_mut() {
            *v /= n;
        }
        let mean = per_class.iter().sum::<f64>() / fg as f64;
        DiceScore { per_class, mean }
    }
}

/// Eval-mode predictions of a model over a sample set, chunked.
pub fn predict(model: &ModelWeights, samples: &[SegmentationSample]) -> Result<Vec<Vec<u8>>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (x, _) = pack_batch(&refs);
        let (logits, _) = model.forward_eval(&x)?;
        preds.extend(argmax_mask(&logits));
    }
    Ok(preds)
}

/// Dice of one model on a sample set.
pub fn evaluate_model(
    model: &ModelWeights,
    samples: &[SegmentationSample],
    classes: usize,
) -> Result<DiceScore> {
    if samples.is_empty() {
        return Err(SimError::InvalidInput("evaluation on empty sample set".into()));
    }
    let preds = predict(model, samples)?;
    Ok(DiceScore::from_masks(&preds, samples, classes))
}

/// "Average" baseline: mean over members of each member's own Dice.
pub fn baseline_average(
    members: &[&ModelWeights],
    samples: &[SegmentationSample],
    classes: usize,
) -> Result<DiceScore> {
    if members.is_empty() {
        return Err(SimError::InvalidInput("average baseline over zero members".into()));
    }
    let scores: Vec<DiceScore> = members
        .iter()
        .map(|m| evaluate_model(m, samples, classes))
        .collect::<Result<_>>()?;
    let fg = classes - 1;
    let mut per_class = vec![0.0; fg];
    for s in &scores {
        for (acc, v) in per_class.iter_mut().zip(&s.per_class) {
            *acc += v;
        }
    }
    for v in per_class.iter_mut() {
        *v /= members.len() as f64;
    }
    let mean = per_class.iter().sum::<f64>() / fg as f64;
    Ok(DiceScore { per_class, mean })
}

/// "Ensemble" baseline predictions: per-pixel mean of member logits, then
/// softmax and argmax.
pub fn ensemble_predict(
    members: &[&ModelWeights],
    samples: &[SegmentationSample],
) -> Result<Vec<Vec<u8>>> {
    if members.is_empty() {
        return Err(SimError::InvalidInput("ensemble of zero members".into()));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (x, _) = pack_batch(&refs);
        let mut acc: Option<Tensor4D> = None;
        for m in members {
            let (logits, _) = m.forward_eval(&x)?;
            match &mut acc {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(logits.data()) {
                        *a += b;
                    }
                }
                None => acc = Some(logits),
            }
        }
        let mut mean = acc.expect("non-empty members");
        let k = members.len() as f64;
        for v in mean.data_mut() {
            *v /= k;
        }
        let probs = softmax_channel_forward(&mean);
        preds.extend(argmax_mask(&probs));
    }
    Ok(preds)
}

pub fn baseline_ensemble(
    members: &[&ModelWeights],
    samples: &[SegmentationSample],
    classes: usize,
) -> Result<DiceScore> {
    let preds = ensemble_predict(members, samples)?;
    Ok(DiceScore::from_masks(&preds, samples, classes))
}
