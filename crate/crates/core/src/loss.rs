//! Supervised segmentation loss: pixelwise cross-entropy plus soft Dice,
//! equally weighted, with the analytic gradient w.r.t. the logits.

use fedroute_nn::layer::{softmax_channel_backward, softmax_channel_forward};
use fedroute_nn::Tensor4D;

use crate::error::{Result, SimError};

const DICE_EPS: f64 = 1e-6;

/// Returns `(loss, d loss / d logits)` for integer labels `mask` (row-major,
/// batch-major, `values < classes`).
pub fn seg_loss_and_grad(logits: &Tensor4D, mask: &[u8]) -> Result<(f64, Tensor4D)> {
    let [n, c, h, w] = logits.shape();
    let positions = n * h * w;
    if mask.len() != positions {
        return Err(SimError::InvalidInput(format!(
            "mask length {} does not match logits {:?}",
            mask.len(),
            logits.shape()
        )));
    }
    let probs = softmax_channel_forward(logits);
    let hw = h * w;
    let m = positions as f64;

    // cross-entropy: -(1/m) sum log p[label]; gradient directly in logit space
    let mut ce = 0.0;
    let mut grad = Tensor4D::zeros([n, c, h, w]);
    for b in 0..n {
        for i in 0..hw {
            let label = mask[b * hw + i] as usize;
            let p = probs.plane(b, label)[i].max(1e-300);
            ce -= p.ln();
            for ch in 0..c {
                let idx = grad.idx(b, ch, 0, 0) + i;
                let onehot = (ch == label) as usize as f64;
                grad.data_mut()[idx] = (probs.plane(b, ch)[i] - onehot) / m;
            }
        }
    }
    ce /= m;

    // soft Dice aggregated over the batch, averaged over classes
    let mut dice_sum = 0.0;
    let mut gprob = Tensor4D::zeros([n, c, h, w]);
    for ch in 0..c {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for b in 0..n {
            let pp = probs.plane(b, ch);
            for i in 0..hw {
                let g = (mask[b * hw + i] as usize == ch) as usize as f64;
                inter += pp[i] * g;
                psum += pp[i];
                gsum += g;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + gsum + DICE_EPS;
        dice_sum += num / den;
        // d(num/den)/dp_i = (2 g_i den - num) / den^2 ; loss contributes -1/C of it
        let scale = -1.0 / c as f64;
        for b in 0..n {
            let start = gprob.idx(b, ch, 0, 0);
            for i in 0..hw {
                let g = (mask[b * hw + i] as usize == ch) as usize as f64;
                gprob.data_mut()[start + i] = scale * (2.0 * g * den - num) / (den * den);
            }
        }
    }
    let dice_loss = 1.0 - dice_sum / c as f64;

    // chain the Dice part through the softmax and add the CE part
    let dice_grad = softmax_channel_backward(&probs, &gprob);
    for (g, d) in grad.data_mut().iter_mut().zip(dice_grad.data()) {
        *g += d;
    }

    let loss = ce + dice_loss;
    if !loss.is_finite() {
        return Err(SimError::NonFinite("supervised loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedroute_nn::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn perfect_prediction_loss_is_small() {
        // strongly correct logits: loss near 0
        let mut logits = Tensor4D::zeros([1, 2, 2, 2]);
        let mask = vec![0u8, 1, 1, 0];
        for (i, &label) in mask.iter().enumerate() {
            let idx = logits.idx(0, label as usize, i / 2, i % 2);
            logits.data_mut()[idx] = 20.0;
        }
        let (loss, _) = seg_loss_and_grad(&logits, &mask).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = derive_rng(3, "test", &[]);
        let shape = [2, 3, 2, 2];
        let data: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let logits = Tensor4D::from_vec(shape, data).unwrap();
        let mask: Vec<u8> = (0..8).map(|_| rng.gen_range(0u8..3)).collect();
        let (_, grad) = seg_loss_and_grad(&logits, &mask).unwrap();
        let h = 1e-6;
        for slot in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[slot] += h;
            let mut minus = logits.clone();
            minus.data_mut()[slot] -= h;
            let fd = (seg_loss_and_grad(&plus, &mask).unwrap().0
                - seg_loss_and_grad(&minus, &mask).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[slot];
            let scale = a.abs().max(fd.abs()).max(1e-8);
            assert!((a - fd).abs() / scale < 1e-5, "slot {slot}: {a} vs {fd}");
        }
    }

    #[test]
    fn mask_length_mismatch_errors() {
        let logits = Tensor4D::zeros([1, 2, 2, 2]);
        assert!(seg_loss_and_grad(&logits, &[0u8; 3]).is_err());
    }
}
