//! Unsupervised test-time losses over predicted probability maps.
//!
//! All three reduce by mean over batch and spatial positions (per-class
//! terms are summed within a position), which decouples the balancing
//! weight from image size.

use fedroute_nn::Tensor4D;

const LOG_CLAMP: f64 = 1e-12;

/// Mean over positions of the squared L2 distance between per-pixel class
/// probability vectors.
pub fn consistency_loss(a: &Tensor4D, b: &Tensor4D) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let [n, _, h, w] = a.shape();
    let m = (n * h * w) as f64;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    sq / m
}

/// Consistency loss plus its gradients w.r.t. both probability maps.
pub fn consistency_loss_grad(a: &Tensor4D, b: &Tensor4D) -> (f64, Tensor4D, Tensor4D) {
    let [n, _, h, w] = a.shape();
    let m = (n * h * w) as f64;
    let mut ga = Tensor4D::zeros(a.shape());
    let mut gb = Tensor4D::zeros(b.shape());
    let mut loss = 0.0;
    for ((x, y), (da, db)) in a
        .data()
        .iter()
        .zip(b.data())
        .zip(ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()))
    {
        let d = x - y;
        loss += d * d;
        *da = 2.0 * d / m;
        *db = -2.0 * d / m;
    }
    (loss / m, ga, gb)
}

/// Mean over positions of per-pixel Shannon entropy (natural log, clamped
/// at 1e-12).
pub fn entropy_loss(probs: &Tensor4D) -> f64 {
    let [n, _, h, w] = probs.shape();
    let m = (n * h * w) as f64;
    let s: f64 = probs
        .data()
        .iter()
        .map(|&v| -v * v.max(LOG_CLAMP).ln())
        .sum();
    s / m
}

pub fn entropy_loss_grad(probs: &Tensor4D) -> (f64, Tensor4D) {
    let [n, _, h, w] = probs.shape();
    let m = (n * h * w) as f64;
    let mut g = Tensor4D::zeros(probs.shape());
    let mut loss = 0.0;
    for (&v, gv) in probs.data().iter().zip(g.data_mut()) {
        if v > LOG_CLAMP {
            loss -= v * v.ln();
            *gv = -(v.ln() + 1.0) / m;
        } else {
            loss -= v * LOG_CLAMP.ln();
            *gv = -LOG_CLAMP.ln() / m;
        }
    }
    (loss / m, g)
}

#[inline]
fn window(center: usize, d: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(d), (center + d + 1).min(len))
}

/// Shape-smoothness loss: for each position, the summed per-class spread
/// (windowed max minus min) over the `(2d+1)^2` neighborhood clamped at the
/// borders; reduced by mean over positions.
pub fn shape_loss(probs: &Tensor4D, d: usize) -> f64 {
    shape_loss_impl(probs, d, None)
}

pub fn shape_loss_grad(probs: &Tensor4D, d: usize) -> (f64, Tensor4D) {
    let mut grad = Tensor4D::zeros(probs.shape());
    let loss = shape_loss_impl(probs, d, Some(&mut grad));
    (loss, grad)
}

fn shape_loss_impl(probs: &Tensor4D, d: usize, mut grad: Option<&mut Tensor4D>) -> f64 {
    assert!(d >= 1, "neighbor range radius must be >= 1");
    let [n, c, h, w] = probs.shape();
    let m = (n * h * w) as f64;
    let mut total = 0.0;
    for b in 0..n {
        for ch in 0..c {
            let plane = probs.plane(b, ch);
            for p in 0..h {
                let (y0, y1) = window(p, d, h);
                for q in 0..w {
                    let (x0, x1) = window(q, d, w);
                    // first occurrence wins on ties, scan order row-major
                    let mut max_v = f64::NEG_INFINITY;
                    let mut min_v = f64::INFINITY;
                    let mut max_i = 0;
                    let mut min_i = 0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = plane[y * w + x];
                            if v > max_v {
                                max_v = v;
                                max_i = y * w + x;
                            }
                            if v < min_v {
                                min_v = v;
                                min_i = y * w + x;
                            }
                        }
                    }
                    total += max_v - min_v;
                    if let Some(g) = grad.as_deref_mut() {
                        let base = g.idx(b, ch, 0, 0);
                        g.data_mut()[base + max_i] += 1.0 / m;
                        g.data_mut()[base + min_i] -= 1.0 / m;
                    }
                }
            }
        }
    }
    total / m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_zero_on_identical() {
        let a = Tensor4D::from_vec([1, 2, 1, 2], vec![0.2, 0.8, 0.5, 0.5]).unwrap();
        assert_eq!(consistency_loss(&a, &a), 0.0);
    }

    #[test]
    fn consistency_hand_case() {
        // 1x1 image, C=2, z=(1,0), z'=(0,1) -> 2.0
        let a = Tensor4D::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let b = Tensor4D::from_vec([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(consistency_loss(&a, &b), 2.0);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let p = Tensor4D::from_vec([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(entropy_loss(&p).abs() < 1e-12);
    }

    #[test]
    fn entropy_uniform_binary_is_ln2() {
        let p = Tensor4D::from_vec([1, 2, 2, 2], vec![0.5; 8]).unwrap();
        assert!((entropy_loss(&p) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_loss_zero_on_constant_map() {
        let p = Tensor4D::from_vec([1, 2, 4, 4], vec![0.3; 32]).unwrap();
        assert_eq!(shape_loss(&p, 2), 0.0);
    }

    #[test]
    fn shape_loss_1d_toy() {
        // V = [0, 1, 0], d=1: window extrema give d = [1, 1, 1], mean 1.0
        let p = Tensor4D::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(shape_loss(&p, 1), 1.0);
    }

    #[test]
    fn losses_are_nonnegative() {
        let a = Tensor4D::from_vec([1, 2, 2, 2], vec![0.9, 0.1, 0.3, 0.7, 0.1, 0.9, 0.7, 0.3]).unwrap();
        let b = Tensor4D::from_vec([1, 2, 2, 2], vec![0.2, 0.8, 0.5, 0.5, 0.8, 0.2, 0.5, 0.5]).unwrap();
        assert!(consistency_loss(&a, &b) >= 0.0);
        assert!(entropy_loss(&a) >= 0.0);
        assert!(shape_loss(&a, 1) >= 0.0);
    }
}
