//! Classification and box-regression losses, plus the per-branch loss term
//! the tape differentiates during training.

use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before taking
/// logs; below f32 resolution near 0/1 so it never distorts healthy training.
pub const PROB_CLAMP: f64 = 1e-7;

/// Negative log-likelihood of the label under the face probability.
pub fn cls_loss<E: Element>(prob_face: E, label: u8) -> E {
    let lo = E::from_f64(PROB_CLAMP);
    let hi = E::from_f64(1.0 - PROB_CLAMP);
    let p = prob_face.maximum(lo).minimum(hi);
    if label == 1 {
        -p.ln()
    } else {
        -(E::ONE - p).ln()
    }
}

/// d cls_loss / d prob_face. Zero outside the clamp range.
pub fn cls_loss_grad<E: Element>(prob_face: E, label: u8) -> E {
    let lo = E::from_f64(PROB_CLAMP);
    let hi = E::from_f64(1.0 - PROB_CLAMP);
    if prob_face < lo || prob_face > hi {
        return E::ZERO;
    }
    if label == 1 {
        -E::ONE / prob_face
    } else {
        E::ONE / (E::ONE - prob_face)
    }
}

/// Robust L1: x^2/2 inside |x| < 1, |x| - 0.5 outside.
pub fn smooth_l1<E: Element>(x: E) -> E {
    let ax = x.abs();
    if ax < E::ONE {
        x * x / E::from_f64(2.0)
    } else {
        ax - E::from_f64(0.5)
    }
}

/// Derivative of [`smooth_l1`]: x inside the quadratic zone, sign(x) outside.
pub fn smooth_l1_grad<E: Element>(x: E) -> E {
    let ax = x.abs();
    if ax < E::ONE {
        x
    } else if x > E::ZERO {
        E::ONE
    } else {
        -E::ONE
    }
}

/// Sum of smooth-L1 over the four components of (target - pred).
pub fn reg_loss<E: Element>(pred: [E; 4], target: [E; 4]) -> E {
    let mut s = E::ZERO;
    for j in 0..4 {
        s += smooth_l1(target[j] - pred[j]);
    }
    s
}

/// A positive anchor selected for the mini-batch, with its encoded target.
#[derive(Clone, Debug)]
pub struct PosSample<E: Element> {
    pub anchor: usize,
    pub target: [E; 4],
}

/// The anchors one branch contributes to an iteration's mini-batch.
#[derive(Clone, Debug)]
pub struct BranchSamples<E: Element> {
    pub pos: Vec<PosSample<E>>,
    pub neg: Vec<usize>,
    /// Anchor slots per feature-map cell (|sizes| * |ratios|).
    pub slots: usize,
}

impl<E: Element> BranchSamples<E> {
    pub fn count(&self) -> usize {
        self.pos.len() + self.neg.len()
    }
}

/// Flat index of anchor `a` resolved against the branch map layout.
#[inline]
fn anchor_cell(a: usize, slots: usize, map_w: usize) -> (usize, usize, usize) {
    let slot = a % slots;
    let cell = a / slots;
    (slot, cell / map_w, cell % map_w)
}

/// Classification and (lambda-unweighted) regression components of one
/// branch's loss term, each already divided by the branch sample count N.
#[derive(Clone, Copy, Debug, Default)]
pub struct BranchLossValue<E: Element> {
    pub cls: E,
    pub reg: E,
}

/// Forward value of the branch loss over the sampled anchors:
/// (sum_i cls_i + lambda * sum_pos reg_i) / N.
pub fn branch_loss_forward<E: Element>(
    probs: &Tensor<E>,
    reg: &Tensor<E>,
    samples: &BranchSamples<E>,
    lambda: E,
) -> (E, BranchLossValue<E>) {
    let n = samples.count();
    if n == 0 {
        return (E::ZERO, BranchLossValue::default());
    }
    let map_w = probs.w();
    let mut cls_sum = E::ZERO;
    let mut reg_sum = E::ZERO;
    for s in &samples.pos {
        let (slot, gy, gx) = anchor_cell(s.anchor, samples.slots, map_w);
        cls_sum += cls_loss(probs.at(0, 2 * slot + 1, gy, gx), 1);
        let pred = [
            reg.at(0, 4 * slot, gy, gx),
            reg.at(0, 4 * slot + 1, gy, gx),
            reg.at(0, 4 * slot + 2, gy, gx),
            reg.at(0, 4 * slot + 3, gy, gx),
        ];
        reg_sum += reg_loss(pred, s.target);
    }
    for &a in &samples.neg {
        let (slot, gy, gx) = anchor_cell(a, samples.slots, map_w);
        cls_sum += cls_loss(probs.at(0, 2 * slot + 1, gy, gx), 0);
    }
    let inv_n = E::ONE / E::from_f64(n as f64);
    let value = BranchLossValue {
        cls: cls_sum * inv_n,
        reg: reg_sum * inv_n,
    };
    (value.cls + lambda * value.reg, value)
}

/// Adjoint of [`branch_loss_forward`] w.r.t. the probability and regression
/// maps. Gradients land only on sampled anchors; negative anchors get no
/// regression gradient at all.
pub fn branch_loss_backward<E: Element>(
    probs: &Tensor<E>,
    reg: &Tensor<E>,
    samples: &BranchSamples<E>,
    lambda: E,
    seed: E,
) -> (Tensor<E>, Tensor<E>) {
    let mut g_probs = Tensor::zeros(probs.shape());
    let mut g_reg = Tensor::zeros(reg.shape());
    let n = samples.count();
    if n == 0 {
        return (g_probs, g_reg);
    }
    let map_w = probs.w();
    let scale = seed / E::from_f64(n as f64);
    for s in &samples.pos {
        let (slot, gy, gx) = anchor_cell(s.anchor, samples.slots, map_w);
        let pi = probs.idx(0, 2 * slot + 1, gy, gx);
        g_probs.data_mut()[pi] += scale * cls_loss_grad(probs.data()[pi], 1);
        for j in 0..4 {
            let ri = reg.idx(0, 4 * slot + j, gy, gx);
            let x = s.target[j] - reg.data()[ri];
            g_reg.data_mut()[ri] += scale * lambda * -smooth_l1_grad(x);
        }
    }
    for &a in &samples.neg {
        let (slot, gy, gx) = anchor_cell(a, samples.slots, map_w);
        let pi = probs.idx(0, 2 * slot + 1, gy, gx);
        g_probs.data_mut()[pi] += scale * cls_loss_grad(probs.data()[pi], 0);
    }
    (g_probs, g_reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cls_loss_reference_points() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cls_loss(0.5f64, 1) - ln2).abs() < 1e-12);
        assert!((cls_loss(0.5f64, 0) - ln2).abs() < 1e-12);
        assert!((cls_loss(0.25f64, 1) - 4.0f64.ln()).abs() < 1e-12);
        // Perfect prediction tends to zero.
        assert!(cls_loss(1.0 - 1e-9f64, 1) < 1e-6);
        // Clamp keeps the value finite at the extremes.
        assert!(cls_loss(0.0f64, 1).is_finite());
        assert!(cls_loss(1.0f64, 0).is_finite());
    }

    #[test]
    fn smooth_l1_piecewise() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert!((smooth_l1(0.5f64) - 0.125).abs() < 1e-12);
        assert!((smooth_l1(2.0f64) - 1.5).abs() < 1e-12);
        assert!((smooth_l1(-2.0f64) - 1.5).abs() < 1e-12);
        assert_eq!(reg_loss([1.0f64, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]), 0.0);
    }

    #[test]
    fn branch_loss_single_positive() {
        // One positive sample, lambda = 2: loss = (ln 2 + 2 * 0.125) / 1.
        let probs = Tensor::new([1, 2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        // Prediction offset by 0.5 in the first component only.
        let reg = Tensor::new([1, 4, 1, 1], vec![0.5f64, 0.0, 0.0, 0.0]).unwrap();
        let samples = BranchSamples {
            pos: vec![PosSample {
                anchor: 0,
                target: [0.0, 0.0, 0.0, 0.0],
            }],
            neg: vec![],
            slots: 1,
        };
        let (total, value) = branch_loss_forward(&probs, &reg, &samples, 2.0);
        let expect = std::f64::consts::LN_2 + 2.0 * 0.125;
        assert!((total - expect).abs() < 1e-12);
        assert!((value.cls - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((value.reg - 0.125).abs() < 1e-12);
    }

    #[test]
    fn negatives_have_no_reg_gradient() {
        let probs = Tensor::new([1, 2, 1, 2], vec![0.3f64, 0.7, 0.6, 0.4]).unwrap();
        let reg = Tensor::new([1, 4, 1, 2], vec![0.1f64; 8]).unwrap();
        let samples = BranchSamples {
            pos: vec![],
            neg: vec![0, 1],
            slots: 1,
        };
        let (_, g_reg) = branch_loss_backward(&probs, &reg, &samples, 2.0, 1.0);
        assert!(g_reg.data().iter().all(|&v| v == 0.0));
    }
}
