//! Central finite-difference verification of every analytic adjoint, run in
//! f64. Each check reduces an operation's output to a scalar through a fixed
//! random projection, compares the tape gradient against (f(x+e) - f(x-e)) /
//! 2e per element, and reports the worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{generate_anchors, match_anchors, BBox};
use crate::loss::{cls_loss, BranchSamples, PosSample};
use crate::model::{
    build_model, forward_on_tape, stage_params, BackboneConfig, BranchConfig, ModelConfig,
    ModelParams, PassStats, SourceLayer,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-4;
/// Per-operation adjoint tolerance.
pub const OP_TOL: f64 = 1e-5;
/// Whole-loss (network end-to-end) tolerance.
pub const END_TO_END_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-3);
    (analytic - fd).abs() / denom
}

/// Compares analytic gradients against central differences for a scalar
/// function of several tensors. `grads[i]` may be empty when input `i` is not
/// differentiated (treated as all-zero).
fn fd_max_rel_err(
    inputs: &[Tensor<f64>],
    grads: &[Vec<f64>],
    eval: &dyn Fn(&[Tensor<f64>]) -> f64,
) -> f64 {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + FD_EPS;
            let fp = eval(&work);
            work[ti].data_mut()[ei] = orig - FD_EPS;
            let fm = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * FD_EPS);
            let analytic = grads[ti].get(ei).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(analytic, fd));
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values pushed at least `margin` away from zero, so FD never straddles the
/// ReLU kink.
fn away_from_zero(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
    t
}

/// A shuffled lattice: distinct values with gaps far above the FD step, so
/// max-pool argmax choices are stable under perturbation.
fn lattice(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.05).collect();
    for i in (1..len).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

fn coeffs(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn check_conv2d(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c_in = rng.gen_range(1..=2);
        let c_out = rng.gen_range(1..=2);
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..=2);
        let dilation = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let h = rng.gen_range((dilation * (k - 1) + 1).max(3)..=6);
        let w = rng.gen_range((dilation * (k - 1) + 1).max(3)..=6);

        let input = uniform(rng, [1, c_in, h, w], -1.0, 1.0);
        let weight = uniform(rng, [c_out, c_in, k, k], -1.0, 1.0);
        let bias = uniform(rng, [1, c_out, 1, 1], -0.5, 0.5);
        let out_len = {
            let t = crate::tensor::conv2d(&input, &weight, bias.data(), stride, pad, dilation)
                .unwrap();
            t.len()
        };
        let cs = coeffs(rng, out_len);

        let eval = |ts: &[Tensor<f64>]| {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(ts[0].clone(), true);
            let wv = tape.leaf(ts[1].clone(), true);
            let bv = tape.leaf(ts[2].clone(), true);
            let y = tape.conv2d(x, wv, bv, stride, pad, dilation).unwrap();
            let s = tape.project(y, cs.clone()).unwrap();
            tape.value(s).data()[0]
        };

        let inputs = vec![input, weight, bias];
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(inputs[0].clone(), true);
        let wv = tape.leaf(inputs[1].clone(), true);
        let bv = tape.leaf(inputs[2].clone(), true);
        let y = tape.conv2d(x, wv, bv, stride, pad, dilation).unwrap();
        let s = tape.project(y, cs.clone()).unwrap();
        tape.backward(s, 1.0).unwrap();
        let grads = vec![
            tape.grad(x).to_vec(),
            tape.grad(wv).to_vec(),
            tape.grad(bv).to_vec(),
        ];
        worst = worst.max(fd_max_rel_err(&inputs, &grads, &eval));
    }
    worst
}

fn check_unary(
    rng: &mut ChaCha8Rng,
    instances: usize,
    make_input: &dyn Fn(&mut ChaCha8Rng, [usize; 4]) -> Tensor<f64>,
    apply: &dyn Fn(&mut Tape<f64>, crate::tape::Var) -> crate::tape::Var,
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(4..=6);
        let w = rng.gen_range(4..=6);
        let input = make_input(rng, [1, c, h, w]);

        let probe = {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(input.clone(), true);
            let y = apply(&mut tape, x);
            tape.value(y).len()
        };
        let cs = coeffs(rng, probe);

        let eval = |ts: &[Tensor<f64>]| {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(ts[0].clone(), true);
            let y = apply(&mut tape, x);
            let s = tape.project(y, cs.clone()).unwrap();
            tape.value(s).data()[0]
        };

        let inputs = vec![input];
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(inputs[0].clone(), true);
        let y = apply(&mut tape, x);
        let s = tape.project(y, cs.clone()).unwrap();
        tape.backward(s, 1.0).unwrap();
        let grads = vec![tape.grad(x).to_vec()];
        worst = worst.max(fd_max_rel_err(&inputs, &grads, &eval));
    }
    worst
}

fn check_concat(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let h = rng.gen_range(2..=4);
        let w = rng.gen_range(2..=4);
        let ca = rng.gen_range(1..=2);
        let cb = rng.gen_range(1..=3);
        let a = uniform(rng, [1, ca, h, w], -1.0, 1.0);
        let b = uniform(rng, [1, cb, h, w], -1.0, 1.0);
        let cs = coeffs(rng, a.len() + b.len());

        let eval = |ts: &[Tensor<f64>]| {
            let mut tape: Tape<f64> = Tape::new();
            let xa = tape.leaf(ts[0].clone(), true);
            let xb = tape.leaf(ts[1].clone(), true);
            let y = tape.concat_channels(&[xa, xb]).unwrap();
            let s = tape.project(y, cs.clone()).unwrap();
            tape.value(s).data()[0]
        };

        let inputs = vec![a, b];
        let mut tape: Tape<f64> = Tape::new();
        let xa = tape.leaf(inputs[0].clone(), true);
        let xb = tape.leaf(inputs[1].clone(), true);
        let y = tape.concat_channels(&[xa, xb]).unwrap();
        let s = tape.project(y, cs.clone()).unwrap();
        tape.backward(s, 1.0).unwrap();
        let grads = vec![tape.grad(xa).to_vec(), tape.grad(xb).to_vec()];
        worst = worst.max(fd_max_rel_err(&inputs, &grads, &eval));
    }
    worst
}

fn check_branch_loss(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let slots = rng.gen_range(1..=2);
        let h = 3;
        let w = 3;
        let n_anchors = h * w * slots;

        // Probabilities strictly inside (0, 1); FD steps stay in range.
        let probs = uniform(rng, [1, 2 * slots, h, w], 0.05, 0.95);
        let reg = uniform(rng, [1, 4 * slots, h, w], -2.0, 2.0);

        let mut pool: Vec<usize> = (0..n_anchors).collect();
        for i in (1..pool.len()).rev() {
            pool.swap(i, rng.gen_range(0..=i));
        }
        let n_pos = rng.gen_range(1..=2);
        let n_neg = rng.gen_range(1..=3);
        let pos: Vec<PosSample<f64>> = pool[..n_pos]
            .iter()
            .map(|&anchor| {
                // Keep |target - pred| away from the smooth-L1 kink at 1.
                let mut target = [0.0f64; 4];
                for t in &mut target {
                    let v: f64 = rng.gen_range(-2.0..2.0);
                    *t = if (v.abs() - 1.0).abs() < 0.05 { v + 0.1 } else { v };
                }
                PosSample { anchor, target }
            })
            .collect();
        let neg = pool[n_pos..n_pos + n_neg].to_vec();
        let samples = BranchSamples { pos, neg, slots };
        let lambda = 2.0;

        let eval = |ts: &[Tensor<f64>]| {
            let mut tape: Tape<f64> = Tape::new();
            let p = tape.leaf(ts[0].clone(), true);
            let r = tape.leaf(ts[1].clone(), true);
            let (l, _) = tape.branch_loss(p, r, samples.clone(), lambda);
            tape.value(l).data()[0]
        };

        let inputs = vec![probs, reg];
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(inputs[0].clone(), true);
        let r = tape.leaf(inputs[1].clone(), true);
        let (l, _) = tape.branch_loss(p, r, samples.clone(), lambda);
        tape.backward(l, 1.0).unwrap();
        let grads = vec![tape.grad(p).to_vec(), tape.grad(r).to_vec()];
        worst = worst.max(fd_max_rel_err(&inputs, &grads, &eval));
    }
    worst
}

fn check_composite(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    // conv -> relu -> max-pool -> softmax chain reduced by summation.
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let input = uniform(rng, [1, 2, 6, 6], -1.0, 1.0);
        let weight = uniform(rng, [2, 2, 3, 3], -0.7, 0.7);
        let bias = uniform(rng, [1, 2, 1, 1], -0.2, 0.2);

        let eval = |ts: &[Tensor<f64>]| {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(ts[0].clone(), false);
            let wv = tape.leaf(ts[1].clone(), true);
            let bv = tape.leaf(ts[2].clone(), true);
            let y = tape.conv2d(x, wv, bv, 1, 1, 1).unwrap();
            let y = tape.relu(y);
            let y = tape.max_pool2d(y, 2, 2).unwrap();
            let y = tape.softmax_pair(y).unwrap();
            tape.sum(y);
            let s = tape.sum(y);
            tape.value(s).data()[0]
        };

        let inputs = vec![input, weight, bias];
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(inputs[0].clone(), false);
        let wv = tape.leaf(inputs[1].clone(), true);
        let bv = tape.leaf(inputs[2].clone(), true);
        let y = tape.conv2d(x, wv, bv, 1, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.max_pool2d(y, 2, 2).unwrap();
        let y = tape.softmax_pair(y).unwrap();
        let s = tape.sum(y);
        tape.backward(s, 1.0).unwrap();
        let grads = vec![Vec::new(), tape.grad(wv).to_vec(), tape.grad(bv).to_vec()];
        worst = worst.max(fd_max_rel_err(&inputs, &grads, &eval));
    }
    worst
}

/// Tiny network for the whole-loss check: one conv per stage, 16x16 input.
fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [4, 4, 8, 8],
            convs_per_stage: 1,
            kernel: 3,
        },
        branches: vec![
            BranchConfig::new(
                vec![SourceLayer::C3, SourceLayer::C4, SourceLayer::C5],
                8,
                vec![6.0, 10.0],
            ),
            BranchConfig::new(vec![SourceLayer::C4, SourceLayer::C5], 16, vec![12.0]),
        ],
    }
}

/// The full multi-branch multi-task loss on the tiny model, with the OHEM
/// sample set frozen from the unperturbed forward pass.
pub fn end_to_end_max_rel_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let params: ModelParams<f64> = build_model(&cfg, seed).unwrap();
    let image = uniform(&mut rng, [1, 3, 16, 16], 0.0, 1.0);
    let gts = vec![BBox::new(2.0, 3.0, 8.0, 8.0), BBox::new(9.0, 9.0, 5.0, 5.0)];
    let gammas = [1.0f64, 1.0];
    let lambda = 2.0f64;

    // Forward once to freeze the per-branch samples: all positives plus the
    // hardest negatives under the current network.
    let samples: Vec<BranchSamples<f64>> = {
        let mut tape: Tape<f64> = Tape::new();
        let staged = stage_params(&mut tape, &params, false);
        let img = tape.leaf(image.clone(), false);
        let mut stats = PassStats::default();
        let outs = forward_on_tape(&mut tape, img, &cfg, &params, &staged, &mut stats).unwrap();
        outs.iter()
            .zip(&cfg.branches)
            .map(|(&(cls, _), branch)| {
                let probs = crate::tensor::softmax_pair(tape.value(cls)).unwrap();
                let map_h = probs.h();
                let map_w = probs.w();
                let anchors = generate_anchors(
                    map_h,
                    map_w,
                    branch.target_stride,
                    &branch.anchor_sizes,
                    &branch.anchor_ratios,
                );
                let m = match_anchors(&anchors, &gts, 0.55, 0.35);
                let slots = branch.slots();
                let mut pos = Vec::new();
                let mut neg: Vec<(f64, usize)> = Vec::new();
                for ai in 0..anchors.len() {
                    let (gy, gx, slot) = anchors.provenance(ai);
                    let p = probs.at(0, 2 * slot + 1, gy, gx);
                    match m.labels[ai] {
                        crate::anchors::Label::Positive => pos.push(PosSample {
                            anchor: ai,
                            target: [
                                m.targets[ai][0] as f64,
                                m.targets[ai][1] as f64,
                                m.targets[ai][2] as f64,
                                m.targets[ai][3] as f64,
                            ],
                        }),
                        crate::anchors::Label::Negative => neg.push((cls_loss(p, 0), ai)),
                        crate::anchors::Label::Ignored => {}
                    }
                }
                neg.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                neg.truncate(6);
                BranchSamples {
                    pos,
                    neg: neg.into_iter().map(|(_, ai)| ai).collect(),
                    slots,
                }
            })
            .collect()
    };

    let eval = |p: &ModelParams<f64>| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let staged = stage_params(&mut tape, p, false);
        let img = tape.leaf(image.clone(), false);
        let mut stats = PassStats::default();
        let outs = forward_on_tape(&mut tape, img, &cfg, p, &staged, &mut stats).unwrap();
        let mut terms = Vec::new();
        for (bi, &(cls, reg)) in outs.iter().enumerate() {
            let probs = tape.softmax_pair(cls).unwrap();
            let (l, _) = tape.branch_loss(probs, reg, samples[bi].clone(), lambda);
            terms.push((l, gammas[bi]));
        }
        let total = tape.weighted_sum(&terms).unwrap();
        tape.value(total).data()[0]
    };

    // Analytic gradients.
    let mut tape: Tape<f64> = Tape::new();
    let staged = stage_params(&mut tape, &params, true);
    let img = tape.leaf(image.clone(), false);
    let mut stats = PassStats::default();
    let outs = forward_on_tape(&mut tape, img, &cfg, &params, &staged, &mut stats).unwrap();
    let mut terms = Vec::new();
    for (bi, &(cls, reg)) in outs.iter().enumerate() {
        let probs = tape.softmax_pair(cls).unwrap();
        let (l, _) = tape.branch_loss(probs, reg, samples[bi].clone(), lambda);
        terms.push((l, gammas[bi]));
    }
    let total = tape.weighted_sum(&terms).unwrap();
    tape.backward(total, 1.0).unwrap();

    let mut worst = 0.0f64;
    let mut work = params.clone();
    for (ei, entry) in params.entries.iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let var = staged.all()[ei];
        let analytic = tape.grad(var);
        for i in 0..entry.tensor.len() {
            let orig = entry.tensor.data()[i];
            work.entries[ei].tensor.data_mut()[i] = orig + FD_EPS;
            let fp = eval(&work);
            work.entries[ei].tensor.data_mut()[i] = orig - FD_EPS;
            let fm = eval(&work);
            work.entries[ei].tensor.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_EPS);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(a, fd));
        }
    }
    worst
}

/// Runs the whole verification suite. `instances` is the per-operation
/// random-instance count (the full suite uses 100).
pub fn run_suite(seed: u64, instances: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64, tol: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
        });
    };

    push("conv2d", check_conv2d(&mut rng, instances), OP_TOL);
    push(
        "relu",
        check_unary(
            &mut rng,
            instances,
            &|rng, shape| away_from_zero(uniform(rng, shape, -1.0, 1.0), 1e-3),
            &|tape, x| tape.relu(x),
        ),
        OP_TOL,
    );
    push(
        "max_pool2d",
        check_unary(
            &mut rng,
            instances,
            &|rng, shape| lattice(rng, shape),
            &|tape, x| tape.max_pool2d(x, 2, 2).unwrap(),
        ),
        OP_TOL,
    );
    push(
        "bilinear_upsample",
        check_unary(
            &mut rng,
            instances,
            &|rng, shape| uniform(rng, shape, -1.0, 1.0),
            &|tape, x| tape.upsample(x, 2).unwrap(),
        ),
        OP_TOL,
    );
    push(
        "bilinear_upsample_x4",
        check_unary(
            &mut rng,
            instances / 2,
            &|rng, shape| uniform(rng, shape, -1.0, 1.0),
            &|tape, x| tape.upsample(x, 4).unwrap(),
        ),
        OP_TOL,
    );
    push(
        "softmax_pair",
        check_unary(
            &mut rng,
            instances,
            &|rng, shape| {
                let mut s = shape;
                s[1] = (s[1] + 1) / 2 * 2;
                uniform(rng, s, -2.0, 2.0)
            },
            &|tape, x| tape.softmax_pair(x).unwrap(),
        ),
        OP_TOL,
    );
    push("concat_channels", check_concat(&mut rng, instances), OP_TOL);
    push("branch_loss", check_branch_loss(&mut rng, instances), OP_TOL);
    push(
        "conv_relu_pool_softmax",
        check_composite(&mut rng, instances.min(20)),
        OP_TOL,
    );
    push(
        "multi_branch_total_loss",
        end_to_end_max_rel_err(seed ^ 0x9e37_79b9),
        END_TO_END_TOL,
    );
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_adjoints_match_finite_differences() {
        // Full 100-instance sweep runs in the acceptance suite and the CLI;
        // keep the unit test quick.
        for r in run_suite(7, 12) {
            assert!(
                r.passed(),
                "{} rel err {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }
}
