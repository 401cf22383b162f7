//! Finite-difference checks of the composite losses, on top of the per-op suite.

use frs_autograd::gradcheck::{builtin_cases, diff, fixed, run_cases, uniform, GradCase, GradcheckReport};
use frs_autograd::{Tensor, TensorError};
use rand::Rng;

use crate::data::{batch_targets, GtBox};
use crate::detector::{BoundAdapter, DetectorConfig, FeaturePyramid, ScorePyramid};
use crate::error::Error;
use crate::frs::{fpn_distill_loss, head_distill_loss, RichnessMaskSet};
use crate::rng::{stream, Stream};
use crate::train::detection_loss;

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "composite loss",
            reason: other.to_string(),
        },
    }
}

fn level_shapes(c: usize) -> Vec<[usize; 4]> {
    vec![[2, c, 4, 4], [2, c, 2, 2]]
}

fn random_masks(rng: &mut impl Rng) -> Vec<Tensor> {
    level_shapes(1).iter().map(|s| uniform(rng, s, 0.0, 1.0)).collect()
}

/// `L_FPN`, `L_head` and `L_GT` on small random instances.
pub fn composite_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = stream(seed, Stream::Gradcheck);
    let r = &mut rng;
    let mut cases = Vec::new();

    // Student features (2 channels) adapted onto 3 teacher channels.
    let masks = random_masks(r);
    let teacher: Vec<Tensor> = level_shapes(3).iter().map(|s| uniform(r, s, -1.0, 1.0)).collect();
    let mut inputs: Vec<_> = level_shapes(2).iter().map(|s| diff(uniform(r, s, -1.0, 1.0))).collect();
    for _ in 0..2 {
        inputs.push(diff(uniform(r, &[3, 2, 1, 1], -1.0, 1.0)));
        inputs.push(diff(uniform(r, &[3], -0.5, 0.5)));
    }
    cases.push(GradCase::new("fpn_distill_loss", inputs, move |tape, v| {
        let m = RichnessMaskSet::from_masks(masks.clone()).map_err(to_tensor_error)?;
        let adapter = BoundAdapter {
            levels: vec![Some((v[2], v[3])), Some((v[4], v[5]))],
        };
        let t = FeaturePyramid {
            levels: teacher.clone(),
        };
        fpn_distill_loss(tape, &t, &v[..2], &adapter, &m)
            .map(|l| l.total)
            .map_err(to_tensor_error)
    }));

    // Student probabilities come from logits so they stay inside the clamp.
    let masks = random_masks(r);
    let teacher: Vec<Tensor> = level_shapes(3).iter().map(|s| uniform(r, s, 0.0, 1.0)).collect();
    let inputs = level_shapes(3).iter().map(|s| diff(uniform(r, s, -3.0, 3.0))).collect();
    cases.push(GradCase::new("head_distill_loss", inputs, move |tape, v| {
        let m = RichnessMaskSet::from_masks(masks.clone()).map_err(to_tensor_error)?;
        let t = ScorePyramid {
            probs: teacher.clone(),
            logits: teacher.clone(),
        };
        let ys: Vec<_> = v.iter().map(|&x| tape.sigmoid(x)).collect();
        head_distill_loss(tape, &t, &ys, &m).map(|l| l.total).map_err(to_tensor_error)
    }));

    // One object on a 32 px canvas; logits and raw box maps are the inputs.
    let mut cfg = DetectorConfig::student();
    cfg.input_size = 32;
    let side = r.random_range(9..=14) as f64;
    let x0 = r.random_range(0..=(32 - side as usize)) as f64;
    let gt = [GtBox {
        category: r.random_range(0..3),
        bbox: [x0, 4.0, x0 + side, 4.0 + side],
    }];
    let targets = batch_targets(&[&gt[..]], &cfg);
    let mut inputs = Vec::new();
    for l in 0..cfg.levels() {
        let n = cfg.level_size(l);
        inputs.push(diff(uniform(r, &[1, 3, n, n], -3.0, 1.0)));
    }
    for l in 0..cfg.levels() {
        let n = cfg.level_size(l);
        inputs.push(diff(uniform(r, &[1, 4, n, n], -1.0, 1.5)));
    }
    inputs.push(fixed(Tensor::scalar(0.0)));
    cases.push(GradCase::new("detection_loss", inputs, move |tape, v| {
        let logits = &v[..3];
        let boxes: Vec<_> = v[3..6].iter().map(|&x| tape.exp(x)).collect();
        detection_loss(tape, logits, &boxes, &targets)
            .map(|l| l.total)
            .map_err(to_tensor_error)
    }));
    cases
}

/// Per-op cases followed by the composite losses.
pub fn full_suite(seed: u64) -> frs_autograd::Result<GradcheckReport> {
    let mut cases = builtin_cases(seed);
    cases.extend(composite_cases(seed));
    run_cases(&cases, seed)
}
