//! Per-op gradient-check cases shared by the dedicated autodiff suite
//! and the acceptance suite.

use flowseg::rng;
use flowseg::tensor::{Tape, Tensor, TensorResult, Var};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 10;

type Build = Box<dyn Fn(&Tape, &[Var]) -> TensorResult<Var>>;

/// FD step scale per op. The tape's tensor contractions and reductions
/// are linear or quadratic in each input, so central differences are
/// truncation-free and a big step suppresses f32 rounding noise in the
/// loss; the smooth nonlinearities need a small step instead.
fn step_scale(name: &str) -> f32 {
    match name {
        "silu" | "sigmoid" | "bce_with_logits" => 5e-3,
        // The relu case keeps inputs at least 0.15 from the kink.
        "relu" => 5e-2,
        _ => 0.25,
    }
}

/// One named gradient-check case: input tensors, which of them are
/// differentiated, and the op applied to them.
fn case(name: &str, draw: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<bool>, Build) {
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape.to_vec(), 1.0, rng);
    match name {
        "add" => {
            let a = randn(&[2, 3, 4], rng);
            let b = randn(&[2, 3, 4], rng);
            (vec![a, b], vec![true, true], Box::new(|t, v| t.add(v[0], v[1])))
        }
        "sub" => {
            let a = randn(&[3, 5], rng);
            let b = randn(&[3, 5], rng);
            (vec![a, b], vec![true, true], Box::new(|t, v| t.sub(v[0], v[1])))
        }
        "mul" => {
            let a = randn(&[4, 4], rng);
            let b = randn(&[4, 4], rng);
            (vec![a, b], vec![true, true], Box::new(|t, v| t.mul(v[0], v[1])))
        }
        "scale" => {
            let a = randn(&[2, 3, 2], rng);
            let c = -1.7 + 0.1 * draw as f32;
            (vec![a], vec![true], Box::new(move |t, v| t.scale(v[0], c)))
        }
        "matmul" => {
            let a = randn(&[3, 4], rng);
            let b = randn(&[4, 2], rng);
            (vec![a, b], vec![true, true], Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        "conv3d" => {
            // Alternate between the two strides the models use.
            let stride = 1 + draw % 2;
            let x = randn(&[2, 4, 4, 3], rng);
            let w = randn(&[2, 2, 3, 3, 1], rng);
            let b = randn(&[2], rng);
            (
                vec![x, w, b],
                vec![true, true, true],
                Box::new(move |t, v| t.conv3d(v[0], v[1], v[2], stride)),
            )
        }
        "transposed_conv3d" => {
            // Alternate between disjoint tiles (k = stride) and the
            // overlapping k = 2 * stride form.
            let k = if draw % 2 == 0 { 2 } else { 4 };
            let x = randn(&[2, 2, 2, 2], rng);
            let w = randn(&[2, 3, k, k, k], rng);
            let b = randn(&[3], rng);
            (
                vec![x, w, b],
                vec![true, true, true],
                Box::new(|t, v| t.transposed_conv3d(v[0], v[1], v[2], 2)),
            )
        }
        "avgpool3d" => {
            let x = randn(&[2, 4, 4, 2], rng);
            (vec![x], vec![true], Box::new(|t, v| t.avgpool3d(v[0])))
        }
        "global_avgpool" => {
            let x = randn(&[3, 3, 4, 2], rng);
            (vec![x], vec![true], Box::new(|t, v| t.global_avgpool(v[0])))
        }
        "relu" => {
            // Keep inputs at least 0.15 from the kink so the FD stencil
            // never straddles it.
            let x = randn(&[3, 4, 3], rng)
                .map(|v| if v.abs() < 0.15 { if v >= 0.0 { v + 0.3 } else { v - 0.3 } } else { v });
            (vec![x], vec![true], Box::new(|t, v| t.relu(v[0])))
        }
        "silu" => {
            let x = randn(&[4, 5], rng);
            (vec![x], vec![true], Box::new(|t, v| t.silu(v[0])))
        }
        "sigmoid" => {
            let x = randn(&[5, 3], rng);
            (vec![x], vec![true], Box::new(|t, v| t.sigmoid(v[0])))
        }
        "reshape" => {
            let x = randn(&[2, 3, 4], rng);
            (vec![x], vec![true], Box::new(|t, v| t.reshape(v[0], vec![4, 6])))
        }
        "concat_channels" => {
            let a = randn(&[2, 3, 3, 1], rng);
            let b = randn(&[1, 3, 3, 1], rng);
            let c = randn(&[2, 3, 3, 1], rng);
            (
                vec![a, b, c],
                vec![true, true, true],
                Box::new(|t, v| t.concat_channels(&[v[0], v[1], v[2]])),
            )
        }
        "slice" => {
            let x = randn(&[4, 5, 2, 3], rng);
            (vec![x], vec![true], Box::new(|t, v| t.slice(v[0], 1, 1, 4)))
        }
        "mse" => {
            let a = randn(&[2, 3, 4], rng);
            let b = randn(&[2, 3, 4], rng);
            (vec![a, b], vec![true, true], Box::new(|t, v| t.mse(v[0], v[1])))
        }
        "bce_with_logits" => {
            // Targets stay inside [0,1] under the FD perturbation.
            let logits = randn(&[6], rng);
            let targets = Tensor::rand_uniform(vec![6], 0.2, 0.8, rng);
            (
                vec![logits, targets],
                vec![true, true],
                Box::new(|t, v| t.bce_with_logits(v[0], v[1])),
            )
        }
        "sum" => {
            let x = randn(&[3, 4, 5], rng);
            (vec![x], vec![true], Box::new(|t, v| t.sum(v[0])))
        }
        "mean" => {
            let x = randn(&[2, 5, 3], rng);
            (vec![x], vec![true], Box::new(|t, v| t.mean(v[0])))
        }
        other => panic!("no gradient-check case for op {other}"),
    }
}

/// Run the checker for one op over ten random inputs; returns the worst
/// relative error seen.
pub fn check_op(name: &str) -> f64 {
    let mut worst = 0.0f64;
    for draw in 0..DRAWS {
        let mut rng = rng::substream(0xAD1F, &format!("fd/{name}/{draw}"));
        let (inputs, diff, build) = case(name, draw, &mut rng);
        let err = super::fd_rel_err_h(&inputs, &diff, step_scale(name), |t, v| build(t, v));
        worst = worst.max(err);
    }
    worst
}
