//! Shared oracles for the integration suites: a finite-difference
//! gradient checker, an f64 matrix exponential, and brute-force metric
//! reimplementations kept deliberately independent of the library code.
#![allow(dead_code)]

pub mod gradcheck;

use flowseg::phantom::Volume;
use flowseg::tensor::{Tape, Tensor, TensorResult, Var};

/// Worst relative gradient error across the differentiable inputs of one
/// op, autodiff vs central finite differences.
///
/// `build` constructs the op under test from leaf variables; non-scalar
/// outputs are reduced with `sum` so both paths share the same
/// scalarization. `diff` marks which inputs carry gradients. The error
/// for one input is `|g_ad - g_fd| / max(|g_fd|, 1e-8)` in L2.
pub fn fd_rel_err<F>(inputs: &[Tensor], diff: &[bool], build: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> TensorResult<Var>,
{
    fd_rel_err_h(inputs, diff, 5e-3, build)
}

/// [`fd_rel_err`] with an explicit step scale. Ops that are linear or
/// quadratic in their inputs have no truncation error, so a large step
/// drowns f32 rounding noise; smooth nonlinear ops need a small one.
pub fn fd_rel_err_h<F>(inputs: &[Tensor], diff: &[bool], h_scale: f32, build: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> TensorResult<Var>,
{
    assert_eq!(inputs.len(), diff.len());
    let loss_of = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = build(&tape, &vars).expect("op builds");
        let y = if tape.value(y).numel() == 1 { y } else { tape.sum(y).expect("sum") };
        tape.value(y).data()[0] as f64
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(diff)
        .map(|(t, &d)| {
            if d {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let y = build(&tape, &vars).expect("op builds");
    let y = if tape.value(y).numel() == 1 { y } else { tape.sum(y).expect("sum") };
    let grads = tape.backward(y).expect("backward");

    let mut worst = 0.0f64;
    for (i, (t, &d)) in inputs.iter().zip(diff).enumerate() {
        if !d {
            continue;
        }
        let ad: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; t.numel()],
        };
        let mut fd = vec![0.0f64; t.numel()];
        for j in 0..t.numel() {
            let h = h_scale * t.data()[j].abs().max(1.0);
            let perturbed = |delta: f32| -> f64 {
                let mut data = t.data().to_vec();
                data[j] += delta;
                let mut xs: Vec<Tensor> = inputs.to_vec();
                xs[i] = Tensor::from_vec(t.shape().to_vec(), data).expect("same shape");
                loss_of(&xs)
            };
            fd[j] = (perturbed(h) - perturbed(-h)) / (2.0 * h as f64);
        }
        let num: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(num / den);
    }
    worst
}

/// 4x4 matrix exponential by Taylor series in f64. Converges fast for
/// the spectral norms (<= 1) the ODE-order check uses.
pub fn mat_exp4(a: &[f64; 16]) -> [f64; 16] {
    let mut result = [0.0f64; 16];
    for i in 0..4 {
        result[i * 4 + i] = 1.0;
    }
    // term = A^k / k!, accumulated until it vanishes.
    let mut term = result;
    for k in 1..200 {
        let mut next = [0.0f64; 16];
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for l in 0..4 {
                    acc += term[i * 4 + l] * a[l * 4 + j];
                }
                next[i * 4 + j] = acc / k as f64;
            }
        }
        term = next;
        let mut sz = 0.0f64;
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
            sz += t.abs();
        }
        if sz < 1e-19 {
            break;
        }
    }
    result
}

pub fn mat_vec4(a: &[f64; 16], x: &[f64; 4]) -> [f64; 4] {
    let mut y = [0.0f64; 4];
    for i in 0..4 {
        for j in 0..4 {
            y[i] += a[i * 4 + j] * x[j];
        }
    }
    y
}

/// Largest singular value via power iteration on A^T A.
pub fn spectral_norm4(a: &[f64; 16]) -> f64 {
    let mut v = [0.5f64; 4];
    for _ in 0..500 {
        let av = mat_vec4(a, &v);
        // A^T (A v)
        let mut atav = [0.0f64; 4];
        for i in 0..4 {
            for j in 0..4 {
                atav[j] += a[i * 4 + j] * av[i];
            }
        }
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        for (t, s) in v.iter_mut().zip(&atav) {
            *t = s / n;
        }
    }
    let av = mat_vec4(a, &v);
    av.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn positive_set(v: &Volume) -> Vec<[i64; 3]> {
    let [d0, d1, d2] = v.dims;
    let mut out = Vec::new();
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                if v.at(i, j, k) > 0.5 {
                    out.push([i as i64, j as i64, k as i64]);
                }
            }
        }
    }
    out
}

fn brute_surface(v: &Volume) -> Vec<[i64; 3]> {
    let pos = positive_set(v);
    let lookup: std::collections::HashSet<[i64; 3]> = pos.iter().cloned().collect();
    let neighbors = [
        [1i64, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    pos.into_iter()
        .filter(|p| {
            neighbors.iter().any(|n| !lookup.contains(&[p[0] + n[0], p[1] + n[1], p[2] + n[2]]))
        })
        .collect()
}

/// Dice by explicit set intersection.
pub fn brute_dice(a: &Volume, b: &Volume) -> f64 {
    let sa: std::collections::HashSet<[i64; 3]> = positive_set(a).into_iter().collect();
    let sb: std::collections::HashSet<[i64; 3]> = positive_set(b).into_iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let overlap = sa.intersection(&sb).count();
    2.0 * overlap as f64 / (sa.len() + sb.len()) as f64
}

/// Mean symmetric surface distance by exhaustive all-pairs search,
/// pooled over both directions; same empty-mask conventions as the
/// library (one empty -> volume diagonal, both empty -> 0).
pub fn brute_msd(a: &Volume, b: &Volume, spacing: [f32; 3]) -> f64 {
    let sa = brute_surface(a);
    let sb = brute_surface(b);
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    if sa.is_empty() || sb.is_empty() {
        let mut diag = 0.0f64;
        for ax in 0..3 {
            let e = a.dims[ax] as f64 * spacing[ax] as f64;
            diag += e * e;
        }
        return diag.sqrt();
    }
    let nearest = |p: &[i64; 3], others: &[[i64; 3]]| -> f64 {
        others
            .iter()
            .map(|q| {
                (0..3)
                    .map(|ax| {
                        let d = (p[ax] - q[ax]) as f64 * spacing[ax] as f64;
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>()
        + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    total / (sa.len() + sb.len()) as f64
}

/// Random binary mask with roughly `fill` positive fraction.
pub fn random_mask(dims: [usize; 3], fill: f64, rng: &mut impl rand::Rng) -> Volume {
    let n = dims[0] * dims[1] * dims[2];
    let values: Vec<f32> = (0..n).map(|_| if rng.gen_bool(fill) { 1.0 } else { 0.0 }).collect();
    Volume::with_values(dims, [1.0; 3], values).expect("matching length")
}
