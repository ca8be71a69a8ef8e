//! Training-free counterfactual segmentation: invert a volume's latent
//! halfway to noise, steer the first few re-sampling steps with gradients
//! of a frozen slice classifier pushed toward "no nodule", and read the
//! segmentation out of |counterfactual - input|.
//!
//! The classifier gradient is taken at the one-step clean latent estimate
//! and applied directly to the current latent; the velocity field is
//! never differentiated through. The guided-slice set is fixed from the
//! input volume by default so it cannot collapse as nodules fade
//! mid-trajectory; `recompute_slices` re-selects per step for ablations.

use crate::error::{Error, Result};
use crate::flow::{self, TimeGrid, Velocity, VelocityField};
use crate::latent::{self, Autoencoder};
use crate::phantom::Volume;
use crate::predictor::{volume_predictions, Classifier};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMethod {
    /// Otsu's method over the nonzero residual voxels.
    Otsu,
    /// Fixed threshold in residual display units.
    Fixed(f32),
}

#[derive(Clone, Copy, Debug)]
pub struct GuidanceConfig {
    /// Gradient step size applied to the latent; 0 disables steering.
    pub s: f32,
    pub t_steps: usize,
    /// Inversion stops at this step index; sampling restarts from it.
    pub tau: usize,
    /// Number of guided sampling steps.
    pub m: usize,
    /// Guiding label fed to the classifier loss.
    pub label: f32,
    /// A slice is guided when its nodule probability exceeds this.
    pub guided_slice_threshold: f32,
    /// Re-select guided slices from the evolving clean estimate.
    pub recompute_slices: bool,
    /// 3x3x3 mean-filter the residual before thresholding.
    pub smooth_residual: bool,
    pub threshold: ThresholdMethod,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            s: 1.0,
            t_steps: 30,
            tau: 15,
            m: 5,
            label: 0.0,
            guided_slice_threshold: 0.5,
            recompute_slices: false,
            smooth_residual: false,
            threshold: ThresholdMethod::Otsu,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::Config("guidance needs at least 1 time step".into()));
        }
        if self.tau > self.t_steps {
            return Err(Error::Config(format!(
                "tau {} outside 0..={}",
                self.tau, self.t_steps
            )));
        }
        if self.tau + self.m > self.t_steps {
            return Err(Error::Config(format!(
                "tau {} + m {} exceeds T {}",
                self.tau, self.m, self.t_steps
            )));
        }
        if !self.s.is_finite() || self.s < 0.0 {
            return Err(Error::Config(format!("guidance strength {} invalid", self.s)));
        }
        if !(0.0..=1.0).contains(&self.label) {
            return Err(Error::Config(format!("guiding label {} outside [0, 1]", self.label)));
        }
        if !(0.0..=1.0).contains(&self.guided_slice_threshold) {
            return Err(Error::Config(format!(
                "guided-slice threshold {} outside [0, 1]",
                self.guided_slice_threshold
            )));
        }
        if let ThresholdMethod::Fixed(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::Config("fixed residual threshold must be finite".into()));
            }
        }
        Ok(())
    }
}

/// One guided step's diagnostics, recorded before its latent update.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub step: usize,
    pub grad_norm: f32,
    pub loss: f32,
    pub mean_prob: f32,
}

#[derive(Clone, Debug, Default)]
pub struct GuidanceTrace {
    pub rows: Vec<TraceRow>,
    /// Mean guided-slice probability evaluated once more after the last
    /// guided update, on the fixed slice set, for before/after reporting.
    pub final_mean_prob: Option<f32>,
}

#[derive(Debug)]
pub struct SegmentationResult {
    pub counterfactual: Volume,
    pub residual: Volume,
    /// 1.0 where the residual exceeds the threshold, 0.0 elsewhere.
    pub mask: Volume,
    pub trace: GuidanceTrace,
    /// True when no slice was predicted positive, so the output is the
    /// plain unguided reconstruction residual.
    pub guidance_skipped: bool,
}

pub struct GuidanceModels<'a> {
    pub ae: &'a Autoencoder,
    pub flow: &'a VelocityField,
    pub clf: &'a Classifier,
}

/// One-step clean estimate: where the current latent would land at u=1 if
/// the velocity stayed frozen. At t = T this is the latent itself.
pub fn clean_estimate<V: Velocity>(
    field: &V,
    z: &Tensor,
    t: usize,
    grid: &TimeGrid,
) -> Result<Tensor> {
    if t > grid.steps() {
        return Err(Error::Invalid(format!(
            "clean estimate step {t} outside 0..={}",
            grid.steps()
        )));
    }
    if t == grid.steps() {
        return Ok(z.clone());
    }
    let u = grid.u(t);
    let v = field.at(z, u)?;
    z.axpy(1.0 - u, &v).map_err(Error::from)
}

/// The steering update z - s * grad. s = 0 returns z bit-identically.
pub fn guidance_update(z: &Tensor, grad: &Tensor, s: f32) -> Result<Tensor> {
    if z.shape() != grad.shape() {
        return Err(Error::Invalid(format!(
            "guidance update shapes differ: {:?} vs {:?}",
            z.shape(),
            grad.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("guidance gradient is not finite".into()));
    }
    if s == 0.0 {
        return Ok(z.clone());
    }
    z.axpy(-s, grad).map_err(Error::from)
}

/// Slice indices of `x` whose nodule probability exceeds the threshold.
pub fn select_guided_slices(
    f: &Classifier,
    x: &Volume,
    cfg: &GuidanceConfig,
) -> Result<Vec<usize>> {
    let probs = volume_predictions(f, x, f.k)?;
    Ok(probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > cfg.guided_slice_threshold)
        .map(|(i, _)| i)
        .collect())
}

fn stable_sigmoid(l: f32) -> f32 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Decode a clean latent estimate, classify its guided slices, and return
/// (mean BCE loss, mean probability, gradient at the estimate if asked).
fn guided_loss_eval(
    ae: &Autoencoder,
    clf: &Classifier,
    zhat_value: &Tensor,
    slices: &[usize],
    label: f32,
    want_grad: bool,
) -> Result<(f32, f32, Option<Tensor>)> {
    assert!(!slices.is_empty(), "caller guarantees a non-empty slice set");
    let tape = Tape::new();
    let zhat = if want_grad {
        tape.leaf(zhat_value.clone().with_grad())
    } else {
        tape.constant(zhat_value.clone())
    };
    let bae = ae.bind(&tape, false);
    let xunit = bae.decode(&tape, zhat)?;
    let ones = tape.constant(Tensor::full(tape.shape_of(xunit), 1.0));
    let xd = tape.scale(tape.add(xunit, ones)?, 127.5)?;
    let depth = tape.shape_of(xd)[3];
    let bclf = clf.bind(&tape, false);
    let half = (clf.k - 1) / 2;

    let mut loss: Option<Var> = None;
    let mut prob_acc = 0.0f64;
    for &center in slices {
        let mut chans = Vec::with_capacity(clf.k);
        for off in 0..clf.k {
            let want = center as i64 + off as i64 - half as i64;
            let s = want.clamp(0, depth as i64 - 1) as usize;
            chans.push(tape.slice(xd, 3, s, s + 1)?);
        }
        let slab = tape.concat_channels(&chans)?;
        let logit = bclf.logit(&tape, slab)?;
        prob_acc += stable_sigmoid(tape.value(logit).data()[0]) as f64;
        let target = tape.constant(Tensor::from_vec(vec![1], vec![label])?);
        let li = tape.bce_with_logits(logit, target)?;
        loss = Some(match loss {
            None => li,
            Some(acc) => tape.add(acc, li)?,
        });
    }
    let loss = tape.scale(loss.expect("non-empty slices"), 1.0 / slices.len() as f32)?;
    let loss_value = tape.value(loss).data()[0];
    let mean_prob = (prob_acc / slices.len() as f64) as f32;
    let grad = if want_grad {
        let grads = tape.backward(loss)?;
        let g = grads
            .get(zhat)
            .cloned()
            .ok_or_else(|| Error::Numeric("guidance loss has no path to the latent".into()))?;
        Some(g)
    } else {
        None
    };
    Ok((loss_value, mean_prob, grad))
}

/// Otsu's threshold of `values` using 256 equal bins spanning [0, max]:
/// the bin split maximizing between-class variance, returned as the upper
/// edge of the last below-threshold bin. Empty input gives 0.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    let hi = values.iter().copied().fold(0.0f32, f32::max);
    if values.is_empty() || hi <= 0.0 {
        return 0.0;
    }
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = ((v / hi) * BINS as f32) as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total: u64 = values.len() as u64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    let mut best = (0usize, f64::MIN);
    for t in 0..BINS - 1 {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (total_sum - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.1 {
            best = (t, between);
        }
    }
    (best.0 + 1) as f32 * hi / BINS as f32
}

/// Binarize a nonnegative residual: Otsu over its nonzero voxels, or a
/// fixed cut. Voxels strictly above the threshold become 1.0.
pub fn threshold_residual(residual: &Volume, method: ThresholdMethod) -> Result<Volume> {
    if residual.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Invalid("residual must be finite and nonnegative".into()));
    }
    let theta = match method {
        ThresholdMethod::Fixed(t) => t,
        ThresholdMethod::Otsu => {
            let nonzero: Vec<f32> = residual.values.iter().copied().filter(|&v| v > 0.0).collect();
            otsu_threshold(&nonzero)
        }
    };
    let vals = residual.values.iter().map(|&v| if v > theta { 1.0 } else { 0.0 }).collect();
    Volume::with_values(residual.dims, residual.spacing, vals)
}

/// 3x3x3 box filter with clamped (edge-replicated) borders.
pub fn mean_filter3(v: &Volume) -> Volume {
    let [d0, d1, d2] = v.dims;
    let mut out = vec![0.0f32; v.values.len()];
    let cl = |x: i64, n: usize| x.clamp(0, n as i64 - 1) as usize;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let mut acc = 0.0f32;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            acc += v.at(
                                cl(i as i64 + di, d0),
                                cl(j as i64 + dj, d1),
                                cl(k as i64 + dk, d2),
                            );
                        }
                    }
                }
                out[(i * d1 + j) * d2 + k] = acc / 27.0;
            }
        }
    }
    Volume::with_values(v.dims, v.spacing, out).expect("same length")
}

/// Run the full counterfactual pipeline on one preprocessed volume.
///
/// Inversion takes `T - tau` backward steps from the encoded input;
/// sampling returns in `T - tau` forward steps, the first `m` of them
/// steered; the residual against the input is thresholded into the mask.
/// All models are read-only throughout.
pub fn tfg_segment(
    x: &Volume,
    models: &GuidanceModels,
    cfg: &GuidanceConfig,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    let grid = TimeGrid::new(cfg.t_steps)?;
    let unit = latent::display_to_unit(x);
    let mut z = models.ae.encode_tensor(&unit)?;

    for t in ((cfg.tau + 1)..=cfg.t_steps).rev() {
        z = flow::backward_euler_step(models.flow, &z, t, &grid)
            .map_err(|e| Error::Numeric(format!("inversion aborted at step {t}: {e}")))?;
    }

    let fixed_slices = select_guided_slices(models.clf, x, cfg)?;
    let mut rows = Vec::new();
    let mut final_mean_prob = None;

    for t in cfg.tau..cfg.t_steps {
        if t < cfg.tau + cfg.m {
            let slices = if cfg.recompute_slices {
                let zhat = clean_estimate(models.flow, &z, t, &grid)?;
                let xhat = latent::unit_to_display(&models.ae.decode_tensor(&zhat)?, x.spacing)?;
                select_guided_slices(models.clf, &xhat, cfg)?
            } else {
                fixed_slices.clone()
            };
            if !slices.is_empty() {
                let zhat = clean_estimate(models.flow, &z, t, &grid)?;
                let (loss, mean_prob, grad) =
                    guided_loss_eval(models.ae, models.clf, &zhat, &slices, cfg.label, true)
                        .map_err(|e| {
                            Error::Numeric(format!("guidance aborted at step {t}: {e}"))
                        })?;
                let grad = grad.expect("gradient requested");
                rows.push(TraceRow { step: t, grad_norm: grad.l2_norm(), loss, mean_prob });
                z = guidance_update(&z, &grad, cfg.s)?;
            }
        }
        z = flow::forward_euler_step(models.flow, &z, t, &grid)
            .map_err(|e| Error::Numeric(format!("sampling aborted at step {t}: {e}")))?;

        if t + 1 == cfg.tau + cfg.m && !rows.is_empty() && !fixed_slices.is_empty() {
            let zhat = clean_estimate(models.flow, &z, t + 1, &grid)?;
            let (_, prob, _) =
                guided_loss_eval(models.ae, models.clf, &zhat, &fixed_slices, cfg.label, false)?;
            final_mean_prob = Some(prob);
        }
    }

    let x_star = latent::unit_to_display(&models.ae.decode_tensor(&z)?, x.spacing)?;
    let residual_vals: Vec<f32> =
        x_star.values.iter().zip(&x.values).map(|(a, b)| (a - b).abs()).collect();
    let mut residual = Volume::with_values(x.dims, x.spacing, residual_vals)?;
    if cfg.smooth_residual {
        residual = mean_filter3(&residual);
    }
    let mask = threshold_residual(&residual, cfg.threshold)?;
    let guidance_skipped = rows.is_empty();
    Ok(SegmentationResult {
        counterfactual: x_star,
        residual,
        mask,
        trace: GuidanceTrace { rows, final_mean_prob },
        guidance_skipped,
    })
}
