//! Slice-level nodule-presence classifier trained from image-level labels
//! only.
//!
//! Inputs are 2.5D slabs: k adjacent axial slices stacked as channels of a
//! single in-plane prediction for the center slice, represented as
//! `[k, h, w, 1]` tensors so the depth-1 convolution stack below applies.
//! Out-of-range neighbor slices are replicated from the nearest edge
//! slice, which avoids fabricating air at lung boundaries.
//!
//! Training draws positive and negative slabs with equal probability
//! regardless of class imbalance, applies in-plane augmentations, and
//! keeps the parameters with the best held-out F1, evaluated every
//! `eval_every` iterations at threshold 0.5.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::latent::TrainLogRow;
use crate::phantom::Volume;
use crate::rng;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const DEFAULT_SLAB_SLICES: usize = 9;
const HIDDEN1: usize = 16;
const HIDDEN2: usize = 32;

/// Stack `k` adjacent axial slices centered on `center` as the channels
/// of one `[k, h, w, 1]` slab, replicating edge slices where the window
/// leaves the volume.
pub fn stack_25d(v: &Volume, center: usize, k: usize) -> Result<Tensor> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Invalid(format!("slab slice count must be odd and >= 1, got {k}")));
    }
    if center >= v.depth() {
        return Err(Error::Invalid(format!(
            "slab center {center} outside volume depth {}",
            v.depth()
        )));
    }
    let half = (k - 1) / 2;
    let [h, w, _] = v.dims;
    let mut data = Vec::with_capacity(k * h * w);
    for off in 0..k {
        let want = center as i64 + off as i64 - half as i64;
        let src = want.clamp(0, v.depth() as i64 - 1) as usize;
        data.extend_from_slice(&v.axial_slice(src));
    }
    Tensor::from_vec(vec![k, h, w, 1], data).map_err(Error::from)
}

/// Depth-1 conv stack over a slab: k -> 16 -> 32 channels with stride-2
/// in-plane reductions and relu, then global average pooling and a linear
/// projection to one logit.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub params: ParamSet,
    pub k: usize,
}

pub struct BoundClassifier {
    pub vars: Vec<Var>,
    k: usize,
}

impl Classifier {
    pub fn new(k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::Config(format!("slab slice count must be odd and >= 1, got {k}")));
        }
        let mut p = ParamSet::new();
        let std0 = (2.0 / (k as f32 * 9.0)).sqrt();
        let std1 = (2.0 / (HIDDEN1 as f32 * 9.0)).sqrt();
        let std2 = (2.0 / HIDDEN2 as f32).sqrt();
        p.push("w0", Tensor::randn(vec![HIDDEN1, k, 3, 3, 1], std0, rng));
        p.push("b0", Tensor::zeros(vec![HIDDEN1]));
        p.push("w1", Tensor::randn(vec![HIDDEN2, HIDDEN1, 3, 3, 1], std1, rng));
        p.push("b1", Tensor::zeros(vec![HIDDEN2]));
        p.push("w2", Tensor::randn(vec![HIDDEN2, 1], std2, rng));
        p.push("b2", Tensor::zeros(vec![1]));
        Ok(Classifier { params: p, k })
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundClassifier {
        BoundClassifier { vars: self.params.bind(tape, trainable), k: self.k }
    }

    /// The linear head's channel weights, one per final feature channel.
    pub fn head_weights(&self) -> &Tensor {
        self.params.get("w2").expect("classifier always has a head")
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum().rotate_left((self.k % 63) as u32)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert("clf.k", Tensor::scalar(self.k as f32))?;
        c.insert_all(self.params.named_tensors("clf."))?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Classifier> {
        let k = c.expect("clf.k")?.data()[0] as usize;
        let mut arch = rng::substream(0, "clf.arch");
        let mut clf = Classifier::new(k, &mut arch)?;
        let names: Vec<String> = clf.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            clf.params.set_value(&name, c.expect(&format!("clf.{name}"))?.clone())?;
        }
        Ok(clf)
    }
}

impl BoundClassifier {
    /// Feature maps after the last convolution, pre-pooling: `[32, h', w', 1]`.
    pub fn features(&self, tape: &Tape, slab: Var) -> Result<Var> {
        let shape = tape.shape_of(slab);
        if shape.len() != 4 || shape[0] != self.k || shape[3] != 1 {
            return Err(Error::Invalid(format!(
                "classifier wants [{}, h, w, 1], got {shape:?}",
                self.k
            )));
        }
        let h = tape.conv3d(slab, self.vars[0], self.vars[1], 2)?;
        let h = tape.relu(h)?;
        let h = tape.conv3d(h, self.vars[2], self.vars[3], 2)?;
        Ok(tape.relu(h)?)
    }

    pub fn logit_from_features(&self, tape: &Tape, features: Var) -> Result<Var> {
        let pooled = tape.global_avgpool(features)?;
        let row = tape.reshape(pooled, vec![1, HIDDEN2])?;
        let prod = tape.matmul(row, self.vars[4])?;
        let logit = tape.reshape(prod, vec![1])?;
        Ok(tape.add(logit, self.vars[5])?)
    }

    pub fn logit(&self, tape: &Tape, slab: Var) -> Result<Var> {
        let f = self.features(tape, slab)?;
        self.logit_from_features(tape, f)
    }
}

/// Nodule probability for one slab: sigmoid of the classifier logit.
pub fn predict_slice(f: &Classifier, slab: &Tensor) -> Result<f32> {
    if !slab.is_finite() {
        return Err(Error::Numeric("slab contains non-finite values".into()));
    }
    let tape = Tape::new();
    let bound = f.bind(&tape, false);
    let sv = tape.constant(slab.clone());
    let logit = bound.logit(&tape, sv)?;
    let prob = tape.sigmoid(logit)?;
    Ok(tape.value(prob).data()[0])
}

/// One probability per axial slice, each from the slab centered there.
pub fn volume_predictions(f: &Classifier, v: &Volume, k: usize) -> Result<Vec<f32>> {
    (0..v.depth()).map(|c| predict_slice(f, &stack_25d(v, c, k)?)).collect()
}

/// F1 at the 0.5 threshold from confusion counts; an empty problem (no
/// positives predicted or labeled) counts as a perfect 1.0.
pub fn f1_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    if 2 * tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// In-plane augmentation policy. Each transform fires independently with
/// its probability; magnitudes are drawn uniformly from the stated range.
#[derive(Clone, Copy, Debug)]
pub struct AugmentationConfig {
    pub flip_p: f32,
    pub rot_p: f32,
    /// Max rotation magnitude, degrees.
    pub rot_deg: f32,
    pub trans_p: f32,
    /// Max translation as a fraction of each in-plane extent.
    pub trans_frac: f32,
    pub zoom_p: f32,
    pub zoom_lo: f32,
    pub zoom_hi: f32,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_p: 0.5,
            rot_p: 0.5,
            rot_deg: 15.0,
            trans_p: 1.0,
            trans_frac: 0.10,
            zoom_p: 0.95,
            zoom_lo: 0.9,
            zoom_hi: 1.1,
        }
    }
}

impl AugmentationConfig {
    /// All probabilities zero: augment becomes the identity.
    pub fn none() -> Self {
        AugmentationConfig {
            flip_p: 0.0,
            rot_p: 0.0,
            rot_deg: 0.0,
            trans_p: 0.0,
            trans_frac: 0.0,
            zoom_p: 0.0,
            zoom_lo: 1.0,
            zoom_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip", self.flip_p),
            ("rotation", self.rot_p),
            ("translation", self.trans_p),
            ("zoom", self.zoom_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if !self.rot_deg.is_finite() || self.rot_deg < 0.0 {
            return Err(Error::Config(format!("rotation range {} invalid", self.rot_deg)));
        }
        if !self.trans_frac.is_finite() || self.trans_frac < 0.0 {
            return Err(Error::Config(format!("translation range {} invalid", self.trans_frac)));
        }
        if !(self.zoom_lo > 0.0 && self.zoom_lo <= self.zoom_hi) {
            return Err(Error::Config(format!(
                "zoom range [{}, {}] invalid",
                self.zoom_lo, self.zoom_hi
            )));
        }
        Ok(())
    }
}

fn sample_bilinear_clamped(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let yc = y.clamp(0.0, (h - 1) as f32);
    let xc = x.clamp(0.0, (w - 1) as f32);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f32;
    let fx = xc - x0 as f32;
    let a = plane[y0 * w + x0];
    let b = plane[y0 * w + x1];
    let c = plane[y1 * w + x0];
    let d = plane[y1 * w + x1];
    a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + c * fy * (1.0 - fx) + d * fy * fx
}

/// Apply the augmentation policy to a `[c, h, w, 1]` stack of in-plane
/// slices; every channel gets the same transform, the label is untouched.
///
/// Draw order per call: flip coin; rotation coin, then angle if it fired;
/// translation coin, then dy, dx; zoom coin, then factor. Flip is an
/// exact width mirror; the rest combine into one bilinear resampling pass
/// with border replication.
pub fn augment(sample: &Tensor, aug: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    aug.validate()?;
    let shape = sample.shape().to_vec();
    if shape.len() != 4 || shape[3] != 1 {
        return Err(Error::Invalid(format!("augment wants [c, h, w, 1], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    let flip = rng.gen_bool(aug.flip_p as f64);
    let rot = if rng.gen_bool(aug.rot_p as f64) {
        Some(rng.gen_range(-aug.rot_deg..=aug.rot_deg))
    } else {
        None
    };
    let trans = if rng.gen_bool(aug.trans_p as f64) {
        let dy = rng.gen_range(-aug.trans_frac..=aug.trans_frac);
        let dx = rng.gen_range(-aug.trans_frac..=aug.trans_frac);
        Some((dy, dx))
    } else {
        None
    };
    let zoom = if rng.gen_bool(aug.zoom_p as f64) {
        Some(rng.gen_range(aug.zoom_lo..=aug.zoom_hi))
    } else {
        None
    };

    let mut data: Vec<f32> = if flip {
        let src = sample.data();
        let mut out = vec![0.0f32; src.len()];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ci * h + i) * w + j] = src[(ci * h + i) * w + (w - 1 - j)];
                }
            }
        }
        out
    } else {
        sample.data().to_vec()
    };

    if rot.is_some() || trans.is_some() || zoom.is_some() {
        let theta = rot.unwrap_or(0.0).to_radians();
        let (ty, tx) = match trans {
            Some((dy, dx)) => (dy * h as f32, dx * w as f32),
            None => (0.0, 0.0),
        };
        let scale = zoom.unwrap_or(1.0);
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        // Inverse of "rotate and zoom about the center, then translate".
        let (sin, cos) = (-theta).sin_cos();
        let src = data;
        data = vec![0.0f32; src.len()];
        for ci in 0..c {
            let plane = &src[ci * h * w..][..h * w];
            for i in 0..h {
                let py = i as f32 - cy - ty;
                for j in 0..w {
                    let px = j as f32 - cx - tx;
                    let qy = (cos * py - sin * px) / scale + cy;
                    let qx = (sin * py + cos * px) / scale + cx;
                    data[(ci * h + i) * w + j] = sample_bilinear_clamped(plane, h, w, qy, qx);
                }
            }
        }
    }
    Tensor::from_vec(shape, data).map_err(Error::from)
}

/// Index of slabs by class over a set of volumes, drawing each class with
/// probability 1/2 regardless of how imbalanced the classes are.
pub struct SlabSampler {
    neg: Vec<(usize, usize)>,
    pos: Vec<(usize, usize)>,
}

impl SlabSampler {
    /// `volume_ids` select into `samples`; stored indices are global.
    pub fn build(samples: &[(Volume, Vec<bool>)], volume_ids: &[usize]) -> Self {
        let mut neg = Vec::new();
        let mut pos = Vec::new();
        for &vi in volume_ids {
            for (si, &label) in samples[vi].1.iter().enumerate() {
                if label {
                    pos.push((vi, si));
                } else {
                    neg.push((vi, si));
                }
            }
        }
        SlabSampler { neg, pos }
    }

    /// (negatives, positives) available.
    pub fn class_counts(&self) -> (usize, usize) {
        (self.neg.len(), self.pos.len())
    }

    /// Draw (volume index, slice index, label). Both classes must be
    /// non-empty. Two draws: the class coin, then the within-class pick.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize, bool) {
        assert!(!self.neg.is_empty() && !self.pos.is_empty(), "sampler needs both classes");
        let positive = rng.gen_range(0..2u32) == 1;
        let list = if positive { &self.pos } else { &self.neg };
        let (vi, si) = list[rng.gen_range(0..list.len())];
        (vi, si, positive)
    }
}

#[derive(Clone, Debug)]
pub struct PredictorTrainConfig {
    pub iterations: u64,
    pub lr: f32,
    pub batch: usize,
    pub eval_every: u64,
    pub holdout_fraction: f32,
    pub slab_k: usize,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            iterations: 2000,
            lr: 5e-4,
            batch: 4,
            eval_every: 100,
            holdout_fraction: 0.2,
            slab_k: DEFAULT_SLAB_SLICES,
        }
    }
}

#[derive(Debug)]
pub struct PredictorTrainOutcome {
    /// The classifier with the best held-out F1, what inference should use.
    pub best: Classifier,
    /// Parameters as of the last iteration, what resume continues from.
    pub last: Classifier,
    pub best_f1: f32,
    pub log: Vec<TrainLogRow>,
    pub steps_run: u64,
}

fn validation_f1(
    clf: &Classifier,
    samples: &[(Volume, Vec<bool>)],
    volume_ids: &[usize],
    k: usize,
) -> Result<f32> {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for &vi in volume_ids {
        let (v, labels) = &samples[vi];
        let probs = volume_predictions(clf, v, k)?;
        for (p, &label) in probs.iter().zip(labels) {
            match (*p > 0.5, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    Ok(f1_from_counts(tp, fp, fneg) as f32)
}

/// Train the slice classifier on (volume, per-slice labels) pairs.
///
/// The last `holdout_fraction` of the volumes validate; the rest train.
/// Per iteration and batch item the draw order is: class coin, slab pick,
/// then the augmentation draws.
pub fn train_predictor(
    samples: &[(Volume, Vec<bool>)],
    cfg: &PredictorTrainConfig,
    aug: &AugmentationConfig,
    train_rng: &mut ChaCha8Rng,
    resume: Option<&Checkpoint>,
) -> Result<PredictorTrainOutcome> {
    aug.validate()?;
    if cfg.iterations == 0 || cfg.batch == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("predictor iterations, batch, eval_every must be >= 1".into()));
    }
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "predictor training needs at least 2 volumes, got {}",
            samples.len()
        )));
    }
    for (v, labels) in samples {
        if labels.len() != v.depth() {
            return Err(Error::Invalid(format!(
                "volume has {} slices but {} labels",
                v.depth(),
                labels.len()
            )));
        }
    }
    let n = samples.len();
    let held = ((cfg.holdout_fraction * n as f32).round() as usize).clamp(1, n - 1);
    let train_ids: Vec<usize> = (0..n - held).collect();
    let val_ids: Vec<usize> = (n - held..n).collect();

    let sampler = SlabSampler::build(samples, &train_ids);
    let (negs, poss) = sampler.class_counts();
    if poss == 0 || negs == 0 {
        return Err(Error::Config(format!(
            "training slices must contain both classes, got {poss} positive / {negs} negative"
        )));
    }

    let (mut clf, mut best, mut best_f1) = match resume {
        None => {
            let clf = Classifier::new(cfg.slab_k, train_rng)?;
            (clf.clone(), clf, -1.0f32)
        }
        Some(ckpt) => {
            let best = Classifier::from_checkpoint(ckpt)?;
            let mut clf = Classifier::new(best.k, &mut rng::substream(0, "clf.arch"))?;
            let names: Vec<String> = clf.params.iter().map(|p| p.name.clone()).collect();
            for name in &names {
                clf.params.set_value(name, ckpt.expect(&format!("clf.cur.{name}"))?.clone())?;
            }
            crate::io::restore_adam_state(&mut clf.params, ckpt, "clf.")?;
            rng::restore_stream_pos(train_rng, ckpt.expect("clf.train.rng_pos")?)?;
            let best_f1 = ckpt.expect("clf.best_f1")?.data()[0];
            (clf, best, best_f1)
        }
    };
    if clf.k != cfg.slab_k {
        return Err(Error::Invalid(format!(
            "checkpoint stacks {} slices, config wants {}",
            clf.k, cfg.slab_k
        )));
    }

    let mut log = Vec::new();
    let mut step = clf.params.step();
    while step < cfg.iterations {
        step += 1;
        let tape = Tape::new();
        let bound = clf.bind(&tape, true);
        let mut loss: Option<Var> = None;
        for _ in 0..cfg.batch {
            let (vi, si, positive) = sampler.draw(train_rng);
            let slab = stack_25d(&samples[vi].0, si, cfg.slab_k)?;
            let slab = augment(&slab, aug, train_rng)?;
            let sv = tape.constant(slab);
            let logit = bound.logit(&tape, sv)?;
            let target = tape.constant(Tensor::from_vec(vec![1], vec![positive as u8 as f32])?);
            let li = tape.bce_with_logits(logit, target)?;
            loss = Some(match loss {
                None => li,
                Some(acc) => tape.add(acc, li)?,
            });
        }
        let loss = tape.scale(loss.expect("batch >= 1"), 1.0 / cfg.batch as f32)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).map_err(|e| {
            Error::Numeric(format!("predictor training aborted at iteration {step}: {e}"))
        })?;
        clf.params.adam_step(&bound.vars, &grads, cfg.lr)?;

        let val = if step % cfg.eval_every == 0 || step == cfg.iterations {
            let f1 = validation_f1(&clf, samples, &val_ids, cfg.slab_k)?;
            if f1 > best_f1 {
                best_f1 = f1;
                best = clf.clone();
            }
            Some(f1)
        } else {
            None
        };
        log.push(TrainLogRow { step, loss: loss_value, val });
    }
    Ok(PredictorTrainOutcome { best, last: clf, best_f1, log, steps_run: step })
}

/// Training checkpoint: the best-F1 parameters under "clf.*" (what
/// inference loads), plus the live parameters, optimizer and rng state
/// needed to resume bit-exactly.
pub fn predictor_train_checkpoint(
    out: &PredictorTrainOutcome,
    train_rng: &ChaCha8Rng,
) -> Result<Checkpoint> {
    let mut c = out.best.to_checkpoint()?;
    c.insert_all(out.last.params.named_tensors("clf.cur."))?;
    c.insert_all(out.last.params.state_tensors("clf."))?;
    c.insert("clf.best_f1", Tensor::scalar(out.best_f1))?;
    c.insert("clf.train.rng_pos", rng::stream_pos_tensor(train_rng))?;
    Ok(c)
}
