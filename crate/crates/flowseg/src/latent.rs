//! Autoencoder giving the latent space the flow runs in, plus the
//! [0,255] <-> [-1,1] intensity scaling used around every network.
//!
//! Encoder: two stride-2 3x3x3 convs, channels 1 -> 8 -> 4, silu between,
//! raw (unsquashed) latent. Decoder mirrors with two 2x2x2 transposed
//! convs, channels 4 -> 8 -> 1, and squashes the output into [-1, 1].
//! An identity mode passes volumes through untouched so guidance can run
//! directly in pixel space.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::phantom::Volume;
use crate::rng;
use crate::tensor::{Gradients, ParamSet, Tape, Tensor, Var};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE: usize = 4;

/// Map display intensities [0, 255] onto the network range [-1, 1].
pub fn display_to_unit(v: &Volume) -> Tensor {
    let data: Vec<f32> = v.values.iter().map(|&x| x / 127.5 - 1.0).collect();
    Tensor::from_vec(vec![1, v.dims[0], v.dims[1], v.dims[2]], data).expect("volume numel")
}

/// Map a `[1, d0, d1, d2]` tensor in [-1, 1] back onto display units.
pub fn unit_to_display(t: &Tensor, spacing: [f32; 3]) -> Result<Volume> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Invalid(format!("expected [1, d0, d1, d2] tensor, got {s:?}")));
    }
    let values: Vec<f32> = t.data().iter().map(|&x| (x + 1.0) * 127.5).collect();
    Volume::with_values([s[1], s[2], s[3]], spacing, values)
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub enc: ParamSet,
    pub dec: ParamSet,
    pub identity: bool,
}

/// Tape-bound parameter handles for one forward/backward pass.
pub struct BoundAe {
    pub enc: Vec<Var>,
    pub dec: Vec<Var>,
    identity: bool,
}

impl Autoencoder {
    /// Fresh trainable parameters; draws consume `rng` in a fixed order.
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut enc = ParamSet::new();
        // He-style scaling: std = sqrt(2 / fan_in). The first layer sees
        // raw volumes, where a wide 5^3 window pays for itself on the
        // sharp air/tissue boundaries.
        enc.push("w0", Tensor::randn(vec![8, 1, 5, 5, 5], (2.0f32 / 125.0).sqrt(), rng));
        enc.push("b0", Tensor::zeros(vec![8]));
        enc.push("w1", Tensor::randn(vec![4, 8, 3, 3, 3], (2.0f32 / (8.0 * 27.0)).sqrt(), rng));
        enc.push("b1", Tensor::zeros(vec![4]));
        let mut dec = ParamSet::new();
        // Overlapping stride-2 transposed convs (kernel 4): each output
        // voxel receives (k/stride)^3 = 8 taps per input channel.
        dec.push("w0", Tensor::randn(vec![4, 8, 4, 4, 4], (2.0f32 / 32.0).sqrt(), rng));
        dec.push("b0", Tensor::zeros(vec![8]));
        dec.push("w1", Tensor::randn(vec![8, 1, 4, 4, 4], (2.0f32 / 64.0).sqrt(), rng));
        dec.push("b1", Tensor::zeros(vec![1]));
        Autoencoder { enc, dec, identity: false }
    }

    /// Pixel-space passthrough: encode and decode are the identity.
    pub fn identity_mode() -> Self {
        Autoencoder { enc: ParamSet::new(), dec: ParamSet::new(), identity: true }
    }

    pub fn latent_channels(&self) -> usize {
        if self.identity {
            1
        } else {
            LATENT_CHANNELS
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundAe {
        BoundAe {
            enc: self.enc.bind(tape, trainable),
            dec: self.dec.bind(tape, trainable),
            identity: self.identity,
        }
    }

    /// Pure encode: `[1, H, W, D]` -> `[4, H/4, W/4, D/4]` (identity mode
    /// returns the input unchanged).
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let z = bound.encode(&tape, xv)?;
        Ok(tape.value(z))
    }

    /// Pure decode, the inverse shape map of [`Self::encode_tensor`].
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let zv = tape.constant(z.clone());
        let x = bound.decode(&tape, zv)?;
        Ok(tape.value(x))
    }

    /// Combined parameter checksum; guidance asserts it is unchanged.
    pub fn checksum(&self) -> u64 {
        self.enc.checksum() ^ self.dec.checksum().rotate_left(1) ^ u64::from(self.identity)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert("ae.identity", Tensor::scalar(if self.identity { 1.0 } else { 0.0 }))?;
        c.insert_all(self.enc.named_tensors("ae.enc."))?;
        c.insert_all(self.dec.named_tensors("ae.dec."))?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Autoencoder> {
        let identity = c.expect("ae.identity")?.data()[0] != 0.0;
        if identity {
            return Ok(Autoencoder::identity_mode());
        }
        let mut seed = rng::substream(0, "ae.arch");
        let mut ae = Autoencoder::new(&mut seed);
        for (set, prefix) in [(&mut ae.enc, "ae.enc."), (&mut ae.dec, "ae.dec.")] {
            let names: Vec<String> = set.iter().map(|p| p.name.clone()).collect();
            for name in names {
                set.set_value(&name, c.expect(&format!("{prefix}{name}"))?.clone())?;
            }
        }
        Ok(ae)
    }
}

impl BoundAe {
    pub fn encode(&self, tape: &Tape, x: Var) -> Result<Var> {
        if self.identity {
            return Ok(x);
        }
        let shape = tape.shape_of(x);
        if shape.len() != 4 || shape[0] != 1 {
            return Err(Error::Invalid(format!("encode wants [1, H, W, D], got {shape:?}")));
        }
        for &d in &shape[1..] {
            if d % DOWNSAMPLE != 0 {
                return Err(Error::Invalid(format!(
                    "encode dims {shape:?} must be divisible by {DOWNSAMPLE}"
                )));
            }
        }
        let h = tape.conv3d(x, self.enc[0], self.enc[1], 2)?;
        let h = tape.silu(h)?;
        let z = tape.conv3d(h, self.enc[2], self.enc[3], 2)?;
        Ok(z)
    }

    pub fn decode(&self, tape: &Tape, z: Var) -> Result<Var> {
        if self.identity {
            return Ok(z);
        }
        let shape = tape.shape_of(z);
        if shape.len() != 4 || shape[0] != LATENT_CHANNELS {
            return Err(Error::Invalid(format!(
                "decode wants [{LATENT_CHANNELS}, h, w, d], got {shape:?}"
            )));
        }
        let h = tape.transposed_conv3d(z, self.dec[0], self.dec[1], 2)?;
        let h = tape.silu(h)?;
        let x = tape.transposed_conv3d(h, self.dec[2], self.dec[3], 2)?;
        // Squash onto (-1, 1): 2 * sigmoid(x) - 1.
        let s = tape.sigmoid(x)?;
        let s2 = tape.scale(s, 2.0)?;
        let one = tape.constant(Tensor::full(tape.shape_of(s2), 1.0));
        tape.sub(s2, one).map_err(Error::from)
    }
}

#[derive(Clone, Debug)]
pub struct AeTrainConfig {
    pub steps: u64,
    pub lr: f32,
    pub batch: usize,
    /// Stop early once held-out MSE reaches this.
    pub target_mse: f32,
    pub eval_every: u64,
    /// Fraction of the provided volumes held out for the MSE check.
    pub holdout_fraction: f32,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            // Budget sized so the held-out target is what actually stops
            // training; on the default corpus the 0.01 bar lands near
            // step 6000.
            steps: 8000,
            lr: 5e-4,
            batch: 4,
            target_mse: 0.01,
            eval_every: 100,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f32,
    pub val: Option<f32>,
}

pub struct AeTrainOutcome {
    pub ae: Autoencoder,
    pub log: Vec<TrainLogRow>,
    pub final_val_mse: f32,
    pub steps_run: u64,
}

/// Mean reconstruction MSE over `vols` (each `[1,H,W,D]`, in [-1,1]).
pub fn reconstruction_mse(ae: &Autoencoder, vols: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0f64;
    for v in vols {
        let z = ae.encode_tensor(v)?;
        let r = ae.decode_tensor(&z)?;
        let mut sq = 0.0f64;
        for (a, b) in r.data().iter().zip(v.data()) {
            let d = (*a - *b) as f64;
            sq += d * d;
        }
        acc += sq / v.numel() as f64;
    }
    Ok(acc / vols.len() as f64)
}

/// Train on unit-scaled volume tensors. The last `holdout_fraction` of
/// `vols` (at least one volume) is never trained on and provides the
/// early-stop MSE. Pass the checkpoint of an interrupted run as `resume`
/// to continue its optimizer and rng state exactly.
pub fn train_autoencoder(
    vols: &[Tensor],
    cfg: &AeTrainConfig,
    train_rng: &mut ChaCha8Rng,
    resume: Option<&Checkpoint>,
) -> Result<AeTrainOutcome> {
    if vols.len() < 2 {
        return Err(Error::Config(format!(
            "autoencoder training needs at least 2 volumes, got {}",
            vols.len()
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("autoencoder batch size must be >= 1".into()));
    }
    let holdout = ((vols.len() as f32 * cfg.holdout_fraction).round() as usize)
        .clamp(1, vols.len() - 1);
    let split = vols.len() - holdout;
    let (train, held) = vols.split_at(split);

    let mut ae = match resume {
        None => Autoencoder::new(train_rng),
        Some(ckpt) => {
            let mut ae = Autoencoder::from_checkpoint(ckpt)?;
            crate::io::restore_adam_state(&mut ae.enc, ckpt, "ae.enc.")?;
            crate::io::restore_adam_state(&mut ae.dec, ckpt, "ae.dec.")?;
            rng::restore_stream_pos(train_rng, ckpt.expect("ae.train.rng_pos")?)?;
            ae
        }
    };

    let mut log = Vec::new();
    let mut val = f64::INFINITY;
    let start_step = ae.enc.step();
    let mut step = start_step;
    while step < cfg.steps {
        step += 1;
        let tape = Tape::new();
        let bound = ae.bind(&tape, true);
        let mut loss: Option<Var> = None;
        for _ in 0..cfg.batch {
            let pick = rand::Rng::gen_range(train_rng, 0..train.len());
            let x = tape.constant(train[pick].clone());
            let z = bound.encode(&tape, x)?;
            let r = bound.decode(&tape, z)?;
            let li = tape.mse(r, x)?;
            loss = Some(match loss {
                None => li,
                Some(acc) => tape.add(acc, li)?,
            });
        }
        let loss = tape.scale(loss.expect("batch >= 1"), 1.0 / cfg.batch as f32)?;
        let loss_value = tape.value(loss).data()[0];
        let grads: Gradients = tape
            .backward(loss)
            .map_err(|e| Error::Numeric(format!("autoencoder training aborted at step {step}: {e}")))?;
        ae.enc.adam_step(&bound.enc, &grads, cfg.lr)?;
        ae.dec.adam_step(&bound.dec, &grads, cfg.lr)?;

        let at_eval = step % cfg.eval_every == 0 || step == cfg.steps;
        if at_eval {
            val = reconstruction_mse(&ae, held)?;
            log.push(TrainLogRow { step, loss: loss_value, val: Some(val as f32) });
            if val <= cfg.target_mse as f64 {
                break;
            }
        } else {
            log.push(TrainLogRow { step, loss: loss_value, val: None });
        }
    }
    if log.is_empty() || log.last().map(|r| r.val.is_none()) == Some(true) {
        val = reconstruction_mse(&ae, held)?;
        log.push(TrainLogRow { step, loss: f32::NAN, val: Some(val as f32) });
    }
    Ok(AeTrainOutcome { ae, log, final_val_mse: val as f32, steps_run: step })
}

/// Full training checkpoint: parameters, optimizer state, and the
/// training stream position, enough to resume bit-exactly.
pub fn ae_train_checkpoint(ae: &Autoencoder, train_rng: &ChaCha8Rng) -> Result<Checkpoint> {
    let mut c = ae.to_checkpoint()?;
    c.insert_all(ae.enc.state_tensors("ae.enc."))?;
    c.insert_all(ae.dec.state_tensors("ae.dec."))?;
    c.insert("ae.train.rng_pos", rng::stream_pos_tensor(train_rng))?;
    Ok(c)
}
