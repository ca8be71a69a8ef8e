//! Rectified flow: linear-interpolant regression training and explicit
//! Euler integration of the learned velocity field in both time
//! directions.
//!
//! Time convention, used everywhere: step index t in {0..T}, continuous
//! time u = t/T, u=0 is noise and u=1 is data. The forward step is
//! z + v(z, u) * dt; the backward step negates it, which inverts the
//! forward pass exactly for fields that are constant along the segment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::rng;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const HIDDEN_CHANNELS: usize = 32;

/// Discretization of u in [0, 1] into `t_steps` Euler steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    t_steps: usize,
}

impl TimeGrid {
    pub fn new(t_steps: usize) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Config("time grid needs at least 1 step".into()));
        }
        Ok(TimeGrid { t_steps })
    }

    pub fn steps(&self) -> usize {
        self.t_steps
    }

    pub fn dt(&self) -> f32 {
        1.0 / self.t_steps as f32
    }

    /// Continuous time of step index `t`.
    pub fn u(&self, t: usize) -> f32 {
        t as f32 / self.t_steps as f32
    }
}

/// Anything that can be integrated: maps (state, time) to a velocity of
/// the same shape. Implemented by the learned network and, in tests, by
/// closed-form fields.
pub trait Velocity {
    fn at(&self, z: &Tensor, u: f32) -> Result<Tensor>;
}

impl<F> Velocity for F
where
    F: Fn(&Tensor, f32) -> Result<Tensor>,
{
    fn at(&self, z: &Tensor, u: f32) -> Result<Tensor> {
        self(z, u)
    }
}

/// Three 3x3x3 convs with silu between, time entering as one constant
/// extra input channel: channels+1 -> 32 -> 32 -> channels.
#[derive(Clone, Debug)]
pub struct VelocityField {
    pub params: ParamSet,
    pub channels: usize,
}

pub struct BoundFlow {
    pub vars: Vec<Var>,
    channels: usize,
}

impl VelocityField {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = ParamSet::new();
        let cin = channels + 1;
        let h = HIDDEN_CHANNELS;
        p.push("w0", Tensor::randn(vec![h, cin, 3, 3, 3], he_std(cin), rng));
        p.push("b0", Tensor::zeros(vec![h]));
        p.push("w1", Tensor::randn(vec![h, h, 3, 3, 3], he_std(h), rng));
        p.push("b1", Tensor::zeros(vec![h]));
        p.push("w2", Tensor::randn(vec![channels, h, 3, 3, 3], he_std(h), rng));
        p.push("b2", Tensor::zeros(vec![channels]));
        VelocityField { params: p, channels }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundFlow {
        BoundFlow { vars: self.params.bind(tape, trainable), channels: self.channels }
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert("flow.channels", Tensor::scalar(self.channels as f32))?;
        c.insert_all(self.params.named_tensors("flow."))?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<VelocityField> {
        let channels = c.expect("flow.channels")?.data()[0] as usize;
        if channels == 0 {
            return Err(Error::Format("flow checkpoint has zero channels".into()));
        }
        let mut arch = rng::substream(0, "flow.arch");
        let mut vf = VelocityField::new(channels, &mut arch);
        let names: Vec<String> = vf.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            vf.params.set_value(&name, c.expect(&format!("flow.{name}"))?.clone())?;
        }
        Ok(vf)
    }
}

fn he_std(fan_in_channels: usize) -> f32 {
    (2.0 / (fan_in_channels as f32 * 27.0)).sqrt()
}

impl BoundFlow {
    /// Velocity of `z` at continuous time `u`, on the tape.
    pub fn velocity(&self, tape: &Tape, z: Var, u: f32) -> Result<Var> {
        let shape = tape.shape_of(z);
        if shape.len() != 4 || shape[0] != self.channels {
            return Err(Error::Invalid(format!(
                "velocity wants [{}, a, b, g], got {shape:?}",
                self.channels
            )));
        }
        let tch = tape.constant(Tensor::full(vec![1, shape[1], shape[2], shape[3]], u));
        let zin = tape.concat_channels(&[z, tch])?;
        let h = tape.conv3d(zin, self.vars[0], self.vars[1], 1)?;
        let h = tape.silu(h)?;
        let h = tape.conv3d(h, self.vars[2], self.vars[3], 1)?;
        let h = tape.silu(h)?;
        let v = tape.conv3d(h, self.vars[4], self.vars[5], 1)?;
        Ok(v)
    }
}

impl Velocity for VelocityField {
    fn at(&self, z: &Tensor, u: f32) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let zv = tape.constant(z.clone());
        let v = bound.velocity(&tape, zv, u)?;
        Ok(tape.value(v))
    }
}

/// The training interpolant: u * x1 + (1 - u) * x0.
pub fn interpolate(x0: &Tensor, x1: &Tensor, u: f32) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::Invalid(format!(
            "interpolate shapes differ: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Invalid(format!("interpolation time {u} outside [0, 1]")));
    }
    let data: Vec<f32> = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| u * b + (1.0 - u) * a)
        .collect();
    Ok(Tensor::from_vec(x0.shape().to_vec(), data).expect("same numel"))
}

/// Per-sample draws of the regression objective, exposed so oracles can
/// recompute the loss from the identical endpoint pair.
pub struct FlowDraw {
    pub x0: Tensor,
    pub u: f32,
}

/// Draw (x0, u) and build the squared-error loss against the constant
/// target x1 - x0 on the tape. Draw order: all of x0 in index order, then
/// u.
pub fn flow_loss_on_tape(
    tape: &Tape,
    bound: &BoundFlow,
    x1: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, FlowDraw)> {
    let x0 = Tensor::randn(x1.shape().to_vec(), 1.0, rng);
    let u: f32 = rng.gen_range(0.0..1.0);
    let xt = tape.constant(interpolate(&x0, x1, u)?);
    let target = tape.constant(x1.axpy(-1.0, &x0)?);
    let v = bound.velocity(tape, xt, u)?;
    let loss = tape.mse(v, target)?;
    Ok((loss, FlowDraw { x0, u }))
}

/// Loss value plus the draws that produced it (fresh tape, no gradients).
pub fn flow_loss_with_draws(
    vf: &VelocityField,
    x1: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, FlowDraw)> {
    let tape = Tape::new();
    let bound = vf.bind(&tape, false);
    let (loss, draw) = flow_loss_on_tape(&tape, &bound, x1, rng)?;
    Ok((tape.value(loss).data()[0], draw))
}

/// The regression objective ||(x1 - x0) - v(x_t, u)||^2 for one draw.
pub fn flow_loss(vf: &VelocityField, x1: &Tensor, rng: &mut ChaCha8Rng) -> Result<f32> {
    flow_loss_with_draws(vf, x1, rng).map(|(l, _)| l)
}

/// One explicit Euler step towards data: z + v(z, t/T) * dt.
pub fn forward_euler_step<V: Velocity>(
    field: &V,
    z: &Tensor,
    t: usize,
    grid: &TimeGrid,
) -> Result<Tensor> {
    if t >= grid.steps() {
        return Err(Error::Invalid(format!(
            "forward step index {t} outside 0..{}",
            grid.steps()
        )));
    }
    let v = field.at(z, grid.u(t))?;
    z.axpy(grid.dt(), &v).map_err(Error::from)
}

/// One explicit Euler step towards noise: z - v(z, t/T) * dt.
pub fn backward_euler_step<V: Velocity>(
    field: &V,
    z: &Tensor,
    t: usize,
    grid: &TimeGrid,
) -> Result<Tensor> {
    if t == 0 || t > grid.steps() {
        return Err(Error::Invalid(format!(
            "backward step index {t} outside 1..={}",
            grid.steps()
        )));
    }
    let v = field.at(z, grid.u(t))?;
    z.axpy(-grid.dt(), &v).map_err(Error::from)
}

/// Integrate noise at u=0 to a sample at u=1 with `grid.steps()` forward
/// Euler steps. Deterministic given (noise, field).
pub fn sample<V: Velocity>(field: &V, noise: &Tensor, grid: &TimeGrid) -> Result<Tensor> {
    let mut z = noise.clone();
    for t in 0..grid.steps() {
        z = forward_euler_step(field, &z, t, grid)?;
    }
    Ok(z)
}

#[derive(Clone, Debug)]
pub struct FlowTrainConfig {
    pub steps: u64,
    pub lr: f32,
    pub batch: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig { steps: 3000, lr: 5e-4, batch: 4 }
    }
}

pub struct FlowTrainOutcome {
    pub field: VelocityField,
    pub log: Vec<crate::latent::TrainLogRow>,
    pub steps_run: u64,
}

impl FlowTrainOutcome {
    /// Mean loss over the first `n` logged steps.
    pub fn head_mean_loss(&self, n: usize) -> f64 {
        let rows = &self.log[..n.min(self.log.len())];
        rows.iter().map(|r| r.loss as f64).sum::<f64>() / rows.len().max(1) as f64
    }

    /// Mean loss over the last `n` logged steps.
    pub fn tail_mean_loss(&self, n: usize) -> f64 {
        let at = self.log.len().saturating_sub(n);
        let rows = &self.log[at..];
        rows.iter().map(|r| r.loss as f64).sum::<f64>() / rows.len().max(1) as f64
    }
}

/// Train the velocity field on encoded latents. Per step and batch item,
/// the draw order is: volume pick, then x0, then u.
pub fn train_flow(
    latents: &[Tensor],
    cfg: &FlowTrainConfig,
    train_rng: &mut ChaCha8Rng,
    resume: Option<&Checkpoint>,
) -> Result<FlowTrainOutcome> {
    if latents.is_empty() {
        return Err(Error::Config("flow training needs at least 1 latent volume".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("flow batch size must be >= 1".into()));
    }
    let channels = latents[0].shape()[0];
    for l in latents {
        if l.shape() != latents[0].shape() {
            return Err(Error::Invalid(format!(
                "latent shapes differ: {:?} vs {:?}",
                l.shape(),
                latents[0].shape()
            )));
        }
    }
    let mut vf = match resume {
        None => VelocityField::new(channels, train_rng),
        Some(ckpt) => {
            let mut vf = VelocityField::from_checkpoint(ckpt)?;
            crate::io::restore_adam_state(&mut vf.params, ckpt, "flow.")?;
            rng::restore_stream_pos(train_rng, ckpt.expect("flow.train.rng_pos")?)?;
            vf
        }
    };
    if vf.channels != channels {
        return Err(Error::Invalid(format!(
            "checkpoint has {} channels, latents have {channels}",
            vf.channels
        )));
    }

    let mut log = Vec::new();
    let mut step = vf.params.step();
    while step < cfg.steps {
        step += 1;
        let tape = Tape::new();
        let bound = vf.bind(&tape, true);
        let mut loss: Option<Var> = None;
        for _ in 0..cfg.batch {
            let pick = train_rng.gen_range(0..latents.len());
            let (li, _) = flow_loss_on_tape(&tape, &bound, &latents[pick], train_rng)?;
            loss = Some(match loss {
                None => li,
                Some(acc) => tape.add(acc, li)?,
            });
        }
        let loss = tape.scale(loss.expect("batch >= 1"), 1.0 / cfg.batch as f32)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape
            .backward(loss)
            .map_err(|e| Error::Numeric(format!("flow training aborted at step {step}: {e}")))?;
        vf.params.adam_step(&bound.vars, &grads, cfg.lr)?;
        log.push(crate::latent::TrainLogRow { step, loss: loss_value, val: None });
    }
    Ok(FlowTrainOutcome { field: vf, log, steps_run: step })
}

/// Training checkpoint with optimizer and rng state for exact resume.
pub fn flow_train_checkpoint(vf: &VelocityField, train_rng: &ChaCha8Rng) -> Result<Checkpoint> {
    let mut c = vf.to_checkpoint()?;
    c.insert_all(vf.params.state_tensors("flow."))?;
    c.insert("flow.train.rng_pos", rng::stream_pos_tensor(train_rng))?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_field(shape: &[usize]) -> impl Fn(&Tensor, f32) -> Result<Tensor> {
        let shape = shape.to_vec();
        move |_z: &Tensor, _u: f32| Ok(Tensor::zeros(shape.clone()))
    }

    #[test]
    fn grid_arithmetic() {
        let g = TimeGrid::new(30).unwrap();
        assert_eq!(g.dt(), 1.0 / 30.0);
        assert_eq!(g.u(0), 0.0);
        assert_eq!(g.u(30), 1.0);
        assert_eq!(g.u(15), 0.5);
        assert!(TimeGrid::new(0).is_err());
    }

    #[test]
    fn interpolate_matches_closed_form() {
        let x0 = Tensor::from_vec(vec![3], vec![0.0, 2.0, -1.0]).unwrap();
        let x1 = Tensor::from_vec(vec![3], vec![2.0, 2.0, 3.0]).unwrap();
        assert!(interpolate(&x0, &x1, 0.0).unwrap().bits_eq(&x0));
        assert!(interpolate(&x0, &x1, 1.0).unwrap().bits_eq(&x1));
        let mid = interpolate(&x0, &x1, 0.5).unwrap();
        assert_eq!(mid.data(), &[1.0, 2.0, 1.0]);
        assert!(interpolate(&x0, &x1, 1.5).is_err());
        let bad = Tensor::zeros(vec![2]);
        assert!(interpolate(&x0, &bad, 0.5).is_err());
    }

    #[test]
    fn zero_field_keeps_state() {
        let mut r = rng::substream(1, "t");
        let z = Tensor::randn(vec![4, 2, 2, 2], 1.0, &mut r);
        let g = TimeGrid::new(30).unwrap();
        let f = zero_field(z.shape());
        assert!(forward_euler_step(&f, &z, 0, &g).unwrap().bits_eq(&z));
        assert!(backward_euler_step(&f, &z, 30, &g).unwrap().bits_eq(&z));
        assert!(sample(&f, &z, &g).unwrap().bits_eq(&z));
    }

    #[test]
    fn constant_field_steps_by_c_dt() {
        let g = TimeGrid::new(30).unwrap();
        let z = Tensor::zeros(vec![1, 2, 2, 2]);
        let c = 3.0f32;
        let f = move |_z: &Tensor, _u: f32| Ok(Tensor::full(vec![1, 2, 2, 2], c));
        let fwd = forward_euler_step(&f, &z, 7, &g).unwrap();
        for &v in fwd.data() {
            assert!((v - c / 30.0).abs() < 1e-7);
        }
        // Backward undoes forward exactly for a constant field.
        let back = backward_euler_step(&f, &fwd, 8, &g).unwrap();
        assert!(back.bits_eq(&z));
    }

    #[test]
    fn step_index_bounds_are_enforced() {
        let g = TimeGrid::new(10).unwrap();
        let z = Tensor::zeros(vec![1, 2, 2, 2]);
        let f = zero_field(z.shape());
        assert!(forward_euler_step(&f, &z, 10, &g).is_err());
        assert!(backward_euler_step(&f, &z, 0, &g).is_err());
        assert!(backward_euler_step(&f, &z, 11, &g).is_err());
        assert!(forward_euler_step(&f, &z, 9, &g).is_ok());
        assert!(backward_euler_step(&f, &z, 1, &g).is_ok());
    }

    #[test]
    fn network_velocity_shape_and_determinism() {
        let mut r = rng::substream(2, "t");
        let vf = VelocityField::new(4, &mut r);
        let z = Tensor::randn(vec![4, 4, 4, 4], 1.0, &mut r);
        let a = vf.at(&z, 0.25).unwrap();
        assert_eq!(a.shape(), z.shape());
        let b = vf.at(&z, 0.25).unwrap();
        assert!(a.bits_eq(&b));
        // Time conditioning must matter.
        let c = vf.at(&z, 0.75).unwrap();
        assert!(!a.bits_eq(&c));
        // Wrong channel count is caught.
        let bad = Tensor::zeros(vec![3, 4, 4, 4]);
        assert!(vf.at(&bad, 0.5).is_err());
    }

    #[test]
    fn constant_network_loss_has_closed_form() {
        let mut r = rng::substream(3, "t");
        let mut vf = VelocityField::new(2, &mut r);
        // Zero every weight, then set the output bias: v(z, u) = c.
        let names: Vec<String> = vf.params.iter().map(|p| p.name.clone()).collect();
        for n in &names {
            let shape = vf.params.get(n).unwrap().shape().to_vec();
            vf.params.set_value(n, Tensor::zeros(shape)).unwrap();
        }
        let c = [0.3f32, -0.2];
        vf.params.set_value("b2", Tensor::from_vec(vec![2], c.to_vec()).unwrap()).unwrap();

        let x1 = Tensor::rand_uniform(vec![2, 2, 2, 2], -1.0, 1.0, &mut r);
        let mut draw_rng = rng::substream(9, "loss");
        let (loss, draw) = flow_loss_with_draws(&vf, &x1, &mut draw_rng).unwrap();
        // Oracle: mean over elements of (x1 - x0 - c)^2 in f64.
        let mut acc = 0.0f64;
        for (i, (&a, &b)) in x1.data().iter().zip(draw.x0.data()).enumerate() {
            let ch = i / 8;
            let d = (a - b - c[ch]) as f64;
            acc += d * d;
        }
        let oracle = acc / x1.numel() as f64;
        assert!(
            (loss as f64 - oracle).abs() <= 1e-6 * oracle.max(1.0),
            "loss {loss} vs oracle {oracle}"
        );
    }

    #[test]
    fn training_smoke_decreases_loss() {
        let mut r = rng::substream(4, "t");
        let latents: Vec<Tensor> = (0..3)
            .map(|_| Tensor::rand_uniform(vec![2, 4, 4, 4], -1.0, 1.0, &mut r))
            .collect();
        let cfg = FlowTrainConfig { steps: 60, ..FlowTrainConfig::default() };
        let mut tr = rng::substream(5, "train.flow");
        let out = train_flow(&latents, &cfg, &mut tr, None).unwrap();
        assert_eq!(out.steps_run, 60);
        assert!(out.log.iter().all(|row| row.loss.is_finite()));
        assert!(
            out.tail_mean_loss(10) < out.head_mean_loss(10),
            "loss did not decrease: {} -> {}",
            out.head_mean_loss(10),
            out.tail_mean_loss(10)
        );
    }

    #[test]
    fn resume_reproduces_next_step_exactly() {
        let mut r = rng::substream(6, "t");
        let latents: Vec<Tensor> = (0..3)
            .map(|_| Tensor::rand_uniform(vec![2, 4, 4, 4], -1.0, 1.0, &mut r))
            .collect();
        let mut cfg = FlowTrainConfig { steps: 10, ..FlowTrainConfig::default() };
        let mut full_rng = rng::substream(7, "train.flow");
        let full = train_flow(&latents, &cfg, &mut full_rng, None).unwrap();

        cfg.steps = 6;
        let mut part_rng = rng::substream(7, "train.flow");
        let part = train_flow(&latents, &cfg, &mut part_rng, None).unwrap();
        let ckpt = flow_train_checkpoint(&part.field, &part_rng).unwrap();
        cfg.steps = 10;
        let mut res_rng = rng::substream(7, "train.flow");
        let resumed = train_flow(&latents, &cfg, &mut res_rng, Some(&ckpt)).unwrap();

        assert_eq!(resumed.field.checksum(), full.field.checksum());
        let tail_full: Vec<_> = full.log.iter().filter(|row| row.step > 6).collect();
        let tail_res: Vec<_> = resumed.log.iter().filter(|row| row.step > 6).collect();
        assert_eq!(tail_full.len(), tail_res.len());
        for (a, b) in tail_full.iter().zip(&tail_res) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "loss differs at step {}", a.step);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_velocity() {
        let mut r = rng::substream(8, "t");
        let vf = VelocityField::new(4, &mut r);
        let back = VelocityField::from_checkpoint(&vf.to_checkpoint().unwrap()).unwrap();
        assert_eq!(vf.checksum(), back.checksum());
        let z = Tensor::randn(vec![4, 4, 4, 4], 1.0, &mut r);
        assert!(vf.at(&z, 0.3).unwrap().bits_eq(&back.at(&z, 0.3).unwrap()));
    }
}
