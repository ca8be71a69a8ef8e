//! Parameters and the Adam update.
//!
//! A `ParamSet` owns named weights plus their Adam moments in insertion
//! order. Each training step re-binds the set to a fresh tape; `adam_step`
//! then consumes that binding's gradients. Moments live with the parameters
//! so checkpoints can carry full optimizer state for exact resume.

use super::tape::{Gradients, Tape, Var};
use super::{Tensor, TensorError, TensorResult};

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPSILON: f32 = 1e-8;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Parameter { name: name.into(), value, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Ordered collection of parameters with a shared Adam step counter.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "duplicate parameter name '{name}'"
        );
        self.params.push(Parameter::new(name, value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Register every parameter on `tape`, in order. Trainable bindings
    /// receive gradients; frozen ones are constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone().with_grad())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8) over all
    /// parameters. `bound` must be the binding returned by [`Self::bind`]
    /// for the tape that produced `grads`; a missing gradient is an error.
    /// Moments are updated in place and the shared step count advances by 1.
    pub fn adam_step(&mut self, bound: &[Var], grads: &Gradients, lr: f32) -> TensorResult<()> {
        if bound.len() != self.params.len() {
            return Err(TensorError::Invalid(format!(
                "adam_step: {} bound vars for {} parameters",
                bound.len(),
                self.params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (p, var) in self.params.iter_mut().zip(bound) {
            let g = grads.expect(*var, &p.name)?;
            let mut data = p.value.data().to_vec();
            for (i, gi) in g.data().iter().enumerate() {
                p.m[i] = BETA1 * p.m[i] + (1.0 - BETA1) * gi;
                p.v[i] = BETA2 * p.v[i] + (1.0 - BETA2) * gi * gi;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
            p.value = Tensor::from_vec(p.value.shape().to_vec(), data)?;
        }
        Ok(())
    }

    /// Model tensors as `(name, tensor)` pairs, prefixed.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
            .collect()
    }

    /// Optimizer state (moments) and step counter, for exact resume.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for p in &self.params {
            let shape = p.value.shape().to_vec();
            out.push((
                format!("{prefix}opt.{}.m", p.name),
                Tensor::from_vec(shape.clone(), p.m.clone()).expect("moment shape"),
            ));
            out.push((
                format!("{prefix}opt.{}.v", p.name),
                Tensor::from_vec(shape, p.v.clone()).expect("moment shape"),
            ));
        }
        out.push((format!("{prefix}opt.step"), Tensor::scalar(self.step as f32)));
        out
    }

    /// Overwrite a parameter's value; shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> TensorResult<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_value",
                detail: format!("'{name}': {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Restore optimizer state written by [`Self::state_tensors`].
    pub fn set_state(&mut self, name: &str, m: &Tensor, v: &Tensor) -> TensorResult<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter '{name}'")))?;
        if m.numel() != p.m.len() || v.numel() != p.v.len() {
            return Err(TensorError::Shape {
                op: "set_state",
                detail: format!("'{name}': moment length mismatch"),
            });
        }
        p.m.copy_from_slice(m.data());
        p.v.copy_from_slice(v.data());
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// FNV-1a over names and value bits; order-sensitive. Two sets collide
    /// only if they hold identical parameters in identical order, so this is
    /// the frozen-weights witness used around guidance.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
