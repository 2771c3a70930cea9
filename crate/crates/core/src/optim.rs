//! RMSprop and Adam over named parameter sets.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::mapnet::{MapParams, W1_ID, W2_ID};
use crate::tensor::{GradientMap, ParamId, Tensor, TensorError};

/// A fixed collection of trainable tensors.
pub trait ParamSet {
    fn entries(&self) -> Vec<(ParamId, &'static str, &Tensor)>;
    fn entries_mut(&mut self) -> Vec<(ParamId, &'static str, &mut Tensor)>;
}

impl ParamSet for MapParams {
    fn entries(&self) -> Vec<(ParamId, &'static str, &Tensor)> {
        vec![(W1_ID, "w1", &self.w1), (W2_ID, "w2", &self.w2)]
    }

    fn entries_mut(&mut self) -> Vec<(ParamId, &'static str, &mut Tensor)> {
        vec![(W1_ID, "w1", &mut self.w1), (W2_ID, "w2", &mut self.w2)]
    }
}

fn grad_for(grads: &GradientMap, id: ParamId, param: &Tensor) -> Result<Tensor> {
    match grads.get(id) {
        Some(g) if g.shape() != param.shape() => Err(TensorError::Shape {
            op: "optimizer step",
            lhs: param.shape().to_vec(),
            rhs: g.shape().to_vec(),
        }
        .into()),
        Some(g) => Ok(g.clone()),
        None => Ok(Tensor::zeros(param.shape())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub epsilon: f64,
    pub(crate) square_avg: BTreeMap<ParamId, Vec<f64>>,
    pub(crate) steps: u64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            decay: 0.99,
            epsilon: 1e-8,
            square_avg: BTreeMap::new(),
            steps: 0,
        }
    }
}

impl RmsProp {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &GradientMap, lr: f64) -> Result<()> {
        for (id, _, param) in params.entries_mut() {
            let g = grad_for(grads, id, param)?;
            let avg = self
                .square_avg
                .entry(id)
                .or_insert_with(|| vec![0.0; param.len()]);
            for ((p, v), g) in param.data_mut().iter_mut().zip(avg.iter_mut()).zip(g.data()) {
                *v = self.decay * *v + (1.0 - self.decay) * g * g;
                *p -= lr * g / (v.sqrt() + self.epsilon);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub(crate) first: BTreeMap<ParamId, Vec<f64>>,
    pub(crate) second: BTreeMap<ParamId, Vec<f64>>,
    pub(crate) steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &GradientMap, lr: f64) -> Result<()> {
        let t = self.steps + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (id, _, param) in params.entries_mut() {
            let g = grad_for(grads, id, param)?;
            let m = self.first.entry(id).or_insert_with(|| vec![0.0; param.len()]);
            let v = self.second.entry(id).or_insert_with(|| vec![0.0; param.len()]);
            for (((p, m), v), g) in param
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        self.steps = t;
        Ok(())
    }
}
