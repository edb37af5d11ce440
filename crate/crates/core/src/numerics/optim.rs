use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Trainable tensor with its accumulated gradient and update constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Per-filter L2 bound, applied along the leading axis after each step.
    pub max_norm: Option<T>,
    /// L2 coefficient: the gradient gains `weight_decay * value`.
    pub weight_decay: T,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
            max_norm: None,
            weight_decay: T::zero(),
        }
    }

    pub fn with_max_norm(mut self, max_norm: T) -> Self {
        self.max_norm = Some(max_norm);
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: T) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn accumulate_grad(&mut self, grad: &Tensor<T>) {
        assert_eq!(grad.shape(), self.value.shape(), "gradient shape for {}", self.name);
        match &mut self.grad {
            Some(g) => g.add_assign(grad),
            None => self.grad = Some(grad.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Half the weighted squared norm; the loss term matching `weight_decay`.
    pub fn l2_penalty(&self) -> T {
        lit::<T>(0.5) * self.weight_decay * self.value.sq_norm()
    }

    /// Rescale every leading-axis slice whose L2 norm exceeds `max_norm`.
    pub fn apply_max_norm(&mut self) {
        let Some(limit) = self.max_norm else { return };
        if self.value.shape().is_empty() {
            return;
        }
        let filters = self.value.shape()[0];
        for f in 0..filters {
            let slice = self.value.slice_outer_mut(f);
            let norm = slice.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > limit {
                let scale = limit / norm;
                slice.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

/// RMSProp with decoupled accumulator per parameter.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub learning_rate: T,
    pub decay: T,
    pub epsilon: T,
    accumulators: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(learning_rate: f64) -> Self {
        RmsProp {
            learning_rate: lit(learning_rate),
            decay: lit(0.95),
            epsilon: lit(1e-6),
            accumulators: Vec::new(),
        }
    }

    pub fn with_constants(mut self, decay: f64, epsilon: f64) -> Self {
        self.decay = lit(decay);
        self.epsilon = lit(epsilon);
        self
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.accumulators
    }

    /// Apply one update to every parameter, in a fixed order. Parameters must
    /// be presented in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.accumulators.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.accumulators.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Precondition(format!("missing gradient for parameter {}", p.name)));
        }
        let one = T::one();
        for (param, acc) in params.iter_mut().zip(&mut self.accumulators) {
            if acc.shape() != param.shape() {
                return Err(Error::shape("optimizer_step", format!("accumulator for {}", param.name)));
            }
            let grad = param.grad.as_ref().expect("checked above");
            let wd = param.weight_decay;
            let values = param.value.data_mut();
            for ((w, &g), ms) in values.iter_mut().zip(grad.data()).zip(acc.data_mut()) {
                let g = g + wd * *w;
                *ms = self.decay * *ms + (one - self.decay) * g * g;
                *w -= self.learning_rate * g / (ms.sqrt() + self.epsilon);
            }
            param.apply_max_norm();
        }
        Ok(())
    }
}
