use crate::real::Real;
use crate::tensor::Tensor;

/// Named, updatable model parameter.
///
/// The current value lives in a leaf [`Tensor`]; every update swaps in a new
/// leaf, so gradients computed against an older graph never alias the new
/// value. A frozen parameter is exposed as a constant and never receives a
/// gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    name: String,
    tensor: Tensor<T>,
    frozen: bool,
    lr_scale: f64,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Self {
        Param {
            name: name.into(),
            tensor: Tensor::leaf(data, shape),
            frozen: false,
            lr_scale: 1.0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Replaces the value, keeping shape and trainability.
    pub fn set_data(&mut self, data: Vec<T>) {
        let shape = self.tensor.shape().to_vec();
        self.tensor = if self.frozen {
            Tensor::new(data, &shape)
        } else {
            Tensor::leaf(data, &shape)
        };
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.tensor = self.tensor.detach();
    }

    /// Multiplier applied to the optimizer learning rate for this parameter.
    pub fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }
}
