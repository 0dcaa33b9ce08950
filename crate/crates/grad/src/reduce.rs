use crate::elementwise::{expand, reduce_to};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// Sum of all elements as a shape-`[]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            &[],
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::of(self.numel() as f64);
        self.sum_all().mul_scalar(T::one() / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let mut target = self.shape().to_vec();
        for &a in axes {
            assert!(a < target.len(), "axis {a} out of range for {:?}", self.shape());
            target[a] = 1;
        }
        let src = self.shape().to_vec();
        let data = reduce_to(self.data(), &src, &target);
        let tgt = target.clone();
        Tensor::from_op(
            data,
            &target,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(expand(g, &tgt, &src))]),
        )
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdim(axes).mul_scalar(T::one() / T::of(count as f64))
    }

    /// Explicit broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        let src = self.shape().to_vec();
        let out = shape.to_vec();
        let data = expand(self.data(), &src, &out);
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(reduce_to(g, &out, &src))]),
        )
    }
}
