use crate::real::{gemm, Real};
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// Fully connected layer: `[N, in] x [out, in]^T + [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "linear input must be [N, in]");
        assert_eq!(weight.rank(), 2, "linear weight must be [out, in]");
        let (n, fin) = (self.dim(0), self.dim(1));
        let fout = weight.dim(0);
        assert_eq!(weight.dim(1), fin, "linear feature mismatch");
        let mut out = vec![T::zero(); n * fout];
        gemm(n, fin, fout, self.data(), false, weight.data(), true, &mut out, false);
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[fout], "linear bias shape");
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            out,
            &[n, fout],
            parents,
            Box::new(move |p, _, g| {
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![T::zero(); n * fin];
                    gemm(n, fout, fin, g, false, p[1].data(), false, &mut gx, false);
                    gx
                });
                let gw = p[1].requires_grad().then(|| {
                    let mut gw = vec![T::zero(); fout * fin];
                    gemm(fout, n, fin, g, true, p[0].data(), false, &mut gw, false);
                    gw
                });
                let mut res = vec![gx, gw];
                if p.len() == 3 {
                    res.push(p[2].requires_grad().then(|| {
                        let mut gb = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn linear_forward_and_grads() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let w = Tensor::<f64>::leaf(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]);
        let b = Tensor::<f64>::leaf(vec![0.5, 0.0, -1.0], &[3]);
        let y = x.linear(&w, Some(&b));
        assert_eq!(y.data(), &[1.5, 2.0, 2.0, 3.5, 4.0, 6.0]);
        let g = y.sum_all().backward();
        assert_eq!(g.get(&x).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(g.get(&w).unwrap(), &[4.0, 6.0, 4.0, 6.0, 4.0, 6.0]);
        assert_eq!(g.get(&b).unwrap(), &[2.0, 2.0, 2.0]);
    }
}
