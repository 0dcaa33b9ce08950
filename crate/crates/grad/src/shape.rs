use crate::real::Real;
use crate::tensor::Tensor;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            crate::numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            self.to_vec(),
            shape,
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec())]),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= n, "narrow {start}+{len} exceeds axis size {n}");
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            data,
            &shape,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut full = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    full[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(full)]
            }),
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn cat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "cat of zero tensors");
        let first = parts[0].shape();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "cat rank mismatch");
            for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(d == axis || a == b, "cat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let (outer, _, inner) = split_at_axis(first, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&p.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Tensor::from_op(
            data,
            &shape,
            parents,
            Box::new(move |p, _, g| {
                let mut grads: Vec<Vec<T>> = sizes
                    .iter()
                    .map(|&s| Vec::with_capacity(outer * s * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &s) in grads.iter_mut().zip(&sizes) {
                        gi.extend_from_slice(&g[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(p)
                    .map(|(gi, pi)| pi.requires_grad().then_some(gi))
                    .collect()
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of an `[N, C, H, W]` tensor.
    pub fn upsample_nearest2x(&self) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "upsample expects NCHW");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.data();
        let mut data = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    d[y * w2 + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        Tensor::from_op(
            data,
            &[n, c, h2, w2],
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let gd = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for x in 0..w2 {
                            gd[(y / 2) * w + x / 2] += gs[y * w2 + x];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn narrow_and_cat_invert() {
        let x = Tensor::<f64>::new((0..24).map(f64::from).collect(), &[2, 3, 4]);
        let a = x.narrow(1, 0, 1);
        let b = x.narrow(1, 1, 2);
        let y = Tensor::cat(&[&a, &b], 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cat_routes_gradients() {
        let a = Tensor::<f64>::leaf(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::<f64>::leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let y = Tensor::cat(&[&a, &b], 0);
        let w = Tensor::new((1..=6).map(f64::from).collect(), &[3, 2]);
        let g = y.mul(&w).sum_all().backward();
        assert_eq!(g.get(&a).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.get(&b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = x.upsample_nearest2x();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[..4], [1.0, 1.0, 2.0, 2.0]);
        let g = y.sum_all().backward();
        assert_eq!(g.get(&x).unwrap(), &[4.0; 4]);
    }
}
