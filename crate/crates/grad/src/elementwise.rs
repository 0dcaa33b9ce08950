use crate::real::Real;
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `src` (right-aligned inside `out`), zero along broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    strides
}

/// Calls `f(out_index, src_offset)` for every element of `out`.
fn for_each_offset(src: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(src, out);
    let total = crate::numel(out);
    if out.is_empty() {
        if total == 1 {
            f(0, 0);
        }
        return;
    }
    let last = out.len() - 1;
    let inner = out[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; out.len()];
    let mut base = 0usize;
    let mut o = 0usize;
    while o < total {
        for j in 0..inner {
            f(o + j, base + j * inner_stride);
        }
        o += inner;
        // advance the outer multi-index
        let mut axis = last;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < out[axis] {
                break;
            }
            base -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Expands `data` of shape `src` to shape `out`.
pub(crate) fn expand<T: Real>(data: &[T], src: &[usize], out: &[usize]) -> Vec<T> {
    if src == out {
        return data.to_vec();
    }
    let mut res = vec![T::zero(); crate::numel(out)];
    for_each_offset(src, out, |o, s| res[o] = data[s]);
    res
}

/// Sums `data` of shape `out` down to the broadcastable shape `target`.
pub(crate) fn reduce_to<T: Real>(data: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return data.to_vec();
    }
    let mut res = vec![T::zero(); crate::numel(target)];
    for_each_offset(target, out, |o, s| res[s] += data[o]);
    res
}

fn binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> (Vec<T>, Vec<usize>) {
    let shape = broadcast_shape(a.shape(), b.shape());
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return (data, shape);
    }
    let n = crate::numel(&shape);
    let ea;
    let eb;
    let xa = if a.shape() == shape.as_slice() {
        a.data()
    } else {
        ea = expand(a.data(), a.shape(), &shape);
        &ea
    };
    let xb = if b.shape() == shape.as_slice() {
        b.data()
    } else {
        eb = expand(b.data(), b.shape(), &shape);
        &eb
    };
    let data = (0..n).map(|i| f(xa[i], xb[i])).collect();
    (data, shape)
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = binary(self, other, |x, y| x + y);
        let out_shape = shape.clone();
        Tensor::from_op(
            data,
            &shape,
            vec![self.clone(), other.clone()],
            Box::new(move |p, _, g| {
                vec![
                    p[0].requires_grad().then(|| reduce_to(g, &out_shape, p[0].shape())),
                    p[1].requires_grad().then(|| reduce_to(g, &out_shape, p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = binary(self, other, |x, y| x - y);
        let out_shape = shape.clone();
        Tensor::from_op(
            data,
            &shape,
            vec![self.clone(), other.clone()],
            Box::new(move |p, _, g| {
                vec![
                    p[0].requires_grad().then(|| reduce_to(g, &out_shape, p[0].shape())),
                    p[1].requires_grad().then(|| {
                        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                        reduce_to(&neg, &out_shape, p[1].shape())
                    }),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = binary(self, other, |x, y| x * y);
        let out_shape = shape.clone();
        Tensor::from_op(
            data,
            &shape,
            vec![self.clone(), other.clone()],
            Box::new(move |p, _, g| {
                let side = |mine: usize, theirs: usize| {
                    p[mine].requires_grad().then(|| {
                        let o = expand(p[theirs].data(), p[theirs].shape(), &out_shape);
                        let prod: Vec<T> = g.iter().zip(&o).map(|(&a, &b)| a * b).collect();
                        reduce_to(&prod, &out_shape, p[mine].shape())
                    })
                };
                vec![side(0, 1), side(1, 0)]
            }),
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        let (data, shape) = binary(self, other, |x, y| x / y);
        let out_shape = shape.clone();
        Tensor::from_op(
            data,
            &shape,
            vec![self.clone(), other.clone()],
            Box::new(move |p, out, g| {
                let b = expand(p[1].data(), p[1].shape(), &out_shape);
                let ga = p[0].requires_grad().then(|| {
                    let v: Vec<T> = g.iter().zip(&b).map(|(&gi, &bi)| gi / bi).collect();
                    reduce_to(&v, &out_shape, p[0].shape())
                });
                let gb = p[1].requires_grad().then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let v: Vec<T> = g
                        .iter()
                        .zip(out)
                        .zip(&b)
                        .map(|((&gi, &oi), &bi)| -gi * oi / bi)
                        .collect();
                    reduce_to(&v, &out_shape, p[1].shape())
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |p, out, g| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                        .collect(),
                )]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map_unary(|x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.map_unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.map_unary(move |x| x * c, move |_, _| c)
    }

    pub fn sqr(&self) -> Tensor<T> {
        self.map_unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.map_unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map_unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map_unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map_unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map_unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map_unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, negative_slope: T) -> Tensor<T> {
        self.map_unary(
            move |x| if x > T::zero() { x } else { x * negative_slope },
            move |x, _| if x > T::zero() { T::one() } else { negative_slope },
        )
    }

    /// Shows `value` in the forward pass while passing gradients to `self`
    /// unchanged (straight-through).
    pub fn with_forward_value(&self, value: Vec<T>) -> Tensor<T> {
        assert_eq!(value.len(), self.numel(), "forward value length mismatch");
        Tensor::from_op(
            value,
            self.shape(),
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec())]),
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.map_unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }
}
