//! Single-coil Cartesian acquisition model.
//!
//! Transforms are orthonormal and centered: the DC coefficient sits at
//! `(H/2, W/2)` and `‖fft2c(x)‖₂ = ‖x‖₂`. Both dimensions must be even so the
//! forward and inverse shifts coincide.
//!
//! Two flavours of every operator exist: plain functions on [`ComplexImage`] /
//! [`KSpaceData`] for analysis and evaluation, and `*_t` functions on
//! `[N, 2, H, W]` tensors (real and imaginary channels) that take part in
//! automatic differentiation. The tensor transforms always run in `f64`
//! internally, so `f32` networks still reproduce acquired samples to within
//! `f32` rounding of the output.

use std::cell::RefCell;

use mcmri_grad::{Real, Tensor};
use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::maskgen::BinaryMask2D;

/// Smallest accepted image side.
pub const MIN_DIM: usize = 4;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < MIN_DIM || w < MIN_DIM || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "image dimensions must be even and at least {MIN_DIM}, got {h}x{w}"
        )));
    }
    Ok(())
}

fn check_finite(data: &Array2<Complex64>) -> Result<()> {
    if data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation("non-finite value in complex array".into()))
    }
}

/// Complex image `x` on an `H x W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    data: Array2<Complex64>,
}

impl ComplexImage {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        check_dims(data.nrows(), data.ncols())?;
        check_finite(&data)?;
        Ok(ComplexImage { data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(Array2::zeros((h, w)))
    }

    pub fn from_real(re: &Array2<f64>) -> Result<Self> {
        Self::new(re.mapv(|v| Complex64::new(v, 0.0)))
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<Complex64> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|z| z.norm())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Spatial-frequency samples `y` with an optional record of acquired locations.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    data: Array2<Complex64>,
    sampled: Option<BinaryMask2D>,
}

impl KSpaceData {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        check_dims(data.nrows(), data.ncols())?;
        check_finite(&data)?;
        Ok(KSpaceData {
            data,
            sampled: None,
        })
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn sampled(&self) -> Option<&BinaryMask2D> {
        self.sampled.as_ref()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Swaps quadrants; for even sides this is both `fftshift` and `ifftshift`.
fn swap_quadrants(buf: &mut [Complex64], h: usize, w: usize) {
    let (hh, hw) = (h / 2, w / 2);
    for r in 0..hh {
        for c in 0..w {
            buf.swap(r * w + c, (r + hh) * w + (c + hw) % w);
        }
    }
}

/// Centered orthonormal 2D DFT of a row-major `h x w` buffer, in place.
pub fn fft2c_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len(), h * w);
    assert!(h.is_multiple_of(2) && w.is_multiple_of(2), "centered transform needs even sides");
    let dir = if inverse {
        FftDirection::Inverse
    } else {
        FftDirection::Forward
    };
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft(w, dir), p.plan_fft(h, dir))
    });
    swap_quadrants(buf, h, w);
    row_fft.process(buf);
    let mut cols = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            cols[c * h + r] = buf[r * w + c];
        }
    }
    col_fft.process(&mut cols);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for r in 0..h {
        for c in 0..w {
            buf[r * w + c] = cols[c * h + r] * scale;
        }
    }
    swap_quadrants(buf, h, w);
}

fn transform(data: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut buf: Vec<Complex64> = data.iter().copied().collect();
    fft2c_in_place(&mut buf, h, w, inverse);
    Array2::from_shape_vec((h, w), buf).expect("shape preserved")
}

pub fn fft2c(image: &ComplexImage) -> KSpaceData {
    KSpaceData {
        data: transform(&image.data, false),
        sampled: None,
    }
}

pub fn ifft2c(k: &KSpaceData) -> ComplexImage {
    ComplexImage {
        data: transform(&k.data, true),
    }
}

fn check_mask(mask: &BinaryMask2D, dims: (usize, usize)) -> Result<()> {
    if (mask.rows(), mask.cols()) != dims {
        return Err(Error::Shape {
            expected: vec![dims.0, dims.1],
            got: vec![mask.rows(), mask.cols()],
        });
    }
    Ok(())
}

/// `ŷ = y ⊙ M`.
pub fn undersample(y: &KSpaceData, mask: &BinaryMask2D) -> Result<KSpaceData> {
    check_mask(mask, y.dims())?;
    let mut data = y.data.clone();
    for (c, &on) in mask.columns().iter().enumerate() {
        if !on {
            data.column_mut(c).fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(KSpaceData {
        data,
        sampled: Some(mask.clone()),
    })
}

/// Inverse transform of undersampled k-space (unsampled entries are zero).
pub fn zero_filled(y_hat: &KSpaceData) -> ComplexImage {
    ifft2c(y_hat)
}

/// `F⁻¹((1 − M) ⊙ F(x_rec) + M ⊙ ŷ)`.
pub fn data_consistency(
    mask: &BinaryMask2D,
    x_rec: &ComplexImage,
    y_hat: &KSpaceData,
) -> Result<ComplexImage> {
    check_mask(mask, x_rec.dims())?;
    check_mask(mask, y_hat.dims())?;
    let mut k = transform(&x_rec.data, false);
    for (c, &on) in mask.columns().iter().enumerate() {
        if on {
            k.column_mut(c).assign(&y_hat.data.column(c));
        }
    }
    Ok(ComplexImage {
        data: transform(&k, true),
    })
}

fn tensor_transform<T: Real>(x: &[T], n: usize, h: usize, w: usize, inverse: bool) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];
    for i in 0..n {
        let re = &x[(2 * i) * plane..(2 * i + 1) * plane];
        let im = &x[(2 * i + 1) * plane..(2 * i + 2) * plane];
        for (j, z) in buf.iter_mut().enumerate() {
            *z = Complex64::new(re[j].as_f64(), im[j].as_f64());
        }
        fft2c_in_place(&mut buf, h, w, inverse);
        let (ore, oim) = out[2 * i * plane..(2 * i + 2) * plane].split_at_mut(plane);
        for (j, z) in buf.iter().enumerate() {
            ore[j] = T::of(z.re);
            oim[j] = T::of(z.im);
        }
    }
    out
}

fn tensor_fft<T: Real>(x: &Tensor<T>, inverse: bool) -> Tensor<T> {
    let s = x.shape();
    assert!(
        s.len() == 4 && s[1] == 2,
        "complex tensor must be [N, 2, H, W], got {s:?}"
    );
    let (n, h, w) = (s[0], s[2], s[3]);
    let data = tensor_transform(x.data(), n, h, w, inverse);
    // The real representation of a unitary map has its inverse as transpose.
    Tensor::from_op(
        data,
        s,
        vec![x.clone()],
        Box::new(move |_, _, g| vec![Some(tensor_transform(g, n, h, w, !inverse))]),
    )
}

/// Differentiable centered FFT of `[N, 2, H, W]` (real, imaginary) tensors.
pub fn fft2c_t<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    tensor_fft(x, false)
}

pub fn ifft2c_t<T: Real>(k: &Tensor<T>) -> Tensor<T> {
    tensor_fft(k, true)
}

/// Differentiable data-consistency projection.
///
/// `mask` broadcasts against `[N, 2, H, W]`; a column mask is passed as
/// `[W]`, `[1, 1, 1, W]` or `[N, 1, 1, W]`.
pub fn data_consistency_t<T: Real>(
    mask: &Tensor<T>,
    x_rec: &Tensor<T>,
    y_hat: &Tensor<T>,
) -> Tensor<T> {
    let k = fft2c_t(x_rec);
    let keep = mask.neg().add_scalar(T::one());
    let mixed = k.mul(&keep).add(&y_hat.mul(mask));
    ifft2c_t(&mixed)
}

/// Packs complex images into an `[N, 2, H, W]` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Array2<Complex64>]) -> Tensor<T> {
    assert!(!images.is_empty());
    let (h, w) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * 2 * h * w);
    for img in images {
        assert_eq!(img.dim(), (h, w), "inconsistent image sizes");
        data.extend(img.iter().map(|z| T::of(z.re)));
        data.extend(img.iter().map(|z| T::of(z.im)));
    }
    Tensor::new(data, &[images.len(), 2, h, w])
}

/// Unpacks sample `i` of an `[N, 2, H, W]` tensor into a complex array.
pub fn tensor_to_image<T: Real>(t: &Tensor<T>, i: usize) -> Array2<Complex64> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let d = t.data();
    let re = &d[2 * i * plane..(2 * i + 1) * plane];
    let im = &d[(2 * i + 1) * plane..(2 * i + 2) * plane];
    Array2::from_shape_fn((h, w), |(r, c)| {
        Complex64::new(re[r * w + c].as_f64(), im[r * w + c].as_f64())
    })
}

/// Differentiable magnitude `sqrt(re² + im² + eps)` of `[N, 2, H, W]`, giving `[N, 1, H, W]`.
pub fn magnitude_t<T: Real>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let re = x.narrow(1, 0, 1);
    let im = x.narrow(1, 1, 1);
    re.sqr().add(&im.sqr()).add_scalar(eps).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexImage::new(data).unwrap()
    }

    /// Direct evaluation of the centered, orthonormal DFT.
    fn dft_oracle(x: &Array2<Complex64>) -> Array2<Complex64> {
        let (h, w) = x.dim();
        let scale = 1.0 / ((h * w) as f64).sqrt();
        Array2::from_shape_fn((h, w), |(k1, k2)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for n1 in 0..h {
                for n2 in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((k1 as f64 - (h / 2) as f64) * (n1 as f64 - (h / 2) as f64) / h as f64
                            + (k2 as f64 - (w / 2) as f64) * (n2 as f64 - (w / 2) as f64)
                                / w as f64);
                    acc += x[[n1, n2]] * Complex64::from_polar(1.0, phase);
                }
            }
            acc * scale
        })
    }

    fn max_abs_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    fn column_mask(h: usize, cols: &[bool]) -> BinaryMask2D {
        BinaryMask2D::new(h, cols.to_vec())
    }

    #[test]
    fn roundtrip_is_identity() {
        let x = random_image(16, 12, 1);
        let back = ifft2c(&fft2c(&x));
        assert!(max_abs_diff(back.data(), x.data()) / x.norm() < 1e-10);
        let y = fft2c(&random_image(8, 8, 2));
        let again = fft2c(&ifft2c(&y));
        assert!(max_abs_diff(again.data(), y.data()) < 1e-10);
    }

    #[test]
    fn constant_image_maps_to_center_bin() {
        let x = ComplexImage::from_real(&Array2::ones((8, 8))).unwrap();
        let k = fft2c(&x);
        for ((r, c), v) in k.data().indexed_iter() {
            let expected = if (r, c) == (4, 4) { 8.0 } else { 0.0 };
            assert!((v - Complex64::new(expected, 0.0)).norm() < 1e-12, "({r},{c}) = {v}");
        }
        let back = ifft2c(&k);
        assert!(back.data().iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn center_spike_inverts_to_ones() {
        let mut k = Array2::zeros((8, 8));
        k[[4, 4]] = Complex64::new(8.0, 0.0);
        let x = ifft2c(&KSpaceData::new(k).unwrap());
        assert!(x.data().iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
        let zeros = ifft2c(&KSpaceData::new(Array2::zeros((8, 8))).unwrap());
        assert!(zeros.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn matches_direct_dft() {
        let x = random_image(8, 6, 3);
        let k = fft2c(&x);
        assert!(max_abs_diff(k.data(), &dft_oracle(x.data())) < 1e-12);
    }

    #[test]
    fn rejects_invalid_images() {
        let mut bad = Array2::zeros((8, 8));
        bad[[1, 1]] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(ComplexImage::new(bad), Err(Error::Validation(_))));
        assert!(ComplexImage::zeros(7, 8).is_err());
        assert!(ComplexImage::zeros(2, 8).is_err());
    }

    #[test]
    fn undersample_identity_and_annihilation() {
        let y = fft2c(&random_image(8, 8, 4));
        let full = undersample(&y, &column_mask(8, &[true; 8])).unwrap();
        assert_eq!(full.data(), y.data());
        let none = undersample(&y, &column_mask(8, &[false; 8])).unwrap();
        assert!(none.data().iter().all(|z| z.norm() == 0.0));
        assert!(none.sampled().is_some());
    }

    #[test]
    fn undersample_keeps_selected_columns() {
        let y = fft2c(&random_image(8, 20, 5));
        let cols: Vec<bool> = (0..20).map(|c| c < 10).collect();
        let yh = undersample(&y, &column_mask(8, &cols)).unwrap();
        for ((r, c), v) in yh.data().indexed_iter() {
            if c < 10 {
                assert_eq!(*v, y.data()[[r, c]]);
            } else {
                assert_eq!(v.norm(), 0.0);
            }
        }
        assert!(matches!(
            undersample(&y, &column_mask(8, &[true; 8])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_filled_full_and_empty() {
        let x = random_image(8, 8, 6);
        let y = fft2c(&x);
        let zf = zero_filled(&undersample(&y, &column_mask(8, &[true; 8])).unwrap());
        assert!(max_abs_diff(zf.data(), x.data()) < 1e-10);
        let zf0 = zero_filled(&undersample(&y, &column_mask(8, &[false; 8])).unwrap());
        assert!(zf0.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn zero_filled_delta_aliasing_matches_direct_dft() {
        let mut delta = Array2::zeros((8, 8));
        delta[[2, 3]] = Complex64::new(1.0, 0.0);
        let cols: Vec<bool> = (0..8).map(|c| c % 2 == 0).collect();
        let zf = zero_filled(
            &undersample(&fft2c(&ComplexImage::new(delta.clone()).unwrap()), &column_mask(8, &cols))
                .unwrap(),
        );
        // Oracle: direct DFT, masking, then the inverse via the conjugate trick.
        let mut k = dft_oracle(&delta);
        for r in 0..8 {
            for c in 0..8 {
                if !cols[c] {
                    k[[r, c]] = Complex64::new(0.0, 0.0);
                }
            }
        }
        let inv = dft_oracle(&k.mapv(|z| z.conj())).mapv(|z| z.conj());
        assert!(max_abs_diff(zf.data(), &inv) < 1e-12);
        // Every other column sampled: two replicas of half amplitude.
        let mag = zf.magnitude();
        assert!((mag[[2, 3]] - 0.5).abs() < 1e-12);
        assert!((mag[[2, 7]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dc_full_and_empty_masks() {
        let x_rec = random_image(8, 8, 7);
        let y = fft2c(&random_image(8, 8, 8));
        let full = column_mask(8, &[true; 8]);
        let y_hat = undersample(&y, &full).unwrap();
        let out = data_consistency(&full, &x_rec, &y_hat).unwrap();
        assert!(max_abs_diff(out.data(), ifft2c(&y_hat).data()) < 1e-10);
        let empty = column_mask(8, &[false; 8]);
        let y0 = undersample(&y, &empty).unwrap();
        let out0 = data_consistency(&empty, &x_rec, &y0).unwrap();
        assert!(max_abs_diff(out0.data(), x_rec.data()) < 1e-10);
    }

    #[test]
    fn dc_reproduces_samples_on_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let cols: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
            let mask = column_mask(4, &cols);
            let x_rec = random_image(4, 4, 100 + trial);
            let y_hat = undersample(&fft2c(&random_image(4, 4, 200 + trial)), &mask).unwrap();
            let out = data_consistency(&mask, &x_rec, &y_hat).unwrap();
            let k = dft_oracle(out.data());
            for r in 0..4 {
                for c in 0..4 {
                    if cols[c] {
                        assert!((k[[r, c]] - y_hat.data()[[r, c]]).norm() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn tensor_dc_matches_plain_dc() {
        let x = random_image(8, 8, 10);
        let y = fft2c(&random_image(8, 8, 11));
        let cols = [true, false, false, true, true, false, true, false];
        let mask = column_mask(8, &cols);
        let y_hat = undersample(&y, &mask).unwrap();
        let plain = data_consistency(&mask, &x, &y_hat).unwrap();
        let m = Tensor::<f64>::new(cols.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), &[8]);
        let xt = images_to_tensor::<f64>(&[x.data()]);
        let yt = images_to_tensor::<f64>(&[y_hat.data()]);
        let out = data_consistency_t(&m, &xt, &yt);
        assert!(max_abs_diff(&tensor_to_image(&out, 0), plain.data()) < 1e-12);
    }

    #[test]
    fn tensor_fft_gradient_is_the_adjoint() {
        // <F x, v> = <x, F^T v> for the real representation.
        let x = images_to_tensor::<f64>(&[random_image(8, 6, 12).data()]);
        let v = images_to_tensor::<f64>(&[random_image(8, 6, 13).data()]);
        let leaf = Tensor::leaf(x.to_vec(), x.shape());
        let g = fft2c_t(&leaf).mul(&v).sum_all().backward();
        let fx = fft2c_t(&x);
        let lhs: f64 = fx.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.get(&leaf).unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn random_mask(h: usize, w: usize, seed: u64) -> BinaryMask2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BinaryMask2D::new(h, (0..w).map(|_| rng.random_bool(0.4)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dc_is_idempotent_and_consistent(seed in 0u64..10_000) {
            let mask = random_mask(8, 8, seed);
            let x = random_image(8, 8, seed + 1);
            let y_hat = undersample(&fft2c(&random_image(8, 8, seed + 2)), &mask).unwrap();
            let once = data_consistency(&mask, &x, &y_hat).unwrap();
            let twice = data_consistency(&mask, &once, &y_hat).unwrap();
            prop_assert!(max_abs_diff(once.data(), twice.data()) < 1e-8);
            let k = fft2c(&once);
            for (c, &on) in mask.columns().iter().enumerate() {
                if on {
                    for r in 0..8 {
                        prop_assert!((k.data()[[r, c]] - y_hat.data()[[r, c]]).norm() < 1e-8);
                    }
                }
            }
        }

        #[test]
        fn transforms_and_masking_are_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x1 = random_image(8, 8, seed);
            let x2 = random_image(8, 8, seed + 7);
            let combo = ComplexImage::new(x1.data() * a + x2.data() * b).unwrap();
            let lhs = fft2c(&combo);
            let rhs = fft2c(&x1).data() * a + fft2c(&x2).data() * b;
            prop_assert!(max_abs_diff(lhs.data(), &rhs) < 1e-10);
            let mask = random_mask(8, 8, seed + 3);
            let u = undersample(&lhs, &mask).unwrap();
            let parts = undersample(&fft2c(&x1), &mask).unwrap().data() * a
                + undersample(&fft2c(&x2), &mask).unwrap().data() * b;
            prop_assert!(max_abs_diff(u.data(), &parts) < 1e-10);
        }

        #[test]
        fn parseval_holds(seed in 0u64..10_000) {
            let x = random_image(16, 8, seed);
            let k = fft2c(&x);
            prop_assert!((k.norm() - x.norm()).abs() < 1e-10);
        }
    }
}
