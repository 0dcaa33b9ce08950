//! Synthetic multi-echo phantoms with known proton density and T2*.
//!
//! A head ellipse with a short-T2* rim encloses a handful of random
//! ellipses. Proton density and T2* are piecewise constant per region with a
//! gentle multiplicative ripple on top; each echo gets a smooth phase so the
//! images are genuinely complex.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::ComplexImage;

/// T2* range of the generated tissue, in ms.
pub const T2_RANGE: (f64, f64) = (10.0, 300.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub contrasts: usize,
    pub delta_t: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 64,
            width: 64,
            contrasts: 5,
            delta_t: 10.0,
            noise_sigma: 0.0,
        }
    }
}

/// Echo stack `images[c]` for echoes `c = 1..C` plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiContrastSample {
    pub images: Vec<ComplexImage>,
    pub t2star_gt: Array2<f64>,
    pub delta_t: f64,
    pub proton_density: Array2<f64>,
    pub seed: u64,
}

impl MultiContrastSample {
    pub fn contrasts(&self) -> usize {
        self.images.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.t2star_gt.dim()
    }

    pub fn magnitudes(&self) -> Vec<Array2<f64>> {
        self.images.iter().map(ComplexImage::magnitude).collect()
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, k: f64) -> Ellipse {
        Ellipse {
            a: self.a * k,
            b: self.b * k,
            ..*self
        }
    }
}

pub fn generate_phantom(
    seed: u64,
    height: usize,
    width: usize,
    contrasts: usize,
    delta_t: f64,
    noise_sigma: f64,
) -> Result<MultiContrastSample> {
    if height == 0 || width == 0 || !height.is_multiple_of(16) || !width.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "phantom dimensions must be positive multiples of 16, got {height}x{width}"
        )));
    }
    if contrasts < 2 {
        return Err(Error::Config(format!("need at least 2 contrasts, got {contrasts}")));
    }
    if !(delta_t > 0.0) || !(noise_sigma >= 0.0) {
        return Err(Error::Config("echo spacing must be positive and noise non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Ellipse {
        cy: rng.random_range(-0.05..0.05),
        cx: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.62..0.74),
        b: rng.random_range(0.70..0.82),
        angle: rng.random_range(-0.3..0.3),
    };
    let rim = head.scaled(1.12);
    let rim_pd = rng.random_range(0.8..1.0);
    let rim_t2 = rng.random_range(12.0..25.0);
    let head_pd = rng.random_range(0.5..0.7);
    let head_t2 = rng.random_range(40.0..90.0);
    let n_inner = rng.random_range(4..=7);
    let inner: Vec<(Ellipse, f64, f64)> = (0..n_inner)
        .map(|_| {
            let r = rng.random_range(0.0..0.45);
            let t = rng.random_range(0.0..2.0 * PI);
            let e = Ellipse {
                cy: head.cy + r * t.sin(),
                cx: head.cx + r * t.cos(),
                a: rng.random_range(0.08..0.3),
                b: rng.random_range(0.08..0.3),
                angle: rng.random_range(0.0..PI),
            };
            let pd = rng.random_range(0.3..1.0);
            let t2 = rng.random_range(T2_RANGE.0..T2_RANGE.1);
            (e, pd, t2)
        })
        .collect();
    let ripple = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(0.5..2.0) * PI,
            rng.random_range(0.5..2.0) * PI,
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        )
    };
    let (pf1, pf2, pp1, pp2) = ripple(&mut rng);
    let (tf1, tf2, tp1, tp2) = ripple(&mut rng);
    let phase0: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let phase1: [f64; 2] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));

    let mut pd = Array2::<f64>::zeros((height, width));
    let mut t2 = Array2::<f64>::zeros((height, width));
    let mut phi0 = Array2::<f64>::zeros((height, width));
    let mut phi1 = Array2::<f64>::zeros((height, width));
    for r in 0..height {
        for c in 0..width {
            let y = 2.0 * (r as f64 + 0.5) / height as f64 - 1.0;
            let x = 2.0 * (c as f64 + 0.5) / width as f64 - 1.0;
            phi0[[r, c]] = PI * (phase0[0] + phase0[1] * x + phase0[2] * y + phase0[3] * (x * x + y * y));
            phi1[[r, c]] = PI * (phase1[0] * x + phase1[1] * y);
            if !rim.contains(y, x) {
                continue;
            }
            let (mut p, mut t) = if head.contains(y, x) {
                (head_pd, head_t2)
            } else {
                (rim_pd, rim_t2)
            };
            for (e, epd, et2) in &inner {
                if e.contains(y, x) && head.contains(y, x) {
                    p = *epd;
                    t = *et2;
                }
            }
            p *= 1.0 + 0.1 * (pf1 * x + pp1).sin() * (pf2 * y + pp2).cos();
            t *= 1.0 + 0.1 * (tf1 * y + tp1).sin() * (tf2 * x + tp2).cos();
            pd[[r, c]] = p;
            t2[[r, c]] = t.clamp(T2_RANGE.0, T2_RANGE.1);
        }
    }
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let images = (1..=contrasts)
        .map(|echo| {
            let data = Array2::from_shape_fn((height, width), |(r, c)| {
                let t = t2[[r, c]];
                let mag = if t > 0.0 {
                    pd[[r, c]] * (-(echo as f64) * delta_t / t).exp()
                } else {
                    0.0
                };
                let z = Complex64::from_polar(mag, phi0[[r, c]] + echo as f64 * phi1[[r, c]]);
                if noise_sigma > 0.0 {
                    z + Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    z
                }
            });
            ComplexImage::new(data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiContrastSample {
        images,
        t2star_gt: t2,
        delta_t,
        proton_density: pd,
        seed,
    })
}

/// Convenience wrapper taking a [`PhantomConfig`].
pub fn generate_with(config: &PhantomConfig, seed: u64) -> Result<MultiContrastSample> {
    generate_phantom(
        seed,
        config.height,
        config.width,
        config.contrasts,
        config.delta_t,
        config.noise_sigma,
    )
}

fn mean_magnitude(image: &ComplexImage) -> f64 {
    let d = image.data();
    d.iter().map(|z| z.norm()).sum::<f64>() / d.len() as f64
}

/// Divides by the mean magnitude.
pub fn normalize(image: &ComplexImage) -> Result<ComplexImage> {
    let m = mean_magnitude(image);
    if !(m > 0.0) {
        return Err(Error::Domain("cannot normalize an all-zero image".into()));
    }
    ComplexImage::new(image.data() / Complex64::new(m, 0.0))
}

/// Scales every echo (and the proton density) by one common factor so the
/// stack's mean magnitude is 1; a shared factor keeps echo ratios intact.
pub fn normalize_sample(sample: &MultiContrastSample) -> Result<MultiContrastSample> {
    let m = sample.images.iter().map(mean_magnitude).sum::<f64>() / sample.images.len() as f64;
    if !(m > 0.0) {
        return Err(Error::Domain("cannot normalize an all-zero sample".into()));
    }
    let images = sample
        .images
        .iter()
        .map(|im| ComplexImage::new(im.data() / Complex64::new(m, 0.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiContrastSample {
        images,
        proton_density: &sample.proton_density / m,
        ..sample.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Name of the partition containing `index`.
    pub fn membership(&self, index: usize) -> &'static str {
        if self.train.contains(&index) {
            "train"
        } else if self.val.contains(&index) {
            "val"
        } else {
            "test"
        }
    }
}

/// Seeded shuffle of `0..n` cut into train/val/test.
pub fn split_indices(n: usize, seed: u64, train_frac: f64, val_frac: f64) -> Result<Split> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&val_frac)
        || train_frac + val_frac > 1.0 + 1e-12
    {
        return Err(Error::Config(format!(
            "invalid split fractions {train_frac} / {val_frac}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_frac * n as f64).round() as usize;
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::t2star::fit_t2star_loglinear;

    #[test]
    fn noiseless_magnitudes_follow_the_decay_law() {
        let s = generate_phantom(3, 64, 64, 5, 10.0, 0.0).unwrap();
        for (c, im) in s.images.iter().enumerate() {
            let mag = im.magnitude();
            for ((r, col), &m) in mag.indexed_iter() {
                let t = s.t2star_gt[[r, col]];
                let expected = if t > 0.0 {
                    s.proton_density[[r, col]] * (-((c + 1) as f64) * 10.0 / t).exp()
                } else {
                    0.0
                };
                assert!((m - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(11, 32, 32, 3, 10.0, 0.05).unwrap();
        let b = generate_phantom(11, 32, 32, 3, 10.0, 0.05).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(12, 32, 32, 3, 10.0, 0.05).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tissue_values_and_complexity() {
        let s = generate_phantom(5, 64, 64, 5, 10.0, 0.0).unwrap();
        let fg: Vec<f64> = s.t2star_gt.iter().cloned().filter(|&t| t > 0.0).collect();
        assert!(fg.len() > 64 * 64 / 4);
        assert!(fg.iter().all(|&t| (T2_RANGE.0..=T2_RANGE.1).contains(&t)));
        assert!(s.images[0].data().iter().any(|z| z.im.abs() > 1e-3));
        // Background is exactly empty.
        assert!(s
            .t2star_gt
            .iter()
            .zip(s.proton_density.iter())
            .all(|(&t, &p)| (t == 0.0) == (p == 0.0)));
    }

    #[test]
    fn loglinear_fit_recovers_ground_truth() {
        let s = generate_phantom(8, 64, 64, 5, 10.0, 0.0).unwrap();
        let mags = s.magnitudes();
        for ((r, c), &t) in s.t2star_gt.indexed_iter() {
            if t == 0.0 {
                continue;
            }
            let sig: Vec<f64> = mags.iter().map(|m| m[[r, c]]).collect();
            let est = fit_t2star_loglinear(&sig, 10.0).unwrap();
            assert!((est - t).abs() < 1e-6, "({r},{c}) {est} vs {t}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(generate_phantom(0, 60, 64, 5, 10.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(generate_phantom(0, 64, 64, 1, 10.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn normalization() {
        let five = ComplexImage::new(Array2::from_elem((8, 8), Complex64::from_polar(5.0, 0.7))).unwrap();
        let n = normalize(&five).unwrap();
        assert!(n.data().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        let s = generate_phantom(2, 32, 32, 3, 10.0, 0.0).unwrap();
        let once = normalize(&s.images[0]).unwrap();
        let twice = normalize(&once).unwrap();
        assert!(once.data().iter().zip(twice.data()).all(|(a, b)| (a - b).norm() < 1e-6));
        assert!((mean_magnitude(&once) - 1.0).abs() < 1e-6);
        assert!(matches!(normalize(&ComplexImage::zeros(8, 8).unwrap()), Err(Error::Domain(_))));
    }

    #[test]
    fn sample_normalization_keeps_echo_ratios() {
        let s = generate_phantom(4, 32, 32, 4, 10.0, 0.0).unwrap();
        let n = normalize_sample(&s).unwrap();
        let mean: f64 = n.images.iter().map(mean_magnitude).sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-9);
        let k = s.images[0].data()[[16, 16]].norm() / n.images[0].data()[[16, 16]].norm();
        for (a, b) in s.images.iter().zip(&n.images) {
            assert!((a.data()[[16, 16]].norm() / b.data()[[16, 16]].norm() - k).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let a = split_indices(50, 3, 0.6, 0.2).unwrap();
        assert_eq!(a, split_indices(50, 3, 0.6, 0.2).unwrap());
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (30, 10, 10));
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_ne!(a, split_indices(50, 4, 0.6, 0.2).unwrap());
        assert!(split_indices(10, 0, 0.8, 0.5).is_err());
    }
}
