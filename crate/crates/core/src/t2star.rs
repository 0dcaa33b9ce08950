//! T2* relaxometry: decay model, fitting, the neural regressor used as a
//! differentiable map synthesizer, and the foreground mask used for
//! background-free map metrics.

use std::collections::VecDeque;

use mcmri_grad::{Adam, AdamConfig, Param, Real, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the simulated (and clamped) T2* range in ms.
pub const T2_MAX: f64 = 300.0;

/// Smallest T2* drawn for regressor training, in ms.
pub const T2_MIN: f64 = 1.0;

/// Sampled multi-echo decay `s(c) = exp(−c·Δt / T2*)`, `c = 1..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecaySignal {
    pub values: Vec<f64>,
    pub delta_t: f64,
    pub t2star: Option<f64>,
}

pub fn decay_signal(t2star: f64, delta_t: f64, contrasts: usize) -> Result<DecaySignal> {
    if !(t2star > 0.0) || !(delta_t > 0.0) {
        return Err(Error::Domain(format!(
            "T2* and echo spacing must be positive, got {t2star} and {delta_t}"
        )));
    }
    let values = (1..=contrasts)
        .map(|c| (-(c as f64) * delta_t / t2star).exp())
        .collect();
    Ok(DecaySignal {
        values,
        delta_t,
        t2star: Some(t2star),
    })
}

/// Least-squares fit of `ln s(c)` against `c`; the slope is `−Δt / T2*`.
///
/// Non-decaying signals map to [`T2_MAX`]; estimates are clamped to
/// `[0, T2_MAX]`.
pub fn fit_t2star_loglinear(values: &[f64], delta_t: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Domain("at least two echoes are needed".into()));
    }
    if let Some(v) = values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("log-linear fit needs positive samples, got {v}")));
    }
    let n = values.len() as f64;
    let xm = (n + 1.0) / 2.0;
    let ym = values.iter().map(|v| v.ln()).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, v) in values.iter().enumerate() {
        let dx = (i + 1) as f64 - xm;
        sxy += dx * (v.ln() - ym);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    if slope >= 0.0 {
        return Ok(T2_MAX);
    }
    Ok((-delta_t / slope).clamp(0.0, T2_MAX))
}

/// Simulated training set: T2* uniform on `[T2_MIN, T2_MAX]`, flattened
/// `n x contrasts` signals.
pub fn simulate_regressor_dataset(
    n: usize,
    seed: u64,
    delta_t: f64,
    contrasts: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signals = Vec::with_capacity(n * contrasts);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let t2 = rng.random_range(T2_MIN..=T2_MAX);
        signals.extend(decay_signal(t2, delta_t, contrasts)?.values);
        labels.push(t2);
    }
    Ok((signals, labels))
}

/// Per-pixel T2* estimator.
pub trait Fitter {
    /// Estimate in ms from one cross-contrast magnitude vector; background
    /// or unfit-able signals give 0.
    fn fit(&self, signal: &[f64]) -> f64;
}

/// Analytic log-linear fit.
#[derive(Clone, Copy, Debug)]
pub struct LogLinearFitter {
    pub delta_t: f64,
}

impl Fitter for LogLinearFitter {
    fn fit(&self, signal: &[f64]) -> f64 {
        fit_t2star_loglinear(signal, self.delta_t).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dense {
    /// `[out, in]`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    inputs: usize,
    outputs: usize,
}

/// Fully connected T2* regressor with layer widths `C → C → 32 → 1`.
///
/// Trained on unit-amplitude decays `exp(−cΔt/T2*)`. Image magnitudes are
/// divided by `input_scale` first so tissue falls inside that range; the
/// estimate therefore depends on signal amplitude, not only on echo ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2Regressor {
    layers: Vec<Dense>,
    contrasts: usize,
    input_scale: f64,
    trained: bool,
}

pub const HIDDEN_WIDTH: usize = 32;

impl T2Regressor {
    /// Randomly initialized (untrained) regressor with unit input scale.
    pub fn untrained(contrasts: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [contrasts, contrasts, HIDDEN_WIDTH, 1];
        let layers = sizes
            .windows(2)
            .map(|io| {
                let bound = (6.0 / (io[0] + io[1]) as f64).sqrt();
                Dense {
                    w: (0..io[0] * io[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    b: vec![0.0; io[1]],
                    inputs: io[0],
                    outputs: io[1],
                }
            })
            .collect();
        T2Regressor {
            layers,
            contrasts,
            input_scale: 1.0,
            trained: false,
        }
    }

    /// Same weights, with magnitudes divided by `scale` before the network.
    pub fn with_input_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("input scale must be positive, got {scale}")));
        }
        self.input_scale = scale;
        Ok(self)
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn contrasts(&self) -> usize {
        self.contrasts
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Estimate in ms for one signal.
    pub fn predict(&self, signal: &[f64]) -> Result<f64> {
        if !self.trained {
            return Err(Error::State("T2* regressor has not been trained".into()));
        }
        if signal.len() != self.contrasts {
            return Err(Error::Shape {
                expected: vec![self.contrasts],
                got: vec![signal.len()],
            });
        }
        let mut x: Vec<f64> = signal.iter().map(|v| v / self.input_scale).collect();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut y = layer.b.clone();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
                *yo += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                if li < last {
                    *yo = yo.tanh();
                }
            }
            x = y;
        }
        Ok((x[0] * T2_MAX).clamp(0.0, T2_MAX))
    }

    /// Frozen, differentiable map synthesis from `[N, C, H, W]` magnitudes to
    /// `[N, 1, H, W]` T2* in ms. Gradients reach the inputs only.
    pub fn map_t<T: Real>(&self, mags: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.trained {
            return Err(Error::State("T2* regressor has not been trained".into()));
        }
        let s = mags.shape();
        if s.len() != 4 || s[1] != self.contrasts {
            return Err(Error::Shape {
                expected: vec![0, self.contrasts, 0, 0],
                got: s.to_vec(),
            });
        }
        let mut x = mags.mul_scalar(T::of(1.0 / self.input_scale));
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = Tensor::new(
                layer.w.iter().map(|&v| T::of(v)).collect(),
                &[layer.outputs, layer.inputs, 1, 1],
            );
            let b = Tensor::new(layer.b.iter().map(|&v| T::of(v)).collect(), &[layer.outputs]);
            x = x.conv2d(&w, Some(&b), 1, 0);
            if li < last {
                x = x.tanh();
            }
        }
        let t2max = T::of(T2_MAX);
        Ok(x.mul_scalar(t2max).clamp(T::zero(), t2max))
    }

    fn to_params(&self) -> Vec<Param<f64>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    Param::new(format!("fc{i}.w"), l.w.clone(), &[l.outputs, l.inputs]),
                    Param::new(format!("fc{i}.b"), l.b.clone(), &[l.outputs]),
                ]
            })
            .collect()
    }

    fn load_params(&mut self, params: &[Param<f64>]) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.w = params[2 * i].data().to_vec();
            l.b = params[2 * i + 1].data().to_vec();
        }
    }
}

impl Fitter for T2Regressor {
    fn fit(&self, signal: &[f64]) -> f64 {
        self.predict(signal).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorTrainConfig {
    pub samples: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub delta_t: f64,
    pub contrasts: usize,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        RegressorTrainConfig {
            samples: 100_000,
            steps: 20_000,
            batch: 256,
            lr: 1e-2,
            final_lr: 3e-5,
            delta_t: 10.0,
            contrasts: 5,
            seed: 0,
        }
    }
}

/// Trains the regressor on simulated noiseless decays with an MSE loss on
/// `T2* / T2_MAX`. The learning rate decays geometrically to `final_lr`.
pub fn train_regressor(cfg: &RegressorTrainConfig) -> Result<T2Regressor> {
    if cfg.batch == 0 || cfg.steps == 0 || cfg.contrasts < 2 {
        return Err(Error::Config("regressor training needs steps, batch and ≥2 echoes".into()));
    }
    let (signals, labels) =
        simulate_regressor_dataset(cfg.samples, cfg.seed, cfg.delta_t, cfg.contrasts)?;
    let c = cfg.contrasts;
    let mut model = T2Regressor::untrained(c, cfg.seed ^ 0x5eed);
    let mut params = model.to_params();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let decay = (cfg.final_lr / cfg.lr).powf(1.0 / cfg.steps as f64);
    for step in 0..cfg.steps {
        let mut x = Vec::with_capacity(cfg.batch * c);
        let mut y = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng.random_range(0..labels.len());
            let sig = &signals[i * c..(i + 1) * c];
            x.extend_from_slice(sig);
            y.push(labels[i] / T2_MAX);
        }
        let mut h = Tensor::new(x, &[cfg.batch, c]);
        let last = params.len() / 2 - 1;
        for li in 0..=last {
            h = h.linear(params[2 * li].tensor(), Some(params[2 * li + 1].tensor()));
            if li < last {
                h = h.tanh();
            }
        }
        let target = Tensor::new(y, &[cfg.batch, 1]);
        let loss = h.sub(&target).sqr().mean_all();
        let grads = loss.backward();
        opt.set_lr(cfg.lr * decay.powi(step as i32));
        opt.step(params.iter_mut(), &grads);
    }
    model.load_params(&params);
    model.trained = true;
    Ok(model)
}

/// T2* map with an optional evaluation foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct T2StarMap {
    pub map: Array2<f64>,
    pub foreground: Option<Array2<bool>>,
}

fn check_stack(images: &[Array2<f64>]) -> Result<(usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("no images given".into()))?;
    let dims = first.dim();
    if let Some(bad) = images.iter().find(|im| im.dim() != dims) {
        return Err(Error::Validation(format!(
            "inconsistent image shapes {:?} and {:?}",
            dims,
            bad.dim()
        )));
    }
    Ok(dims)
}

/// Applies `fitter` to every pixel's cross-contrast magnitude vector.
pub fn synthesize_map(images: &[Array2<f64>], fitter: &dyn Fitter) -> Result<T2StarMap> {
    let (h, w) = check_stack(images)?;
    let mut signal = vec![0.0; images.len()];
    let map = Array2::from_shape_fn((h, w), |(r, c)| {
        for (s, im) in signal.iter_mut().zip(images) {
            *s = im[[r, c]];
        }
        fitter.fit(&signal)
    });
    Ok(T2StarMap {
        map,
        foreground: None,
    })
}

/// Binary anatomy mask; `warning` is set when nothing was found.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub mask: Array2<bool>,
    pub warning: Option<String>,
}

impl ForegroundMask {
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }
}

pub const DEFAULT_DILATION: usize = 2;

/// Mean magnitude → Sobel edge strength → Otsu threshold → dilation →
/// hole filling → largest 8-connected component.
pub fn foreground_mask(images: &[Array2<f64>], dilation: usize) -> Result<ForegroundMask> {
    let (h, w) = check_stack(images)?;
    let mut mean = Array2::<f64>::zeros((h, w));
    for im in images {
        mean += im;
    }
    mean /= images.len() as f64;
    let edges = sobel_magnitude(&mean);
    let max = edges.iter().cloned().fold(0.0, f64::max);
    let empty = |why: &str| ForegroundMask {
        mask: Array2::from_elem((h, w), false),
        warning: Some(why.to_string()),
    };
    if !(max > 0.0) {
        return Ok(empty("empty foreground: images have no edges"));
    }
    let thr = otsu_threshold(edges.iter().copied(), max);
    let binary = edges.mapv(|v| v > thr);
    let mask = largest_component(&fill_holes(&dilate(&binary, dilation)));
    if !mask.iter().any(|&b| b) {
        return Ok(empty("empty foreground after thresholding"));
    }
    Ok(ForegroundMask {
        mask,
        warning: None,
    })
}

fn sobel_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let at = |r: isize, c: isize| {
        img[[r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize]]
    };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r, c) = (r as isize, c as isize);
        let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
        let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        gx.hypot(gy)
    })
}

/// Otsu's threshold over a 256-bin histogram of `[0, max]`.
pub fn otsu_threshold(values: impl Iterator<Item = f64>, max: f64) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    let mut total = 0usize;
    for v in values {
        let b = ((v / max) * (BINS - 1) as f64).round() as usize;
        hist[b.min(BINS - 1)] += 1;
        total += 1;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &n) in hist.iter().enumerate() {
        w0 += n as f64;
        sum0 += i as f64 * n as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    (best_bin as f64 + 0.5) / (BINS - 1) as f64 * max
}

fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().any(|&(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[[yy as usize, xx as usize]]
        })
    })
}

/// Background is whatever is 4-connected to the border; everything else is filled.
fn fill_holes(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !mask[[y, x]] {
                outside[[y, x]] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let mut visit = |yy: usize, xx: usize| {
            if !mask[[yy, xx]] && !outside[[yy, xx]] {
                outside[[yy, xx]] = true;
                queue.push_back((yy, xx));
            }
        };
        if y > 0 {
            visit(y - 1, x);
        }
        if y + 1 < h {
            visit(y + 1, x);
        }
        if x > 0 {
            visit(y, x - 1);
        }
        if x + 1 < w {
            visit(y, x + 1);
        }
    }
    outside.mapv(|o| !o)
}

fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut label = Array2::<usize>::zeros((h, w));
    let mut sizes = vec![0usize];
    for sy in 0..h {
        for sx in 0..w {
            if !mask[[sy, sx]] || label[[sy, sx]] != 0 {
                continue;
            }
            let id = sizes.len();
            sizes.push(0);
            let mut queue = VecDeque::from([(sy, sx)]);
            label[[sy, sx]] = id;
            while let Some((y, x)) = queue.pop_front() {
                sizes[id] += 1;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy < 0 || xx < 0 || yy as usize >= h || xx as usize >= w {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if mask[[yy, xx]] && label[[yy, xx]] == 0 {
                            label[[yy, xx]] = id;
                            queue.push_back((yy, xx));
                        }
                    }
                }
            }
        }
    }
    let best = (1..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i)));
    match best {
        Some(id) => label.mapv(|l| l == id),
        None => Array2::from_elem((h, w), false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn decay_values() {
        let s = decay_signal(1e12, 10.0, 5).unwrap();
        assert!(s.values.iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let s = decay_signal(10.0, 10.0, 1).unwrap();
        assert!((s.values[0] - (-1.0f64).exp()).abs() < 1e-15);
        let s = decay_signal(20.0, 10.0, 5).unwrap();
        for (i, v) in s.values.iter().enumerate() {
            assert!((v - (-0.5 * (i + 1) as f64).exp()).abs() < 1e-15);
        }
        assert!(s.values.windows(2).all(|p| p[1] < p[0]));
        assert!(matches!(decay_signal(0.0, 10.0, 5), Err(Error::Domain(_))));
        assert!(matches!(decay_signal(10.0, -1.0, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn loglinear_fit_is_exact_on_noiseless_decays() {
        let s = decay_signal(150.0, 10.0, 5).unwrap();
        let est = fit_t2star_loglinear(&s.values, 10.0).unwrap();
        assert!((est - 150.0).abs() / 150.0 < 1e-9);
        for t2 in [1.0, 7.5, 42.0, 299.0, 300.0] {
            let s = decay_signal(t2, 10.0, 5).unwrap();
            let est = fit_t2star_loglinear(&s.values, 10.0).unwrap();
            assert!((est - t2).abs() / t2 < 1e-9, "{t2} -> {est}");
        }
        assert_eq!(fit_t2star_loglinear(&[1.0; 5], 10.0).unwrap(), T2_MAX);
        assert!(matches!(fit_t2star_loglinear(&[1.0, 0.0, 0.5], 10.0), Err(Error::Domain(_))));
    }

    #[test]
    fn loglinear_fit_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let clean = decay_signal(50.0, 10.0, 5).unwrap().values;
        let mut estimates: Vec<f64> = (0..1000)
            .map(|_| {
                let noisy: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
                fit_t2star_loglinear(&noisy, 10.0).unwrap()
            })
            .collect();
        estimates.sort_by(f64::total_cmp);
        let median = estimates[500];
        assert!((median - 50.0).abs() < 5.0, "median {median}");
    }

    #[test]
    fn regressor_dataset_is_uniform_and_deterministic() {
        let n = 100_000;
        let (signals, labels) = simulate_regressor_dataset(n, 9, 10.0, 5).unwrap();
        assert_eq!(signals.len(), n * 5);
        assert!(signals.chunks(5).all(|s| s.windows(2).all(|p| p[1] < p[0])));
        // Kolmogorov–Smirnov against Uniform(T2_MIN, T2_MAX).
        let mut sorted = labels.clone();
        sorted.sort_by(f64::total_cmp);
        let d = sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x - T2_MIN) / (T2_MAX - T2_MIN);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // Critical value for p = 0.01.
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
        let again = simulate_regressor_dataset(n, 9, 10.0, 5).unwrap();
        assert_eq!(again.1, labels);
    }

    #[test]
    fn untrained_regressor_is_rejected() {
        let r = T2Regressor::untrained(5, 0);
        assert!(matches!(r.predict(&[1.0; 5]), Err(Error::State(_))));
        assert!(r.map_t(&Tensor::<f32>::ones(&[1, 5, 4, 4])).is_err());
    }

    #[test]
    fn map_synthesis_with_analytic_fitter() {
        let t2 = Array2::from_shape_fn((6, 6), |(r, c)| if r == 0 { 0.0 } else { 10.0 + 40.0 * c as f64 + r as f64 });
        let images: Vec<Array2<f64>> = (1..=5)
            .map(|c| t2.mapv(|t: f64| if t > 0.0 { (-(c as f64) * 10.0 / t).exp() } else { 0.0 }))
            .collect();
        let m = synthesize_map(&images, &LogLinearFitter { delta_t: 10.0 }).unwrap();
        assert_eq!(m.map.dim(), (6, 6));
        for ((r, c), &v) in m.map.indexed_iter() {
            assert!((v - t2[[r, c]]).abs() < 1e-6, "({r},{c})");
        }
        let ones = vec![Array2::ones((4, 4)); 5];
        let flat = synthesize_map(&ones, &LogLinearFitter { delta_t: 10.0 }).unwrap();
        assert!(flat.map.iter().all(|&v| v == T2_MAX));
        let bad = vec![Array2::ones((4, 4)), Array2::ones((4, 5))];
        assert!(synthesize_map(&bad, &LogLinearFitter { delta_t: 10.0 }).is_err());
    }

    fn disk(n: usize, cy: f64, cx: f64, r: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(y, x)| {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d <= r {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn foreground_of_empty_images_is_empty() {
        let fg = foreground_mask(&[Array2::zeros((16, 16)), Array2::zeros((16, 16))], 2).unwrap();
        assert!(fg.is_empty());
        assert!(fg.warning.is_some());
    }

    #[test]
    fn foreground_covers_a_disk() {
        let img = disk(256, 127.5, 127.5, 80.0);
        let fg = foreground_mask(&[img.clone(), img.mapv(|v| 0.5 * v)], 2).unwrap();
        let inter = fg.mask.iter().zip(&img).filter(|(&m, &d)| m && d > 0.0).count();
        let union = fg.mask.iter().zip(&img).filter(|(&m, &d)| m || d > 0.0).count();
        let iou = inter as f64 / union as f64;
        assert!(iou > 0.9, "IoU {iou}");
    }

    #[test]
    fn foreground_keeps_largest_blob() {
        let img = disk(96, 30.0, 30.0, 20.0) + disk(96, 75.0, 75.0, 10.0);
        let fg = foreground_mask(&[img], 2).unwrap();
        assert!(fg.mask[[30, 30]]);
        assert!(!fg.mask[[75, 75]]);
    }

    #[test]
    fn otsu_separates_two_modes() {
        let values = (0..100).map(|_| 1.0).chain((0..100).map(|_| 9.0));
        let t = otsu_threshold(values, 10.0);
        assert!(t > 1.0 && t < 9.0);
    }
}
