//! Learnable Cartesian column masks.
//!
//! A [`ProbabilisticMask`] holds one sampling probability per phase-encoding
//! column. Realizations are drawn as `m_i = [u_i ≤ p_i]`; during training the
//! hard decision is used in the forward pass while gradients follow the
//! relaxed surrogate `σ_s(p − u)`.
//!
//! The preselected central columns count toward the budget: the free columns
//! carry `α·d − n_pre` expected samples.

use mcmri_grad::{Real, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SLOPE: f64 = 5.0;

/// Binary sampling pattern replicated along the frequency-encoding axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask2D {
    rows: usize,
    columns: Vec<bool>,
}

impl BinaryMask2D {
    pub fn new(rows: usize, columns: Vec<bool>) -> Self {
        BinaryMask2D { rows, columns }
    }

    /// Accepts a 0/1 array whose rows are all identical.
    pub fn from_array(a: &Array2<u8>) -> Result<Self> {
        if a.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask entries must be 0 or 1".into()));
        }
        let first = a.row(0);
        if a.rows().into_iter().any(|r| r != first) {
            return Err(Error::Validation("mask rows must be identical".into()));
        }
        Ok(BinaryMask2D {
            rows: a.nrows(),
            columns: first.iter().map(|&v| v == 1).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[bool] {
        &self.columns
    }

    pub fn get(&self, _row: usize, col: usize) -> bool {
        self.columns[col]
    }

    pub fn sampled_columns(&self) -> usize {
        self.columns.iter().filter(|&&b| b).count()
    }

    pub fn to_array(&self) -> Array2<u8> {
        Array2::from_shape_fn((self.rows, self.cols()), |(_, c)| self.columns[c] as u8)
    }
}

/// `rep(m)`: every row equals `m`.
pub fn replicate_mask(m: &[bool], rows: usize) -> BinaryMask2D {
    BinaryMask2D::new(rows, m.to_vec())
}

/// Indices of the `count` columns centred on the DC column `d / 2`.
pub fn central_columns(d: usize, count: usize) -> Vec<usize> {
    let count = count.min(d);
    let start = (d / 2).saturating_sub(count / 2).min(d - count);
    (start..start + count).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilisticMask {
    p: Vec<f64>,
    preselected: Vec<usize>,
    alpha: f64,
    slope: f64,
}

impl ProbabilisticMask {
    /// Builds a mask from raw probabilities, projecting them onto the budget.
    pub fn new(p: Vec<f64>, preselected: Vec<usize>, alpha: f64, slope: f64) -> Result<Self> {
        check_slope(slope)?;
        if let Some(&i) = preselected.iter().find(|&&i| i >= p.len()) {
            return Err(Error::Validation(format!(
                "preselected column {i} outside 0..{}",
                p.len()
            )));
        }
        let p = renormalize_probs(&p, alpha, &preselected)?;
        Ok(ProbabilisticMask {
            p,
            preselected,
            alpha,
            slope,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn preselected(&self) -> &[usize] {
        &self.preselected
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Boolean indicator of the preselected columns.
    pub fn preselected_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.p.len()];
        for &i in &self.preselected {
            flags[i] = true;
        }
        flags
    }

    /// Replaces the probabilities and the budget, re-projecting onto it.
    pub fn update(&mut self, p: &[f64], alpha: f64) -> Result<()> {
        self.p = renormalize_probs(p, alpha, &self.preselected)?;
        self.alpha = alpha;
        Ok(())
    }
}

fn check_slope(slope: f64) -> Result<()> {
    if slope > 0.0 && slope.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("slope must be positive, got {slope}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("sparsity must lie in (0, 1], got {alpha}")))
    }
}

/// Seeded initial mask: central preselection, uniform random elsewhere,
/// projected onto mean `alpha`.
pub fn init_prob_mask(
    d: usize,
    alpha: f64,
    preselect_count: usize,
    slope: f64,
    seed: u64,
) -> Result<ProbabilisticMask> {
    if d == 0 {
        return Err(Error::Config("mask needs at least one column".into()));
    }
    if preselect_count > d {
        return Err(Error::Config(format!(
            "cannot preselect {preselect_count} of {d} columns"
        )));
    }
    let alpha = if preselect_count == d { 1.0 } else { alpha };
    check_alpha(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Open interval (0, 1).
    let p: Vec<f64> = (0..d)
        .map(|_| loop {
            let v: f64 = rng.random();
            if v > 0.0 {
                break v;
            }
        })
        .collect();
    ProbabilisticMask::new(p, central_columns(d, preselect_count), alpha, slope)
}

/// Clipped rescaling onto `mean(p) = alpha` with `p = 1` on `preselected`.
///
/// Free entries become `min(1, k·p_i)` where `k ≥ 0` solves the budget
/// equation exactly.
pub fn renormalize_probs(p: &[f64], alpha: f64, preselected: &[usize]) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let d = p.len();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite mask probability".into()));
    }
    let mut fixed = vec![false; d];
    for &i in preselected {
        fixed[i] = true;
    }
    let n_pre = fixed.iter().filter(|&&f| f).count();
    let target = alpha * d as f64 - n_pre as f64;
    if target < -1e-9 {
        return Err(Error::Config(format!(
            "infeasible budget: sparsity {alpha} cannot cover {n_pre} preselected of {d} columns"
        )));
    }
    let target = target.max(0.0);
    let mut out: Vec<f64> = p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let free: Vec<usize> = (0..d).filter(|&i| !fixed[i]).collect();
    for (i, v) in out.iter_mut().enumerate() {
        if fixed[i] {
            *v = 1.0;
        }
    }
    if free.is_empty() {
        return Ok(out);
    }
    if target >= free.len() as f64 - 1e-12 {
        free.iter().for_each(|&i| out[i] = 1.0);
        return Ok(out);
    }
    let sum: f64 = free.iter().map(|&i| out[i]).sum();
    if (sum - target).abs() <= 1e-12 * d as f64 {
        return Ok(out);
    }
    // Too few positive entries to carry the budget: lift the zeros slightly
    // so the rescale can reach it.
    let positive = free.iter().filter(|&&i| out[i] > 0.0).count();
    if (positive as f64) <= target {
        free.iter().for_each(|&i| {
            if out[i] == 0.0 {
                out[i] = 1e-6;
            }
        });
    }
    let mut order = free.clone();
    order.sort_by(|&a, &b| out[b].total_cmp(&out[a]));
    // Saturate the j largest entries and rescale the rest.
    let mut rest: f64 = order.iter().map(|&i| out[i]).sum();
    let mut k = 0.0;
    for j in 0..order.len() {
        let scale = (target - j as f64) / rest;
        let largest_unsaturated = out[order[j]];
        if scale * largest_unsaturated <= 1.0 {
            k = scale;
            for &i in &order[j..] {
                out[i] *= k;
            }
            for &i in &order[..j] {
                out[i] = 1.0;
            }
            break;
        }
        rest -= largest_unsaturated;
    }
    debug_assert!(k > 0.0 || target == 0.0);
    Ok(out)
}

/// `m_i = [u_i ≤ p_i]` with the preselected columns forced on.
pub fn binarize_forward(mask: &ProbabilisticMask, u: &[f64]) -> Result<Vec<bool>> {
    if u.len() != mask.len() {
        return Err(Error::Shape {
            expected: vec![mask.len()],
            got: vec![u.len()],
        });
    }
    let mut m: Vec<bool> = mask.p.iter().zip(u).map(|(&p, &u)| u <= p).collect();
    for &i in &mask.preselected {
        m[i] = true;
    }
    Ok(m)
}

/// `σ_s(p − u)` elementwise.
pub fn relaxed_surrogate(p: &[f64], u: &[f64], slope: f64) -> Result<Vec<f64>> {
    check_slope(slope)?;
    if p.len() != u.len() {
        return Err(Error::Shape {
            expected: vec![p.len()],
            got: vec![u.len()],
        });
    }
    Ok(p.iter()
        .zip(u)
        .map(|(&p, &u)| 1.0 / (1.0 + (-((p - u) * slope)).exp()))
        .collect())
}

/// Differentiable `σ_s(p − u)`; `p` and `u` broadcast against each other.
pub fn relaxed_surrogate_t<T: Real>(p: &Tensor<T>, u: &Tensor<T>, slope: T) -> Tensor<T> {
    p.sub(u).mul_scalar(slope).sigmoid()
}

/// Hard mask `[u ≤ p]` in the forward pass, surrogate gradient in the backward pass.
pub fn straight_through_t<T: Real>(p: &Tensor<T>, u: &Tensor<T>, slope: T) -> Tensor<T> {
    let soft = relaxed_surrogate_t(p, u, slope);
    let hard = p
        .detach()
        .sub(&u.detach())
        .data()
        .iter()
        .map(|&diff| if diff >= T::zero() { T::one() } else { T::zero() })
        .collect();
    soft.with_forward_value(hard)
}

/// Draws one uniform vector `u ∈ [0, 1)^d`.
pub fn sample_uniform(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

/// Fixed seeded realization used for evaluation.
pub fn realize_fixed(mask: &ProbabilisticMask, rows: usize, seed: u64) -> BinaryMask2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = sample_uniform(mask.len(), &mut rng);
    replicate_mask(&binarize_forward(mask, &u).expect("length matches"), rows)
}

/// One line of `0`/`1` characters per mask.
pub fn masks_to_text(masks: &[Vec<bool>]) -> String {
    let mut s = String::new();
    for m in masks {
        s.extend(m.iter().map(|&b| if b { '1' } else { '0' }));
        s.push('\n');
    }
    s
}

/// Parses the output of [`masks_to_text`].
pub fn masks_from_text(text: &str) -> Result<Vec<Vec<bool>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.trim()
                .chars()
                .map(|ch| match ch {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Error::Format(format!("unexpected mask character {other:?}"))),
                })
                .collect()
        })
        .collect()
}
