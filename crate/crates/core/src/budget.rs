//! Per-contrast sparsity allocation under a shared budget.
//!
//! `α_c = C·α·softmax(w)_c`, clamped into `[floor, 1]`; whatever a clamped
//! contrast gives up or takes is redistributed among the others in
//! proportion to their softmax weights, so `mean(α_c) = α` always holds.

use mcmri_grad::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    Fixed,
    Learnable,
}

impl std::str::FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(RatioMode::Fixed),
            "learnable" => Ok(RatioMode::Learnable),
            other => Err(Error::Config(format!("unknown ratio mode {other:?}"))),
        }
    }
}

/// Which contrasts ended up pinned, and the resulting per-entry budget.
#[derive(Clone, Debug, PartialEq)]
struct Solution {
    alphas: Vec<f64>,
    /// `Some(v)` for clamped entries.
    pinned: Vec<Option<f64>>,
    /// Mean budget per free entry.
    free_mean: f64,
}

fn solve(w: &[f64], alpha: f64, floor: f64) -> Result<Solution> {
    let c = w.len();
    if c == 0 {
        return Err(Error::Config("at least one contrast is required".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!(
            "total sparsity must lie in (0, 1], got {alpha}"
        )));
    }
    if floor > alpha + 1e-12 {
        return Err(Error::Config(format!(
            "total sparsity {alpha} is below the per-contrast floor {floor}"
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite budget logit".into()));
    }
    let wmax = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|&v| (v - wmax).exp()).collect();
    // Water level λ with Σ clamp(λ·e_c, floor, 1) = C·α; it only decides
    // which entries are pinned, the free values are then computed in closed form.
    let target = c as f64 * alpha;
    let filled = |lambda: f64| -> f64 { e.iter().map(|&v| (lambda * v).clamp(floor, 1.0)).sum() };
    let (mut lo, mut hi) = (0.0, 1.0);
    while filled(hi) < target && hi < 1e300 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let pinned: Vec<Option<f64>> = e
        .iter()
        .map(|&v| {
            let raw = lambda * v;
            if raw >= 1.0 {
                Some(1.0)
            } else if raw <= floor && floor > 0.0 {
                Some(floor)
            } else {
                None
            }
        })
        .collect();
    let n_free = pinned.iter().filter(|p| p.is_none()).count();
    let pinned_sum: f64 = pinned.iter().flatten().sum();
    let free_mean = if n_free == c {
        alpha
    } else if n_free == 0 {
        0.0
    } else {
        (target - pinned_sum) / n_free as f64
    };
    let alphas = allocate_free(&e, &pinned, free_mean);
    Ok(Solution {
        alphas,
        pinned,
        free_mean,
    })
}

/// `free_mean · (n_free · e_c / Σ_free e)`; uniform logits give `free_mean` exactly.
fn allocate_free(e: &[f64], pinned: &[Option<f64>], free_mean: f64) -> Vec<f64> {
    let n_free = pinned.iter().filter(|p| p.is_none()).count() as f64;
    let total: f64 = e
        .iter()
        .zip(pinned)
        .filter(|(_, p)| p.is_none())
        .map(|(v, _)| v)
        .sum();
    e.iter()
        .zip(pinned)
        .map(|(&v, p)| match p {
            Some(fixed) => *fixed,
            None => free_mean * (n_free * v / total),
        })
        .collect()
}

/// Per-contrast sparsities from logits `w` with no lower floor.
pub fn allocate_ratios(w: &[f64], alpha_total: f64) -> Result<Vec<f64>> {
    allocate_ratios_with_floor(w, alpha_total, 0.0)
}

/// Per-contrast sparsities, each kept within `[floor, 1]`.
pub fn allocate_ratios_with_floor(w: &[f64], alpha_total: f64, floor: f64) -> Result<Vec<f64>> {
    Ok(solve(w, alpha_total, floor)?.alphas)
}

/// Differentiable allocation; clamped entries are constants.
pub fn allocate_ratios_t<T: Real>(w: &Tensor<T>, alpha_total: f64, floor: f64) -> Result<Tensor<T>> {
    let wv: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let sol = solve(&wv, alpha_total, floor)?;
    let c = wv.len();
    let wmax = w.data().iter().cloned().fold(T::neg_infinity(), T::max);
    let free_flags: Vec<T> = sol
        .pinned
        .iter()
        .map(|p| if p.is_none() { T::one() } else { T::zero() })
        .collect();
    let pinned_vals: Vec<T> = sol.pinned.iter().map(|p| T::of(p.unwrap_or(0.0))).collect();
    let free = Tensor::new(free_flags, &[c]);
    let n_free = sol.pinned.iter().filter(|p| p.is_none()).count();
    if n_free == 0 {
        return Ok(Tensor::new(pinned_vals, &[c]));
    }
    let e = w.add_scalar(-wmax).exp().mul(&free);
    let total = e.sum_all();
    let share = e.mul_scalar(T::of(n_free as f64)).div(&total);
    Ok(share
        .mul_scalar(T::of(sol.free_mean))
        .add(&Tensor::new(pinned_vals, &[c])))
}

/// `r = 1 / α`.
pub fn sparsity_to_acceleration(alpha: f64) -> Result<f64> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(1.0 / alpha)
    } else {
        Err(Error::Domain(format!("sparsity must lie in (0, 1], got {alpha}")))
    }
}

/// Learnable (or fixed) split of the total sampling budget across contrasts.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetAllocation {
    w: Vec<f64>,
    alpha_total: f64,
    floor: f64,
    mode: RatioMode,
}

impl BudgetAllocation {
    /// Uniform logits, which allocate `alpha_total` to every contrast.
    pub fn new(contrasts: usize, alpha_total: f64, floor: f64, mode: RatioMode) -> Result<Self> {
        let b = BudgetAllocation {
            w: vec![0.0; contrasts],
            alpha_total,
            floor,
            mode,
        };
        solve(&b.w, alpha_total, floor)?;
        Ok(b)
    }

    pub fn logits(&self) -> &[f64] {
        &self.w
    }

    pub fn set_logits(&mut self, w: Vec<f64>) -> Result<()> {
        if w.len() != self.w.len() {
            return Err(Error::Shape {
                expected: vec![self.w.len()],
                got: vec![w.len()],
            });
        }
        solve(&w, self.alpha_total, self.floor)?;
        self.w = w;
        Ok(())
    }

    pub fn alpha_total(&self) -> f64 {
        self.alpha_total
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn mode(&self) -> RatioMode {
        self.mode
    }

    pub fn contrasts(&self) -> usize {
        self.w.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        match self.mode {
            RatioMode::Fixed => vec![self.alpha_total; self.w.len()],
            RatioMode::Learnable => solve(&self.w, self.alpha_total, self.floor)
                .expect("validated on construction")
                .alphas,
        }
    }

    pub fn accelerations(&self) -> Vec<f64> {
        self.alphas().iter().map(|a| 1.0 / a).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn uniform_logits_reproduce_fixed_mode_exactly() {
        for c in 1..8 {
            for &alpha in &[0.1, 0.25, 1.0 / 3.0, 0.5, 0.7, 1.0] {
                let a = allocate_ratios(&vec![0.37; c], alpha).unwrap();
                assert!(a.iter().all(|&v| v == alpha), "c={c} alpha={alpha} {a:?}");
                let t = allocate_ratios_t(&Tensor::<f64>::new(vec![-1.5; c], &[c]), alpha, 0.0)
                    .unwrap();
                assert!(t.data().iter().all(|&v| v == alpha));
            }
        }
        let learn = BudgetAllocation::new(5, 0.25, 0.05, RatioMode::Learnable).unwrap();
        let fixed = BudgetAllocation::new(5, 0.25, 0.05, RatioMode::Fixed).unwrap();
        assert_eq!(learn.alphas(), fixed.alphas());
    }

    #[test]
    fn two_contrast_example() {
        let a = allocate_ratios(&[3f64.ln(), 0.0], 0.25).unwrap();
        assert!((a[0] - 0.375).abs() < 1e-12);
        assert!((a[1] - 0.125).abs() < 1e-12);
        let r: Vec<f64> = a.iter().map(|&v| sparsity_to_acceleration(v).unwrap()).collect();
        assert!((r[0] - 8.0 / 3.0).abs() < 1e-9);
        assert!((r[1] - 8.0).abs() < 1e-9);
    }

    #[test]
    fn clamping_redistributes_surplus() {
        // Raw: 3 * 0.6 * softmax = [~1.6, ~0.1, ~0.1]; first entry pinned at 1.
        let a = allocate_ratios(&[3.0, 0.0, 0.0], 0.6).unwrap();
        assert_eq!(a[0], 1.0);
        assert!((a[1] - 0.4).abs() < 1e-12 && (a[2] - 0.4).abs() < 1e-12);
        let floored = allocate_ratios_with_floor(&[0.0, -6.0, 0.0], 0.3, 0.1).unwrap();
        assert_eq!(floored[1], 0.1);
        assert!((mean(&floored) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_budgets() {
        assert!(matches!(allocate_ratios(&[0.0, 0.0], 1.5), Err(Error::Config(_))));
        assert!(matches!(allocate_ratios(&[0.0, 0.0], 0.0), Err(Error::Config(_))));
        assert!(allocate_ratios(&[], 0.5).is_err());
        assert!(matches!(sparsity_to_acceleration(0.0), Err(Error::Domain(_))));
        assert_eq!(sparsity_to_acceleration(0.5).unwrap(), 2.0);
        assert_eq!(sparsity_to_acceleration(1.0).unwrap(), 1.0);
    }

    #[test]
    fn small_sparsity_maps_to_high_acceleration() {
        let r = sparsity_to_acceleration(0.0893).unwrap();
        assert!((r - 11.2).abs() < 0.05);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w0 = vec![0.3, -0.2, 0.1, 0.5];
        for j in 0..4 {
            for c in 0..4 {
                let wt = Tensor::<f64>::leaf(w0.clone(), &[4]);
                let out = allocate_ratios_t(&wt, 0.25, 0.0).unwrap();
                let mut seed = vec![0.0; 4];
                seed[c] = 1.0;
                let g = out.backward_with(seed).get(&wt).unwrap()[j];
                let h = 1e-6;
                let f = |d: f64| {
                    let mut w = w0.clone();
                    w[j] += d;
                    allocate_ratios(&w, 0.25).unwrap()[c]
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "c={c} j={j} {g} {fd}");
            }
        }
    }

    #[test]
    fn tensor_and_plain_allocations_agree_with_clamping() {
        let w = vec![2.5, 0.0, -0.5, 0.0, 3.0];
        let plain = allocate_ratios_with_floor(&w, 0.5, 0.1).unwrap();
        let t = allocate_ratios_t(&Tensor::<f64>::new(w, &[5]), 0.5, 0.1).unwrap();
        for (a, b) in plain.iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn budget_conserved_and_order_preserved(
            w in prop::collection::vec(-3.0f64..3.0, 1..8),
            alpha in 0.1f64..1.0,
        ) {
            let floor = 0.05;
            let a = allocate_ratios_with_floor(&w, alpha, floor).unwrap();
            prop_assert!((mean(&a) - alpha).abs() < 1e-6);
            prop_assert!(a.iter().all(|&v| v > 0.0 && v <= 1.0 && v >= floor - 1e-12));
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if w[i] > w[j] {
                        prop_assert!(a[i] >= a[j] - 1e-12);
                    }
                }
            }
        }
    }
}
