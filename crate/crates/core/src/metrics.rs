//! Image and map quality metrics and mask analytics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported in place of `+∞` for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: vec![a.nrows(), a.ncols()],
            got: vec![b.nrows(), b.ncols()],
        });
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP)
}

/// `10·log10(range² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(reference: &Array2<f64>, test: &Array2<f64>, data_range: f64) -> Result<f64> {
    check_same(reference, test)?;
    let mse = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(psnr_from_mse(mse, data_range))
}

/// PSNR restricted to pixels where `mask` is set.
pub fn psnr_masked(
    reference: &Array2<f64>,
    test: &Array2<f64>,
    mask: &Array2<bool>,
    data_range: f64,
) -> Result<f64> {
    check_same(reference, test)?;
    if mask.dim() != reference.dim() {
        return Err(Error::Shape {
            expected: vec![reference.nrows(), reference.ncols()],
            got: vec![mask.nrows(), mask.ncols()],
        });
    }
    let (sum, n) = reference
        .iter()
        .zip(test)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((a, b), _)| (s + (a - b) * (a - b), n + 1));
    if n == 0 {
        return Err(Error::Validation("empty evaluation mask".into()));
    }
    Ok(psnr_from_mse(sum / n as f64, data_range))
}

/// Reference maximum, used as the PSNR/SSIM dynamic range.
pub fn data_range(reference: &Array2<f64>) -> f64 {
    reference.iter().cloned().fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

pub(crate) fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let taps: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable filtering over the fully covered ("valid") region.
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(r, c)| {
        taps.iter().enumerate().map(|(i, t)| t * img[[r, c + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        taps.iter().enumerate().map(|(i, t)| t * rows[[r + i, c]]).sum::<f64>()
    })
}

/// Local SSIM values over every window position.
pub fn ssim_map(
    reference: &Array2<f64>,
    test: &Array2<f64>,
    params: &SsimParams,
    data_range: f64,
) -> Result<Array2<f64>> {
    check_same(reference, test)?;
    let (h, w) = reference.dim();
    if params.window.is_multiple_of(2) || params.window > h.min(w) {
        return Err(Error::Validation(format!(
            "SSIM window must be odd and at most {}, got {}",
            h.min(w),
            params.window
        )));
    }
    let taps = gaussian_taps(params.window, params.sigma);
    let mx = filter_valid(reference, &taps);
    let my = filter_valid(test, &taps);
    let mxx = filter_valid(&(reference * reference), &taps);
    let myy = filter_valid(&(test * test), &taps);
    let mxy = filter_valid(&(reference * test), &taps);
    let c1 = (params.k1 * data_range).powi(2);
    let c2 = (params.k2 * data_range).powi(2);
    let mut out = Array2::zeros(mx.dim());
    ndarray::Zip::from(&mut out)
        .and(&mx)
        .and(&my)
        .and(&mxx)
        .and(&myy)
        .and(&mxy)
        .for_each(|o, &ux, &uy, &sxx, &syy, &sxy| {
            let vx = sxx - ux * ux;
            let vy = syy - uy * uy;
            let cov = sxy - ux * uy;
            *o = ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        });
    Ok(out)
}

/// Mean local SSIM.
pub fn ssim(
    reference: &Array2<f64>,
    test: &Array2<f64>,
    params: &SsimParams,
    data_range: f64,
) -> Result<f64> {
    let m = ssim_map(reference, test, params, data_range)?;
    Ok(m.mean().expect("non-empty map"))
}

/// Mean local SSIM over windows centred on `mask` pixels.
pub fn ssim_masked(
    reference: &Array2<f64>,
    test: &Array2<f64>,
    mask: &Array2<bool>,
    params: &SsimParams,
    data_range: f64,
) -> Result<f64> {
    let m = ssim_map(reference, test, params, data_range)?;
    let off = params.window / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((r, c), &v) in m.indexed_iter() {
        if mask[[r + off, c + off]] {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation("evaluation mask has no interior pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Counts sampled columns in consecutive bins of `bin_len` (the last bin may be short).
pub fn mask_histogram(columns: &[bool], bin_len: usize) -> Result<Vec<usize>> {
    if bin_len == 0 {
        return Err(Error::Config("histogram bin length must be positive".into()));
    }
    Ok(columns
        .chunks(bin_len)
        .map(|chunk| chunk.iter().filter(|&&b| b).count())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastMetrics {
    pub contrast: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub alpha: f64,
    pub ratio: f64,
}

/// Map quality with background ("bg") and restricted to the foreground ("nbg").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    /// Mean squared error of the whole map in units of the T2* ceiling.
    pub loss: f64,
    pub psnr_bg: f64,
    pub ssim_bg: f64,
    pub psnr_nbg: f64,
    pub ssim_nbg: f64,
}

/// One CSV row: one contrast of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: usize,
    pub contrast: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_contrast: Vec<ContrastMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub map: Option<MapMetrics>,
    pub mask_histograms: Vec<Vec<usize>>,
    pub rows: Vec<SampleRow>,
}

impl MetricsReport {
    /// Aggregates per-sample rows into per-contrast means.
    pub fn from_rows(
        rows: Vec<SampleRow>,
        alphas: &[f64],
        map: Option<MapMetrics>,
        mask_histograms: Vec<Vec<usize>>,
    ) -> Self {
        let per_contrast: Vec<ContrastMetrics> = alphas
            .iter()
            .enumerate()
            .map(|(c, &alpha)| {
                let mine: Vec<&SampleRow> = rows.iter().filter(|r| r.contrast == c).collect();
                let n = mine.len().max(1) as f64;
                ContrastMetrics {
                    contrast: c,
                    psnr: mine.iter().map(|r| r.psnr).sum::<f64>() / n,
                    ssim: mine.iter().map(|r| r.ssim).sum::<f64>() / n,
                    alpha,
                    ratio: 1.0 / alpha,
                }
            })
            .collect();
        let c = per_contrast.len().max(1) as f64;
        MetricsReport {
            mean_psnr: per_contrast.iter().map(|m| m.psnr).sum::<f64>() / c,
            mean_ssim: per_contrast.iter().map(|m| m.ssim).sum::<f64>() / c,
            per_contrast,
            map,
            mask_histograms,
            rows,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Flat CSV, one row per contrast per sample.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random::<f64>())
    }

    #[test]
    fn psnr_formula() {
        let a = Array2::<f64>::zeros((10, 10));
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Array2::from_elem((10, 10), 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = Array2::from_elem((10, 10), 0.01);
        assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Array2::zeros((10, 9)), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let img = random_image(32, 1);
        let mut last = f64::INFINITY;
        for (i, sigma) in [0.01, 0.02, 0.05, 0.1, 0.2].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let n = Normal::new(0.0, *sigma).unwrap();
            let noisy = img.mapv(|v| v + n.sample(&mut rng));
            let p = psnr(&img, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identical_and_inverted() {
        let a = random_image(32, 2);
        assert!((ssim(&a, &a, &SsimParams::default(), 1.0).unwrap() - 1.0).abs() < 1e-9);
        let inv = a.mapv(|v| 1.0 - v);
        assert!(ssim(&a, &inv, &SsimParams::default(), 1.0).unwrap() < 0.5);
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let a = Array2::from_elem((16, 16), 0.5);
        let b = Array2::from_elem((16, 16), 0.6);
        let c1 = 0.01f64.powi(2);
        // Zero variances: the contrast-structure factor is c2 / c2 = 1.
        let expected = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        let got = ssim(&a, &b, &SsimParams::default(), 1.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn ssim_window_validation() {
        let a = random_image(8, 3);
        assert!(ssim(&a, &a, &SsimParams::default(), 1.0).is_err());
        let p = SsimParams {
            window: 4,
            ..SsimParams::default()
        };
        assert!(ssim(&random_image(16, 3), &random_image(16, 4), &p, 1.0).is_err());
    }

    #[test]
    fn masked_metrics_ignore_outside() {
        let a = random_image(24, 5);
        let mut b = a.clone();
        let mut mask = Array2::from_elem((24, 24), false);
        for r in 6..18 {
            for c in 6..18 {
                mask[[r, c]] = true;
            }
        }
        b[[0, 0]] += 5.0;
        assert_eq!(psnr_masked(&a, &b, &mask, 1.0).unwrap(), PSNR_CAP);
        assert!((ssim_masked(&a, &b, &mask, &SsimParams::default(), 1.0).unwrap() - 1.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 1.0).unwrap() < PSNR_CAP);
    }

    #[test]
    fn histogram_bins() {
        let cols: Vec<bool> = (0..20).map(|c| c < 10).collect();
        assert_eq!(mask_histogram(&cols, 10).unwrap(), vec![10, 0]);
        assert_eq!(mask_histogram(&[true; 25], 10).unwrap(), vec![10, 10, 5]);
        assert!(mask_histogram(&cols, 0).is_err());
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let rows = vec![
            SampleRow { sample: 0, contrast: 0, psnr: 30.0, ssim: 0.8 },
            SampleRow { sample: 0, contrast: 1, psnr: 20.0, ssim: 0.6 },
            SampleRow { sample: 1, contrast: 0, psnr: 32.0, ssim: 0.9 },
            SampleRow { sample: 1, contrast: 1, psnr: 22.0, ssim: 0.7 },
        ];
        let r = MetricsReport::from_rows(rows, &[0.25, 0.5], None, vec![]);
        assert_eq!(r.per_contrast.len(), 2);
        assert!((r.per_contrast[0].psnr - 31.0).abs() < 1e-12);
        assert!((r.mean_psnr - 26.0).abs() < 1e-12);
        assert_eq!(r.per_contrast[1].ratio, 2.0);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("sample,contrast,psnr,ssim"));
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn ssim_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random_image(16, s1);
            let b = random_image(16, s2 + 1000);
            let p = SsimParams::default();
            let ab = ssim(&a, &b, &p, 1.0).unwrap();
            let ba = ssim(&b, &a, &p, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_is_scale_invariant_after_normalization(seed in 0u64..1000) {
            use crate::kspace::ComplexImage;
            use crate::phantom::normalize;
            let a = random_image(16, seed);
            let b = random_image(16, seed + 5000);
            let eval = |k: f64| {
                let na = normalize(&ComplexImage::from_real(&a.mapv(|v| v * k)).unwrap()).unwrap().magnitude();
                let nb = normalize(&ComplexImage::from_real(&b.mapv(|v| v * k)).unwrap()).unwrap().magnitude();
                psnr(&na, &nb, data_range(&na)).unwrap()
            };
            prop_assert!((eval(1.0) - eval(10.0)).abs() < 1e-9);
        }
    }
}
