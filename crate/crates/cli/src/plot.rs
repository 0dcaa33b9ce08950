//! Minimal raster output: histogram bars and grayscale maps as PNG.

use std::path::Path;

use image::{GrayImage, Luma};
use mcmri::io::write_atomic;
use mcmri::phantom::MultiContrastSample;
use mcmri::t2star::T2Regressor;
use mcmri::trainer::{predict_map, reconstruct_magnitudes, MapPredictor, Trainer};
use mcmri::{Error, Result};
use ndarray::Array2;

const BAR_W: u32 = 24;
const GAP: u32 = 4;
const PLOT_H: u32 = 160;

fn save(img: &GrayImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// One dark bar per bin on a white canvas, heights relative to the bin size.
pub fn histogram(counts: &[usize], path: &Path) -> Result<()> {
    let cap = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let width = (counts.len() as u32).max(1) * (BAR_W + GAP) + GAP;
    let mut img = GrayImage::from_pixel(width, PLOT_H + 2 * GAP, Luma([255]));
    for (i, &n) in counts.iter().enumerate() {
        let bar = ((n as f64 / cap) * PLOT_H as f64).round() as u32;
        let x0 = GAP + i as u32 * (BAR_W + GAP);
        for x in x0..x0 + BAR_W {
            for y in (PLOT_H + GAP - bar)..(PLOT_H + GAP) {
                img.put_pixel(x, y, Luma([40]));
            }
        }
    }
    // baseline
    for x in 0..width {
        img.put_pixel(x, PLOT_H + GAP, Luma([0]));
    }
    save(&img, path)
}

/// Linear grayscale with `[0, max]` mapped to `[0, 255]`.
pub fn gray(map: &Array2<f64>, max: f64, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]] / max;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save(&img, path)
}

pub struct MapPanels {
    /// Reconstructed magnitudes, one per contrast.
    pub magnitudes: Vec<Array2<f64>>,
    pub reference: Array2<f64>,
    pub reconstructed: Array2<f64>,
}

/// Reconstruction plus regressor maps from the fully sampled and the reconstructed stack.
pub fn t2star_panels(trainer: &Trainer, reg: &T2Regressor, sample: &MultiContrastSample) -> Result<MapPanels> {
    let mags = reconstruct_magnitudes(Some(trainer.model()), &trainer.eval_masks(), &[sample])?
        .swap_remove(0);
    let predictor = MapPredictor::Regressor(reg);
    Ok(MapPanels {
        reference: predict_map(&predictor, &sample.magnitudes())?,
        reconstructed: predict_map(&predictor, &mags)?,
        magnitudes: mags,
    })
}
