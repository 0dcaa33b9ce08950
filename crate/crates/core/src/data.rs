//! Phantom datasets: generation, persistence and splits.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, NamedArray, NamedArrays};
use crate::kspace::ComplexImage;
use crate::phantom::{generate_with, normalize_sample, split_indices, MultiContrastSample, PhantomConfig, Split};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: String,
    pub split: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub phantom: PhantomConfig,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<MultiContrastSample>,
    pub split: Split,
}

/// Seed of sample `i` in a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

impl Dataset {
    /// `n` normalized phantoms and a seeded split.
    pub fn generate(
        config: &PhantomConfig,
        n: usize,
        seed: u64,
        train_frac: f64,
        val_frac: f64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("dataset must contain at least one sample".into()));
        }
        let samples = (0..n)
            .map(|i| normalize_sample(&generate_with(config, sample_seed(seed, i))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            split: split_indices(n, seed, train_frac, val_frac)?,
        })
    }

    fn pick(&self, idx: &[usize]) -> Vec<&MultiContrastSample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn train(&self) -> Vec<&MultiContrastSample> {
        self.pick(&self.split.train)
    }

    pub fn val(&self) -> Vec<&MultiContrastSample> {
        self.pick(&self.split.val)
    }

    pub fn test(&self) -> Vec<&MultiContrastSample> {
        self.pick(&self.split.test)
    }

    /// Writes one container per sample plus `manifest.json` into `dir`.
    pub fn save(
        &self,
        dir: &Path,
        phantom: &PhantomConfig,
        seed: u64,
        train_frac: f64,
        val_frac: f64,
    ) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("sample_{i:05}.safetensors");
            let bytes = io::encode_named(&sample_arrays(s)?, Some(&format!("{{\"seed\":{}}}", s.seed)))?;
            io::write_atomic(&dir.join(&name), &bytes)?;
            entries.push(SampleEntry {
                path: name,
                split: self.split.membership(i).to_string(),
                seed: s.seed,
                sha256: io::sha256_hex(&bytes),
            });
        }
        let manifest = DatasetManifest {
            phantom: phantom.clone(),
            seed,
            train_frac,
            val_frac,
            samples: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        io::write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())?;
        Ok(manifest)
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, e) in manifest.samples.iter().enumerate() {
            let (arrays, _) = io::load_named(&dir.join(&e.path))?;
            samples.push(sample_from_arrays(&arrays, e.seed)?);
            match e.split.as_str() {
                "train" => split.train.push(i),
                "val" => split.val.push(i),
                "test" => split.test.push(i),
                other => return Err(Error::Format(format!("unknown split {other:?}"))),
            }
        }
        Ok((Dataset { samples, split }, manifest))
    }
}

fn sample_arrays(s: &MultiContrastSample) -> Result<NamedArrays> {
    let (h, w) = s.dims();
    let c = s.contrasts();
    let mut images = Vec::with_capacity(c * 2 * h * w);
    for im in &s.images {
        images.extend(im.data().iter().map(|z| z.re));
        images.extend(im.data().iter().map(|z| z.im));
    }
    let mut out = NamedArrays::new();
    out.insert("images".into(), NamedArray::new(&[c, 2, h, w], images)?);
    out.insert("t2star_gt".into(), NamedArray::new(&[h, w], s.t2star_gt.iter().copied().collect())?);
    out.insert(
        "proton_density".into(),
        NamedArray::new(&[h, w], s.proton_density.iter().copied().collect())?,
    );
    out.insert("delta_t".into(), NamedArray::new(&[1], vec![s.delta_t])?);
    Ok(out)
}

fn get<'a>(arrays: &'a NamedArrays, name: &str) -> Result<&'a NamedArray> {
    arrays
        .get(name)
        .ok_or_else(|| Error::Format(format!("missing array {name:?}")))
}

fn plane(a: &NamedArray, h: usize, w: usize) -> Result<Array2<f64>> {
    Array2::from_shape_vec((h, w), a.data.clone()).map_err(|e| Error::Format(e.to_string()))
}

fn sample_from_arrays(arrays: &NamedArrays, seed: u64) -> Result<MultiContrastSample> {
    let images = get(arrays, "images")?;
    let [c, 2, h, w] = images.shape[..] else {
        return Err(Error::Format(format!("images must be [C, 2, H, W], got {:?}", images.shape)));
    };
    let n = h * w;
    let imgs = (0..c)
        .map(|k| {
            let re = &images.data[(2 * k) * n..(2 * k + 1) * n];
            let im = &images.data[(2 * k + 1) * n..(2 * k + 2) * n];
            let z: Vec<Complex64> = re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect();
            ComplexImage::new(Array2::from_shape_vec((h, w), z).map_err(|e| Error::Format(e.to_string()))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiContrastSample {
        images: imgs,
        t2star_gt: plane(get(arrays, "t2star_gt")?, h, w)?,
        delta_t: get(arrays, "delta_t")?.data[0],
        proton_density: plane(get(arrays, "proton_density")?, h, w)?,
        seed,
    })
}
