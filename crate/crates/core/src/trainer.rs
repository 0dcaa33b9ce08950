//! Joint optimization of sampling masks, acceleration ratios and
//! reconstruction networks, evaluation and checkpoints.

use std::path::Path;
use std::time::Instant;

use mcmri_grad::{Adam, AdamConfig, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{allocate_ratios_t, BudgetAllocation, RatioMode};
use crate::config::{MaskMode, Objective, RecLoss, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{self, NamedArray, NamedArrays};
use crate::kspace::{fft2c_t, ifft2c_t, images_to_tensor, magnitude_t, tensor_to_image};
use crate::maskgen::{init_prob_mask, realize_fixed, straight_through_t, ProbabilisticMask};
use crate::metrics::{
    data_range, gaussian_taps, mask_histogram, psnr, psnr_masked, ssim, ssim_masked, MapMetrics,
    MetricsReport, SampleRow, SsimParams,
};
use crate::phantom::MultiContrastSample;
use crate::recon::{ContrastInputs, ParamStore, ReconModel, Variant};
use crate::t2star::{fit_t2star_loglinear, foreground_mask, T2Regressor, DEFAULT_DILATION, T2_MAX};

/// Bin length of the reported mask histograms, in columns.
pub const HISTOGRAM_BIN: usize = 10;

const MAG_EPS: f32 = 1e-8;

/// Ground truth of a mini-batch, one `[B, 2, H, W]` tensor per contrast.
pub struct Batch {
    x_gt: Vec<Tensor<f32>>,
    k_full: Vec<Tensor<f32>>,
    map_target: Option<Tensor<f32>>,
}

impl Batch {
    pub fn new(samples: &[&MultiContrastSample], regressor: Option<&T2Regressor>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Validation("empty batch".into()))?;
        let c = first.contrasts();
        if samples.iter().any(|s| s.contrasts() != c || s.dims() != first.dims()) {
            return Err(Error::Validation("batch samples differ in geometry".into()));
        }
        let x_gt: Vec<Tensor<f32>> = (0..c)
            .map(|k| {
                let imgs: Vec<_> = samples.iter().map(|s| s.images[k].data()).collect();
                images_to_tensor(&imgs)
            })
            .collect();
        let k_full = x_gt.iter().map(fft2c_t).collect();
        let map_target = regressor
            .map(|r| {
                let t = r.map_t(&magnitude_stack(samples))?;
                Ok::<_, Error>(Tensor::new(t.data().iter().map(|&v| v as f32).collect(), t.shape()))
            })
            .transpose()?;
        Ok(Batch {
            x_gt,
            k_full,
            map_target,
        })
    }

    pub fn size(&self) -> usize {
        self.x_gt[0].dim(0)
    }

    pub fn contrasts(&self) -> usize {
        self.x_gt.len()
    }
}

/// Exact magnitudes as an `[N, C, H, W]` tensor.
fn magnitude_stack(samples: &[&MultiContrastSample]) -> Tensor<f64> {
    let (h, w) = samples[0].dims();
    let c = samples[0].contrasts();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        for im in &s.images {
            data.extend(im.data().iter().map(|z| z.norm()));
        }
    }
    Tensor::new(data, &[samples.len(), c, h, w])
}

/// Differentiable mean SSIM of `[N, 1, H, W]` magnitudes over valid windows.
fn ssim_t(x: &Tensor<f32>, y: &Tensor<f32>, ranges: &[f64]) -> Tensor<f32> {
    let p = SsimParams::default();
    let taps: Vec<f32> = gaussian_taps(p.window, p.sigma).iter().map(|&v| v as f32).collect();
    let kv = Tensor::new(taps.clone(), &[1, 1, p.window, 1]);
    let kh = Tensor::new(taps, &[1, 1, 1, p.window]);
    let filt = |t: &Tensor<f32>| t.conv2d(&kv, None, 1, 0).conv2d(&kh, None, 1, 0);
    let n = ranges.len();
    let c1 = Tensor::new(ranges.iter().map(|r| ((p.k1 * r).powi(2)) as f32).collect(), &[n, 1, 1, 1]);
    let c2 = Tensor::new(ranges.iter().map(|r| ((p.k2 * r).powi(2)) as f32).collect(), &[n, 1, 1, 1]);
    let mx = filt(x);
    let my = filt(y);
    let vx = filt(&x.sqr()).sub(&mx.sqr());
    let vy = filt(&y.sqr()).sub(&my.sqr());
    let cov = filt(&x.mul(y)).sub(&mx.mul(&my));
    let num = mx.mul(&my).mul_scalar(2.0).add(&c1).mul(&cov.mul_scalar(2.0).add(&c2));
    let den = mx.sqr().add(&my.sqr()).add(&c1).mul(&vx.add(&vy).add(&c2));
    num.div(&den).mean_all()
}

/// Gradients of the auxiliary (mask and ratio) parameters.
#[derive(Clone, Debug)]
pub struct AuxGradients {
    pub loss: f64,
    /// One vector per mask slot; zeros when the mask is frozen.
    pub probs: Vec<Vec<f64>>,
    /// Ratio logits; zeros in fixed-ratio mode.
    pub logits: Vec<f64>,
}

pub struct ForwardOutput {
    pub loss: Tensor<f32>,
    pub recons: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub alpha: Vec<f64>,
    pub ratio: Vec<f64>,
    pub wall_time: f64,
}

/// How predicted maps are synthesized during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum MapPredictor<'a> {
    Regressor(&'a T2Regressor),
    /// Log-linear fit, background (first echo below `threshold`) set to 0.
    LogLinear { delta_t: f64, threshold: f64 },
}

/// Map evaluation: references come from the regressor on fully sampled images.
#[derive(Clone, Copy, Debug)]
pub struct MapEval<'a> {
    pub reference: &'a T2Regressor,
    pub predictor: MapPredictor<'a>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config_text: String,
    config: String,
    variant: Variant,
    depth: usize,
    channels: Vec<usize>,
    n_blocks: usize,
    contrasts: usize,
    steps: usize,
    regressor: Option<T2Regressor>,
}

pub struct Trainer {
    cfg: TrainConfig,
    config_text: String,
    model: ReconModel<f32>,
    /// `mask.p{slot}` then `budget.w`.
    aux: ParamStore<f32>,
    masks: Vec<ProbabilisticMask>,
    random_mask: Option<Vec<bool>>,
    budget: BudgetAllocation,
    adam: Adam,
    rng: ChaCha8Rng,
    regressor: Option<T2Regressor>,
    steps: usize,
}

fn seed_for(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Trainer {
    /// Fresh model and masks. `config_text` is kept verbatim for checkpoints.
    pub fn new(cfg: TrainConfig, config_text: &str, regressor: Option<T2Regressor>) -> Result<Self> {
        cfg.validate()?;
        if cfg.objective == Objective::Map {
            match &regressor {
                Some(r) if r.is_trained() && r.contrasts() == cfg.contrasts => {}
                Some(_) => {
                    return Err(Error::Config(
                        "the T2* regressor must be trained for the configured contrast count".into(),
                    ))
                }
                None => return Err(Error::Config("map-driven training needs a T2* regressor".into())),
            }
        }
        let regressor = regressor
            .map(|r| r.with_input_scale(cfg.map_input_scale))
            .transpose()?;
        let c = cfg.contrasts;
        let w = cfg.width;
        let model = ReconModel::new(&cfg.recon_config(), c, seed_for(cfg.seed, 1))?;
        let budget = BudgetAllocation::new(c, cfg.alpha, cfg.floor(), cfg.ratio_mode)?;
        let mode = cfg.baseline.mask_mode();
        let slots = if mode == MaskMode::Individual { c } else { 1 };
        let alphas = budget.alphas();
        let mut masks = Vec::with_capacity(slots);
        let mut aux = ParamStore::new();
        for s in 0..slots {
            let a = if mode == MaskMode::Individual { alphas[s] } else { cfg.alpha };
            let m = init_prob_mask(w, a, cfg.preselect, cfg.slope, seed_for(cfg.seed, 100 + s as u64))?;
            aux.add(
                format!("mask.p{s}"),
                m.probs().iter().map(|&v| v as f32).collect(),
                &[w],
            );
            masks.push(m);
        }
        aux.add("budget.w".into(), vec![0.0; c], &[c]);
        for p in aux.iter_mut() {
            let frozen = if p.name() == "budget.w" {
                cfg.ratio_mode == RatioMode::Fixed
            } else {
                mode == MaskMode::Random
            };
            if frozen {
                p.freeze();
            }
            let scale = if p.name() == "budget.w" { cfg.ratio_lr_scale } else { cfg.mask_lr_scale };
            p.set_lr_scale(scale);
        }
        let random_mask = (mode == MaskMode::Random)
            .then(|| realize_fixed(&masks[0], 1, seed_for(cfg.seed, 200)).columns().to_vec());
        let adam = Adam::new(AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        });
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 2)),
            config_text: config_text.to_string(),
            cfg,
            model,
            aux,
            masks,
            random_mask,
            budget,
            adam,
            regressor,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_text(&self) -> &str {
        &self.config_text
    }

    pub fn model(&self) -> &ReconModel<f32> {
        &self.model
    }

    pub fn regressor(&self) -> Option<&T2Regressor> {
        self.regressor.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Probabilistic masks, one per slot (a single slot when shared).
    pub fn masks(&self) -> &[ProbabilisticMask] {
        &self.masks
    }

    pub fn budget(&self) -> &BudgetAllocation {
        &self.budget
    }

    fn slot(&self, contrast: usize) -> usize {
        if self.masks.len() == 1 {
            0
        } else {
            contrast
        }
    }

    /// Current per-contrast sparsities.
    pub fn alphas(&self) -> Vec<f64> {
        self.budget.alphas()
    }

    /// Replaces one slot's probabilities (projected onto its budget).
    pub fn set_mask_probs(&mut self, slot: usize, p: &[f64]) -> Result<()> {
        let a = self.masks[slot].alpha();
        self.masks[slot].update(p, a)?;
        let data = self.masks[slot].probs().iter().map(|&v| v as f32).collect();
        self.aux
            .get_mut(&format!("mask.p{slot}"))
            .expect("mask parameter")
            .set_data(data);
        Ok(())
    }

    /// Sets the ratio logits and re-projects every mask onto its new budget.
    pub fn set_ratio_logits(&mut self, w: &[f64]) -> Result<()> {
        self.aux
            .get_mut("budget.w")
            .expect("ratio parameter")
            .set_data(w.iter().map(|&v| v as f32).collect());
        self.project()
    }

    /// Fresh uniform draws, one `[B, 1, 1, W]` tensor per contrast (shared
    /// masks reuse a single draw).
    pub fn draw_u(&mut self, batch: usize) -> Vec<Tensor<f32>> {
        let w = self.cfg.width;
        let slots = self.masks.len();
        let draws: Vec<Tensor<f32>> = (0..slots)
            .map(|_| {
                let u = (0..batch * w).map(|_| self.rng.random::<f32>()).collect();
                Tensor::new(u, &[batch, 1, 1, w])
            })
            .collect();
        (0..self.cfg.contrasts).map(|c| draws[self.slot(c)].clone()).collect()
    }

    fn alpha_tensor(&self) -> Result<Tensor<f32>> {
        let c = self.cfg.contrasts;
        match self.cfg.ratio_mode {
            RatioMode::Fixed => Ok(Tensor::new(vec![self.cfg.alpha as f32; c], &[c])),
            RatioMode::Learnable => allocate_ratios_t(
                self.aux.get("budget.w").expect("ratio parameter").tensor(),
                self.cfg.alpha,
                self.cfg.floor(),
            ),
        }
    }

    /// Probabilities of one slot rescaled in-graph to the sparsity `alpha`;
    /// the value is the stored probabilities, the gradient also reaches `alpha`.
    fn effective_probs(&self, slot: usize, alpha: &Tensor<f32>) -> Tensor<f32> {
        let p = self.aux.get(&format!("mask.p{slot}")).expect("mask parameter").tensor();
        let flags = self.masks[slot].preselected_flags();
        let d = flags.len();
        let n_pre = flags.iter().filter(|&&f| f).count();
        let free = Tensor::new(flags.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect(), &[d]);
        let pre = Tensor::new(flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(), &[d]);
        let pf = p.mul(&free);
        let budget = alpha.mul_scalar(d as f32).add_scalar(-(n_pre as f32));
        // A contrast at its floor has no free budget and all-zero free
        // probabilities; the clamp keeps that case finite.
        pf.mul(&budget.div(&pf.sum_all().clamp(1e-6, f32::MAX)))
            .add(&pre)
            .with_forward_value(p.to_vec())
    }

    /// Sampling masks (`[B, 1, 1, W]` or `[1, 1, 1, W]`) for given draws.
    fn sampling_masks(&self, us: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let c = self.cfg.contrasts;
        let w = self.cfg.width;
        if us.len() != c {
            return Err(Error::Validation(format!("expected {c} uniform draws, got {}", us.len())));
        }
        if let Some(fixed) = &self.random_mask {
            let m = Tensor::new(fixed.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), &[1, 1, 1, w]);
            return Ok(vec![m; c]);
        }
        let alphas = self.alpha_tensor()?;
        let shared = self.masks.len() == 1;
        let mut out = Vec::with_capacity(c);
        for (k, u) in us.iter().enumerate() {
            let a = if shared {
                Tensor::new(vec![self.cfg.alpha as f32], &[1])
            } else {
                alphas.narrow(0, k, 1)
            };
            let p = self.effective_probs(self.slot(k), &a).reshape(&[1, 1, 1, w]);
            out.push(straight_through_t(&p, u, self.cfg.slope as f32));
        }
        Ok(out)
    }

    /// Undersamples, reconstructs and scores one batch under the given draws.
    pub fn forward(&self, batch: &Batch, us: &[Tensor<f32>]) -> Result<ForwardOutput> {
        if batch.contrasts() != self.cfg.contrasts {
            return Err(Error::Validation(format!(
                "batch has {} contrasts, model expects {}",
                batch.contrasts(),
                self.cfg.contrasts
            )));
        }
        let masks = self.sampling_masks(us)?;
        let y_hat: Vec<Tensor<f32>> = batch.k_full.iter().zip(&masks).map(|(k, m)| k.mul(m)).collect();
        let inputs = ContrastInputs {
            x_zf: y_hat.iter().map(ifft2c_t).collect(),
            y_hat,
            masks: masks.clone(),
        };
        let recons = self.model.reconstruct(&inputs)?;
        let c = recons.len() as f32;
        let loss = match self.cfg.objective {
            Objective::Rec => {
                let per: Vec<Tensor<f32>> = recons
                    .iter()
                    .zip(&batch.x_gt)
                    .map(|(r, x)| match self.cfg.loss {
                        RecLoss::Mse => r.sub(x).sqr().mean_all(),
                        RecLoss::Ssim => {
                            let ref_mag = magnitude_t(x, 0.0);
                            let ranges: Vec<f64> = (0..batch.size())
                                .map(|i| {
                                    let n = ref_mag.numel() / batch.size();
                                    ref_mag.data()[i * n..(i + 1) * n]
                                        .iter()
                                        .fold(0.0f64, |m, &v| m.max(v as f64))
                                })
                                .collect();
                            ssim_t(&magnitude_t(r, MAG_EPS), &ref_mag, &ranges)
                                .neg()
                                .add_scalar(1.0)
                        }
                    })
                    .collect();
                let mut total = per[0].clone();
                for t in &per[1..] {
                    total = total.add(t);
                }
                total.mul_scalar(1.0 / c)
            }
            Objective::Map => {
                let reg = self.regressor.as_ref().expect("checked on construction");
                let target = batch
                    .map_target
                    .as_ref()
                    .ok_or_else(|| Error::Validation("batch was built without map targets".into()))?;
                let mags: Vec<Tensor<f32>> = recons.iter().map(|r| magnitude_t(r, MAG_EPS)).collect();
                let refs: Vec<&Tensor<f32>> = mags.iter().collect();
                let pred = reg.map_t(&Tensor::cat(&refs, 1))?;
                pred.sub(target).mul_scalar(1.0 / T2_MAX as f32).sqr().mean_all()
            }
        };
        Ok(ForwardOutput { loss, recons, masks })
    }

    pub fn batch(&self, samples: &[&MultiContrastSample]) -> Result<Batch> {
        let reg = match self.cfg.objective {
            Objective::Map => self.regressor.as_ref(),
            Objective::Rec => None,
        };
        Batch::new(samples, reg)
    }

    /// Loss and auxiliary gradients without updating anything.
    pub fn aux_gradients(&self, batch: &Batch, us: &[Tensor<f32>]) -> Result<AuxGradients> {
        let out = self.forward(batch, us)?;
        let grads = out.loss.backward();
        let as_f64 = |name: &str| -> Vec<f64> {
            let p = self.aux.get(name).expect("aux parameter");
            grads.get_or_zeros(p.tensor()).iter().map(|&v| v as f64).collect()
        };
        Ok(AuxGradients {
            loss: out.loss.item() as f64,
            probs: (0..self.masks.len()).map(|s| as_f64(&format!("mask.p{s}"))).collect(),
            logits: as_f64("budget.w"),
        })
    }

    /// One optimizer step on a batch; returns the pre-step loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let us = self.draw_u(batch.size());
        let out = self.forward(batch, &us)?;
        let loss = out.loss.item() as f64;
        if !loss.is_finite() {
            return Err(Error::Domain(format!("training loss became {loss}")));
        }
        let grads = out.loss.backward();
        drop(out);
        self.adam
            .step(self.model.params_mut().iter_mut().chain(self.aux.iter_mut()), &grads);
        self.project()?;
        self.steps += 1;
        Ok(loss)
    }

    /// Re-derives the sparsities from the logits and projects every mask
    /// back onto its budget.
    fn project(&mut self) -> Result<()> {
        if self.random_mask.is_some() {
            return Ok(());
        }
        if self.cfg.ratio_mode == RatioMode::Learnable {
            let w = self.aux.get("budget.w").expect("ratio parameter").data();
            self.budget.set_logits(w.iter().map(|&v| v as f64).collect())?;
        }
        let alphas = self.budget.alphas();
        let individual = self.masks.len() > 1;
        for s in 0..self.masks.len() {
            let a = if individual { alphas[s] } else { self.cfg.alpha };
            let name = format!("mask.p{s}");
            let p: Vec<f64> = self.aux.get(&name).expect("mask parameter").data().iter().map(|&v| v as f64).collect();
            self.masks[s].update(&p, a)?;
            let data = self.masks[s].probs().iter().map(|&v| v as f32).collect();
            self.aux.get_mut(&name).expect("mask parameter").set_data(data);
        }
        Ok(())
    }

    /// Fixed binary masks used for evaluation, one per contrast.
    pub fn eval_masks(&self) -> Vec<Vec<bool>> {
        (0..self.cfg.contrasts)
            .map(|c| match &self.random_mask {
                Some(m) => m.clone(),
                None => {
                    let s = self.slot(c);
                    realize_fixed(&self.masks[s], 1, seed_for(self.cfg.eval_seed, s as u64))
                        .columns()
                        .to_vec()
                }
            })
            .collect()
    }

    fn map_eval(&self) -> Option<MapEval<'_>> {
        self.regressor.as_ref().map(|r| MapEval {
            reference: r,
            predictor: MapPredictor::Regressor(r),
        })
    }

    pub fn evaluate(&self, samples: &[&MultiContrastSample]) -> Result<MetricsReport> {
        evaluate_with(
            Some(&self.model),
            &self.eval_masks(),
            &self.alphas(),
            samples,
            self.map_eval(),
            self.cfg.batch_size,
        )
    }

    /// Trains for the configured epochs, reporting each epoch, then
    /// evaluates on the test split.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
    ) -> Result<MetricsReport> {
        let train = data.train();
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let val = data.val();
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..self.cfg.epochs {
            self.adam.set_lr(self.epoch_lr(epoch));
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut n = 0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let samples: Vec<&MultiContrastSample> = chunk.iter().map(|&i| train[i]).collect();
                let batch = self.batch(&samples)?;
                total += self.train_step(&batch)?;
                n += 1;
            }
            let (psnr, ssim) = if val.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                let r = evaluate_with(Some(&self.model), &self.eval_masks(), &self.alphas(), &val, None, self.cfg.batch_size)?;
                (
                    r.per_contrast.iter().map(|m| m.psnr).collect(),
                    r.per_contrast.iter().map(|m| m.ssim).collect(),
                )
            };
            let alpha = self.alphas();
            on_epoch(&EpochLog {
                epoch,
                loss: total / n as f64,
                psnr,
                ssim,
                ratio: alpha.iter().map(|a| 1.0 / a).collect(),
                alpha,
                wall_time: start.elapsed().as_secs_f64(),
            })?;
        }
        let test = data.test();
        if test.is_empty() {
            return Err(Error::Validation("test split is empty".into()));
        }
        self.evaluate(&test)
    }

    /// Cosine interpolation from the base rate to its final fraction.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        let base = self.cfg.learning_rate;
        if self.cfg.epochs < 2 {
            return base;
        }
        let t = epoch as f64 / (self.cfg.epochs - 1) as f64;
        let end = base * self.cfg.final_lr_frac;
        end + (base - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut arrays = NamedArrays::new();
        for p in self.model.params().iter() {
            arrays.insert(
                format!("net.{}", p.name()),
                NamedArray::new(p.shape(), p.data().iter().map(|&v| v as f64).collect())?,
            );
        }
        for (s, m) in self.masks.iter().enumerate() {
            arrays.insert(format!("mask.p{s}"), NamedArray::new(&[m.len()], m.probs().to_vec())?);
        }
        let w = self.aux.get("budget.w").expect("ratio parameter");
        arrays.insert(
            "budget.w".into(),
            NamedArray::new(w.shape(), w.data().iter().map(|&v| v as f64).collect())?,
        );
        if let Some(m) = &self.random_mask {
            arrays.insert(
                "mask.random".into(),
                NamedArray::new(&[m.len()], m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?,
            );
        }
        let rc = self.cfg.recon_config();
        let meta = CheckpointMeta {
            config_text: self.config_text.clone(),
            config: self.cfg.to_toml()?,
            variant: rc.variant,
            depth: rc.depth,
            channels: rc.channels,
            n_blocks: rc.n_blocks,
            contrasts: self.cfg.contrasts,
            steps: self.steps,
            regressor: self.regressor.clone(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        io::save_named(path, &arrays, Some(&meta))
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (arrays, meta) = io::load_named(path)?;
        let meta = meta.ok_or_else(|| Error::Config("checkpoint has no configuration".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Config(format!("bad checkpoint header: {e}")))?;
        let cfg: TrainConfig =
            toml::from_str(&meta.config).map_err(|e| Error::Config(e.message().to_string()))?;
        let rc = cfg.recon_config();
        if rc.variant != meta.variant
            || rc.depth != meta.depth
            || rc.channels != meta.channels
            || rc.n_blocks != meta.n_blocks
            || cfg.contrasts != meta.contrasts
        {
            return Err(Error::Config("checkpoint header disagrees with its configuration".into()));
        }
        let mut t = Trainer::new(cfg, &meta.config_text, meta.regressor)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<&NamedArray> {
            let a = arrays
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks array {name:?}")))?;
            if a.shape != shape {
                return Err(Error::Config(format!(
                    "array {name:?} has shape {:?}, model expects {shape:?}",
                    a.shape
                )));
            }
            Ok(a)
        };
        let expected = t.model.params().len() + t.masks.len() + 1 + usize::from(t.random_mask.is_some());
        if arrays.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint holds {} arrays, model expects {expected}",
                arrays.len()
            )));
        }
        for p in t.model.params_mut().iter_mut() {
            let a = fetch(&format!("net.{}", p.name()), p.shape())?;
            p.set_data(a.data.iter().map(|&v| v as f32).collect());
        }
        let w = fetch("budget.w", &[t.cfg.contrasts])?.data.clone();
        t.aux
            .get_mut("budget.w")
            .expect("ratio parameter")
            .set_data(w.iter().map(|&v| v as f32).collect());
        if t.cfg.ratio_mode == RatioMode::Learnable {
            t.budget.set_logits(w)?;
        }
        let alphas = t.budget.alphas();
        for s in 0..t.masks.len() {
            let name = format!("mask.p{s}");
            let p = fetch(&name, &[t.cfg.width])?.data.clone();
            let a = if t.masks.len() > 1 { alphas[s] } else { t.cfg.alpha };
            t.masks[s].update(&p, a)?;
            let data = t.masks[s].probs().iter().map(|&v| v as f32).collect();
            t.aux.get_mut(&name).expect("mask parameter").set_data(data);
        }
        if t.random_mask.is_some() {
            let m = fetch("mask.random", &[t.cfg.width])?;
            t.random_mask = Some(m.data.iter().map(|&v| v > 0.5).collect());
        }
        t.steps = meta.steps;
        Ok(t)
    }
}

fn mask_tensor(columns: &[bool]) -> Tensor<f32> {
    let w = columns.len();
    Tensor::new(columns.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), &[1, 1, 1, w])
}

/// T2* map from a magnitude stack.
pub fn predict_map(pred: &MapPredictor, mags: &[Array2<f64>]) -> Result<Array2<f64>> {
    let (h, w) = mags[0].dim();
    match pred {
        MapPredictor::Regressor(r) => {
            let mut data = Vec::with_capacity(mags.len() * h * w);
            for m in mags {
                data.extend(m.iter().copied());
            }
            let t = r.map_t(&Tensor::new(data, &[1, mags.len(), h, w]))?;
            Array2::from_shape_vec((h, w), t.to_vec()).map_err(|e| Error::Format(e.to_string()))
        }
        MapPredictor::LogLinear { delta_t, threshold } => {
            let mut signal = vec![0.0; mags.len()];
            Ok(Array2::from_shape_fn((h, w), |(r, c)| {
                for (s, m) in signal.iter_mut().zip(mags) {
                    *s = m[[r, c]];
                }
                if signal[0] < *threshold {
                    0.0
                } else {
                    fit_t2star_loglinear(&signal, *delta_t).unwrap_or(0.0)
                }
            }))
        }
    }
}

/// Reconstructed magnitudes, one stack per sample, under fixed column
/// masks. Zero-filled when `model` is `None`.
pub fn reconstruct_magnitudes(
    model: Option<&ReconModel<f32>>,
    masks: &[Vec<bool>],
    samples: &[&MultiContrastSample],
) -> Result<Vec<Vec<Array2<f64>>>> {
    let batch = Batch::new(samples, None)?;
    let mask_t: Vec<Tensor<f32>> = masks.iter().map(|m| mask_tensor(m)).collect();
    let y_hat: Vec<Tensor<f32>> = batch.k_full.iter().zip(&mask_t).map(|(k, m)| k.mul(m)).collect();
    let x_zf: Vec<Tensor<f32>> = y_hat.iter().map(ifft2c_t).collect();
    let recons = match model {
        Some(m) => m.reconstruct(&ContrastInputs {
            x_zf,
            y_hat,
            masks: mask_t,
        })?,
        None => x_zf,
    };
    Ok((0..samples.len())
        .map(|i| recons.iter().map(|r| tensor_to_image(r, i).mapv(|z| z.norm())).collect())
        .collect())
}

/// Reconstructs `samples` under fixed `masks` (zero-filled when `model` is
/// `None`) and scores magnitudes against the fully sampled images.
pub fn evaluate_with(
    model: Option<&ReconModel<f32>>,
    masks: &[Vec<bool>],
    alphas: &[f64],
    samples: &[&MultiContrastSample],
    maps: Option<MapEval>,
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let c = samples[0].contrasts();
    if masks.len() != c || alphas.len() != c {
        return Err(Error::Validation(format!(
            "{} masks and {} sparsities for {c} contrasts",
            masks.len(),
            alphas.len()
        )));
    }
    let ssim_params = SsimParams::default();
    let mut rows = Vec::new();
    let mut map_sums = [0.0; 5];
    for (chunk_index, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let mags = reconstruct_magnitudes(model, masks, chunk)?;
        for (i, (s, rec_mags)) in chunk.iter().zip(mags).enumerate() {
            let index = chunk_index * batch_size.max(1) + i;
            for (k, test) in rec_mags.iter().enumerate() {
                let reference = s.images[k].magnitude();
                let range = data_range(&reference);
                rows.push(SampleRow {
                    sample: index,
                    contrast: k,
                    psnr: psnr(&reference, test, range)?,
                    ssim: ssim(&reference, test, &ssim_params, range)?,
                });
            }
            if let Some(me) = &maps {
                let gt_mags = s.magnitudes();
                let reference = predict_map(&MapPredictor::Regressor(me.reference), &gt_mags)?;
                let pred = predict_map(&me.predictor, &rec_mags)?;
                let fg = foreground_mask(&gt_mags, DEFAULT_DILATION)?;
                let range = data_range(&reference).max(f64::MIN_POSITIVE);
                let loss = reference
                    .iter()
                    .zip(&pred)
                    .map(|(a, b)| ((a - b) / T2_MAX).powi(2))
                    .sum::<f64>()
                    / reference.len() as f64;
                let bg_psnr = psnr(&reference, &pred, range)?;
                let bg_ssim = ssim(&reference, &pred, &ssim_params, range)?;
                let (nbg_psnr, nbg_ssim) = if fg.is_empty() {
                    (bg_psnr, bg_ssim)
                } else {
                    (
                        psnr_masked(&reference, &pred, &fg.mask, range)?,
                        ssim_masked(&reference, &pred, &fg.mask, &ssim_params, range)?,
                    )
                };
                for (acc, v) in map_sums.iter_mut().zip([loss, bg_psnr, bg_ssim, nbg_psnr, nbg_ssim]) {
                    *acc += v;
                }
            }
        }
    }
    let n = samples.len() as f64;
    let map = maps.map(|_| MapMetrics {
        loss: map_sums[0] / n,
        psnr_bg: map_sums[1] / n,
        ssim_bg: map_sums[2] / n,
        psnr_nbg: map_sums[3] / n,
        ssim_nbg: map_sums[4] / n,
    });
    let hist = masks
        .iter()
        .map(|m| mask_histogram(m, HISTOGRAM_BIN))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows, alphas, map, hist))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_blocks: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub wall_time: f64,
}

/// Trains one model per block count with shared seed and data.
pub fn run_ablation_nblocks(
    cfg: &TrainConfig,
    config_text: &str,
    data: &Dataset,
    n_blocks: &[usize],
    regressor: Option<&T2Regressor>,
) -> Result<Vec<AblationRow>> {
    if n_blocks.is_empty() {
        return Err(Error::Config("no block counts given".into()));
    }
    let mut rows = Vec::with_capacity(n_blocks.len());
    for &nb in n_blocks {
        let start = Instant::now();
        let mut c = cfg.clone();
        c.n_blocks = nb;
        let mut t = Trainer::new(c, config_text, regressor.cloned())?;
        let report = t.fit(data, |_| Ok(()))?;
        rows.push(AblationRow {
            n_blocks: nb,
            mean_psnr: report.mean_psnr,
            mean_ssim: report.mean_ssim,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
