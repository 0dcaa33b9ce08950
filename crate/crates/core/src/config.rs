//! Flat key-value training configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::budget::RatioMode;
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::recon::{ReconModelConfig, Variant};

/// Table 1 configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// One frozen random mask for every contrast.
    Random,
    /// One learnable mask for every contrast.
    Shared,
    /// One learnable mask per contrast.
    Individual,
}

impl Baseline {
    pub const ALL: [Baseline; 7] = [
        Baseline::A,
        Baseline::B,
        Baseline::C,
        Baseline::D,
        Baseline::E,
        Baseline::F,
        Baseline::G,
    ];

    pub fn mask_mode(self) -> MaskMode {
        match self {
            Baseline::A => MaskMode::Random,
            Baseline::B => MaskMode::Shared,
            _ => MaskMode::Individual,
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Baseline::A | Baseline::B | Baseline::C | Baseline::D => Variant::Unet,
            Baseline::E => Variant::GruUnet,
            Baseline::F => Variant::RuNet,
            Baseline::G => Variant::HruNet,
        }
    }

    /// Whether one set of network weights serves every contrast.
    pub fn shares_network(self) -> bool {
        self != Baseline::C
    }

    pub fn label(self) -> &'static str {
        match self {
            Baseline::A => "RM-S/U-Net-S",
            Baseline::B => "LM-S/U-Net-S",
            Baseline::C => "LM-I/U-Net-I",
            Baseline::D => "LM-I/U-Net-S",
            Baseline::E => "LM-I/GRU-U-Net",
            Baseline::F => "LM-I/RU-Net",
            Baseline::G => "LM-I/HRU-Net",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Baseline::A),
            "b" => Ok(Baseline::B),
            "c" => Ok(Baseline::C),
            "d" => Ok(Baseline::D),
            "e" => Ok(Baseline::E),
            "f" => Ok(Baseline::F),
            "g" => Ok(Baseline::G),
            other => Err(Error::Config(format!("unknown baseline {other:?}, expected a..g"))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Baseline::A => "a",
            Baseline::B => "b",
            Baseline::C => "c",
            Baseline::D => "d",
            Baseline::E => "e",
            Baseline::F => "f",
            Baseline::G => "g",
        };
        f.write_str(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Image reconstruction loss.
    Rec,
    /// T2* map loss through the frozen regressor.
    Map,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecLoss {
    /// MSE on the two-channel complex images.
    Mse,
    /// `1 − SSIM` on magnitudes.
    Ssim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub contrasts: usize,
    pub delta_t: f64,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub data_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Directory written by `gen-data`; generated in memory when absent.
    pub data_dir: Option<String>,

    pub baseline: Baseline,
    /// Overall sparsity `α = 1/r`.
    pub alpha: f64,
    pub ratio_mode: RatioMode,
    pub preselect: usize,
    pub slope: f64,

    pub depth: usize,
    pub channels: Vec<usize>,
    pub n_blocks: usize,
    pub negative_slope: f64,

    pub objective: Objective,
    pub loss: RecLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Last-epoch learning rate as a fraction of `learning_rate`, reached
    /// along a cosine; 1 keeps it constant.
    pub final_lr_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning-rate multipliers for mask probabilities and ratio logits.
    pub mask_lr_scale: f64,
    pub ratio_lr_scale: f64,
    pub seed: u64,
    /// Seed of the fixed mask realization used for evaluation.
    pub eval_seed: u64,

    /// Trained regressor (JSON) for map-driven training.
    pub regressor: Option<String>,
    pub regressor_samples: usize,
    pub regressor_steps: usize,
    /// Magnitudes are divided by this before the regressor, which was
    /// trained on unit-amplitude decays.
    pub map_input_scale: f64,
    /// First-echo level below which the analytic fit reports background.
    pub t2_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            height: 64,
            width: 64,
            contrasts: 5,
            delta_t: 10.0,
            noise_sigma: 0.0,
            n_samples: 24,
            data_seed: 0,
            train_frac: 0.75,
            val_frac: 0.125,
            data_dir: None,
            baseline: Baseline::G,
            alpha: 0.25,
            ratio_mode: RatioMode::Fixed,
            preselect: 6,
            slope: 5.0,
            depth: 4,
            channels: vec![16, 32, 64, 128],
            n_blocks: 3,
            negative_slope: 0.01,
            objective: Objective::Rec,
            loss: RecLoss::Mse,
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            final_lr_frac: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            mask_lr_scale: 1.0,
            ratio_lr_scale: 1.0,
            seed: 0,
            eval_seed: 1000,
            regressor: None,
            regressor_samples: 100_000,
            regressor_steps: 20_000,
            map_input_scale: 4.0,
            t2_threshold: 0.1,
        }
    }
}

impl TrainConfig {
    /// Parses and validates TOML text; absent keys take defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.contrasts < 2 {
            return fail(format!("need at least two contrasts, got {}", self.contrasts));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.preselect > self.width {
            return fail(format!(
                "cannot preselect {} of {} columns",
                self.preselect, self.width
            ));
        }
        if self.floor() > self.alpha + 1e-12 {
            return fail(format!(
                "{} preselected columns exceed the budget of {:.2} columns",
                self.preselect,
                self.alpha * self.width as f64
            ));
        }
        if !(self.slope > 0.0) {
            return fail(format!("slope must be positive, got {}", self.slope));
        }
        if self.ratio_mode == RatioMode::Learnable
            && self.baseline.mask_mode() != MaskMode::Individual
        {
            return fail(format!(
                "learnable ratios need individual masks; baseline {} has none",
                self.baseline
            ));
        }
        if self.batch_size == 0 || self.n_samples == 0 {
            return fail("batch size and sample count must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.mask_lr_scale >= 0.0) || !(self.ratio_lr_scale >= 0.0)
        {
            return fail("learning rates must be positive".into());
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return fail(format!("final_lr_frac must lie in (0, 1], got {}", self.final_lr_frac));
        }
        if !(self.map_input_scale > 0.0 && self.map_input_scale.is_finite()) {
            return fail(format!("map_input_scale must be positive, got {}", self.map_input_scale));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) || self.height == 0 || self.width == 0 {
            return fail(format!(
                "image size {}x{} must be a positive multiple of 16",
                self.height, self.width
            ));
        }
        self.recon_config().validate()?;
        self.recon_config()
            .check_input(self.height, self.width)
            .map_err(|e| Error::Config(format!("image size does not fit the network depth: {e}")))
    }

    /// Lower bound on every contrast's sparsity: the preselected fraction.
    pub fn floor(&self) -> f64 {
        self.preselect as f64 / self.width as f64
    }

    pub fn recon_config(&self) -> ReconModelConfig {
        ReconModelConfig {
            depth: self.depth,
            channels: self.channels.clone(),
            n_blocks: self.n_blocks,
            variant: self.baseline.variant(),
            share_across_contrasts: self.baseline.shares_network(),
            negative_slope: self.negative_slope,
        }
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            height: self.height,
            width: self.width,
            contrasts: self.contrasts,
            delta_t: self.delta_t,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = TrainConfig::from_toml("baseline = \"a\"\nepochs = 3\n").unwrap();
        assert_eq!(cfg.baseline, Baseline::A);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.width, 64);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "alpha = 1.5",
            "preselect = 20",
            "baseline = \"b\"\nratio_mode = \"learnable\"",
            "depth = 3",
            "height = 40",
            "bogus = 1",
            "baseline = \"z\"",
        ] {
            assert!(
                matches!(TrainConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn baselines_map_onto_components() {
        assert_eq!(Baseline::A.mask_mode(), MaskMode::Random);
        assert_eq!(Baseline::B.mask_mode(), MaskMode::Shared);
        assert!(!Baseline::C.shares_network());
        assert_eq!(Baseline::E.variant(), Variant::GruUnet);
        assert_eq!(Baseline::G.variant(), Variant::HruNet);
        for b in Baseline::ALL {
            assert_eq!(b.to_string().parse::<Baseline>().unwrap(), b);
        }
    }
}
