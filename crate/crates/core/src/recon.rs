//! Reconstruction networks operating on `[N, 2, H, W]` (real, imaginary)
//! images.
//!
//! All variants share one U-Net skeleton: a level-0 conv block, then per
//! level a strided 2x2 convolution followed by a conv block; the decoder
//! upsamples (nearest + 3x3 convolution), concatenates the encoder skip and
//! applies a conv block. The network predicts a residual that is added to
//! its image input, and every output passes through a data-consistency
//! projection.
//!
//! * `Unet` — plain U-Net, shared across contrasts or one per contrast.
//! * `GruUnet` — a convolutional GRU gate mixes the previous contrast's
//!   reconstruction into the U-Net input.
//! * `RuNet` — recurrent cell whose blocks pass a hidden state at the
//!   bottleneck only.
//! * `HruNet` — recurrent cell whose blocks pass the decoder features of
//!   every level.

use std::collections::HashMap;

use mcmri_grad::{Param, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::data_consistency_t;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unet,
    GruUnet,
    RuNet,
    HruNet,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::Unet),
            "gru_unet" => Ok(Variant::GruUnet),
            "ru_net" => Ok(Variant::RuNet),
            "hru_net" => Ok(Variant::HruNet),
            other => Err(Error::Config(format!("unknown reconstruction variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconModelConfig {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub n_blocks: usize,
    pub variant: Variant,
    pub share_across_contrasts: bool,
    pub negative_slope: f64,
}

impl Default for ReconModelConfig {
    fn default() -> Self {
        ReconModelConfig {
            depth: 4,
            channels: vec![64, 128, 256, 512],
            n_blocks: 3,
            variant: Variant::HruNet,
            share_across_contrasts: true,
            negative_slope: 0.01,
        }
    }
}

impl ReconModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels.len() != self.depth {
            return Err(Error::Config(format!(
                "need one channel count per level: depth {} with {} channel entries",
                self.depth,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if !self.share_across_contrasts && self.variant != Variant::Unet {
            return Err(Error::Config(
                "per-contrast networks are only available for the plain U-Net".into(),
            ));
        }
        Ok(())
    }

    /// Spatial dimensions must halve cleanly at every level.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h < f || w < f {
            return Err(Error::Shape {
                expected: vec![f, f],
                got: vec![h, w],
            });
        }
        Ok(())
    }

    /// Decoder levels that exchange hidden state.
    pub fn hidden_levels(&self) -> Vec<usize> {
        match self.variant {
            Variant::HruNet => (0..self.depth).collect(),
            Variant::RuNet => vec![self.depth - 1],
            Variant::Unet | Variant::GruUnet => Vec::new(),
        }
    }
}

/// Named parameters in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: String, data: Vec<T>, shape: &[usize]) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param::new(name, data, shape));
        id
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        self.params[id].tensor()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    slope: f64,
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let bound = gain * (6.0 / ((1.0 + init.slope * init.slope) * fan_in)).sqrt();
        let w = (0..cout * cin * k * k)
            .map(|_| T::of(init.rng.random_range(-bound..bound)))
            .collect();
        let pad = if stride == 1 { k / 2 } else { 0 };
        Conv {
            w: store.add(format!("{name}.w"), w, &[cout, cin, k, k]),
            b: store.add(format!("{name}.b"), vec![T::zero(); cout], &[cout]),
            stride,
            pad,
        }
    }

    fn apply<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        x.conv2d(store.tensor(self.w), Some(store.tensor(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    c1: Conv,
    c2: Conv,
}

impl ConvBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        ConvBlock {
            c1: Conv::new(store, init, &format!("{name}.c1"), cin, cout, 3, 1, 1.0),
            c2: Conv::new(store, init, &format!("{name}.c2"), cout, cout, 3, 1, 1.0),
        }
    }

    fn apply<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, slope: T) -> Tensor<T> {
        let h = self.c1.apply(store, x).leaky_relu(slope);
        self.c2.apply(store, &h).leaky_relu(slope)
    }
}

/// Per-level decoder features carried between blocks and contrasts.
#[derive(Clone, Debug)]
pub struct HiddenStateBundle<T: Real> {
    levels: Vec<usize>,
    maps: Vec<Tensor<T>>,
}

impl<T: Real> HiddenStateBundle<T> {
    /// Zero state for a batch of `h x w` images.
    pub fn zeros(config: &ReconModelConfig, batch: usize, h: usize, w: usize) -> Self {
        let levels = config.hidden_levels();
        let maps = levels
            .iter()
            .map(|&k| Tensor::zeros(&[batch, config.channels[k], h >> k, w >> k]))
            .collect();
        HiddenStateBundle { levels, maps }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn maps(&self) -> &[Tensor<T>] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    fn at(&self, level: usize) -> Option<&Tensor<T>> {
        self.levels.iter().position(|&l| l == level).map(|i| &self.maps[i])
    }

    /// Euclidean norm over all levels.
    pub fn norm(&self) -> f64 {
        self.maps
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// U-Net body; levels listed in `hidden_levels` take an extra hidden input.
#[derive(Clone, Debug)]
struct UNet {
    enc0: ConvBlock,
    downs: Vec<(Conv, ConvBlock)>,
    /// Hidden-state convolution per level (`None` when the level has no hidden input).
    hidden: Vec<Option<Conv>>,
    /// Fuses skip and hidden state at the deepest level when it is recurrent.
    bottom: Option<ConvBlock>,
    /// Per level `0..depth-1`: upsampling convolution and fusion block.
    ups: Vec<(Conv, ConvBlock)>,
    out: Conv,
    in_channels: usize,
}

impl UNet {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cfg: &ReconModelConfig,
        in_channels: usize,
    ) -> Self {
        let ch = &cfg.channels;
        let d = cfg.depth;
        let hl = cfg.hidden_levels();
        let enc0 = ConvBlock::new(store, init, &format!("{prefix}.enc0"), in_channels, ch[0]);
        let downs = (1..d)
            .map(|k| {
                (
                    Conv::new(store, init, &format!("{prefix}.down{k}"), ch[k - 1], ch[k], 2, 2, 1.0),
                    ConvBlock::new(store, init, &format!("{prefix}.enc{k}"), ch[k], ch[k]),
                )
            })
            .collect();
        let hidden = (0..d)
            .map(|k| {
                hl.contains(&k).then(|| {
                    Conv::new(store, init, &format!("{prefix}.hid{k}"), ch[k], ch[k], 3, 1, 1.0)
                })
            })
            .collect();
        let bottom = hl.contains(&(d - 1)).then(|| {
            ConvBlock::new(store, init, &format!("{prefix}.dec{}", d - 1), 2 * ch[d - 1], ch[d - 1])
        });
        let ups = (0..d - 1)
            .map(|k| {
                let fan = if hl.contains(&k) { 3 } else { 2 };
                (
                    Conv::new(store, init, &format!("{prefix}.up{k}"), ch[k + 1], ch[k], 3, 1, 1.0),
                    ConvBlock::new(store, init, &format!("{prefix}.dec{k}"), fan * ch[k], ch[k]),
                )
            })
            .collect();
        let out = Conv::new(store, init, &format!("{prefix}.out"), ch[0], 2, 1, 1, 0.1);
        UNet {
            enc0,
            downs,
            hidden,
            bottom,
            ups,
            out,
            in_channels,
        }
    }

    /// Returns the 2-channel residual and the new hidden state (levels with a
    /// hidden input only).
    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        hidden: Option<&HiddenStateBundle<T>>,
        slope: T,
    ) -> (Tensor<T>, Vec<(usize, Tensor<T>)>) {
        debug_assert_eq!(x.dim(1), self.in_channels);
        let depth = self.hidden.len();
        let mut skips = vec![self.enc0.apply(store, x, slope)];
        for (down, block) in &self.downs {
            let h = down.apply(store, skips.last().expect("level 0 exists")).leaky_relu(slope);
            skips.push(block.apply(store, &h, slope));
        }
        let hid = |k: usize| -> Option<Tensor<T>> {
            let conv = self.hidden[k].as_ref()?;
            let state = hidden.and_then(|b| b.at(k)).expect("hidden state for recurrent level");
            Some(conv.apply(store, state).leaky_relu(slope))
        };
        let mut new_hidden = Vec::new();
        let mut d = match (&self.bottom, hid(depth - 1)) {
            (Some(block), Some(h)) => {
                let fused = block.apply(store, &Tensor::cat(&[&skips[depth - 1], &h], 1), slope);
                new_hidden.push((depth - 1, fused.clone()));
                fused
            }
            _ => skips[depth - 1].clone(),
        };
        for k in (0..depth - 1).rev() {
            let (up, block) = &self.ups[k];
            let u = up.apply(store, &d.upsample_nearest2x()).leaky_relu(slope);
            d = match hid(k) {
                Some(h) => block.apply(store, &Tensor::cat(&[&u, &skips[k], &h], 1), slope),
                None => block.apply(store, &Tensor::cat(&[&u, &skips[k]], 1), slope),
            };
            if self.hidden[k].is_some() {
                new_hidden.push((k, d.clone()));
            }
        }
        new_hidden.sort_by_key(|(k, _)| *k);
        (self.out.apply(store, &d), new_hidden)
    }
}

#[derive(Clone, Debug)]
struct GruGate {
    gates: Conv,
    candidate: Conv,
}

#[derive(Clone, Debug)]
enum Nets {
    Shared(UNet),
    PerContrast(Vec<UNet>),
    Cell(Vec<UNet>),
    Gru(GruGate, UNet),
}

/// Undersampled acquisitions of every contrast, each `[N, 2, H, W]`; masks
/// broadcast against them (`[N, 1, 1, W]` or `[1, 1, 1, W]`).
#[derive(Clone, Debug)]
pub struct ContrastInputs<T: Real> {
    pub x_zf: Vec<Tensor<T>>,
    pub y_hat: Vec<Tensor<T>>,
    pub masks: Vec<Tensor<T>>,
}

impl<T: Real> ContrastInputs<T> {
    fn check(&self, cfg: &ReconModelConfig) -> Result<(usize, usize, usize)> {
        let c = self.x_zf.len();
        if c == 0 || self.y_hat.len() != c || self.masks.len() != c {
            return Err(Error::Validation(format!(
                "inconsistent contrast counts: {} images, {} k-spaces, {} masks",
                c,
                self.y_hat.len(),
                self.masks.len()
            )));
        }
        let s = self.x_zf[0].shape().to_vec();
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::Shape {
                expected: vec![s.first().copied().unwrap_or(0), 2, 0, 0],
                got: s,
            });
        }
        for t in self.x_zf.iter().chain(&self.y_hat) {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape {
                    expected: s.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        cfg.check_input(s[2], s[3])?;
        Ok((s[0], s[2], s[3]))
    }
}

pub struct ReconModel<T: Real> {
    config: ReconModelConfig,
    contrasts: usize,
    store: ParamStore<T>,
    nets: Nets,
}

impl<T: Real> ReconModel<T> {
    /// Seeded initialization. `contrasts` only matters for per-contrast networks.
    pub fn new(config: &ReconModelConfig, contrasts: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            slope: config.negative_slope,
        };
        let mut store = ParamStore::new();
        let nets = match config.variant {
            Variant::Unet if config.share_across_contrasts => {
                Nets::Shared(UNet::new(&mut store, &mut init, "unet", config, 2))
            }
            Variant::Unet => Nets::PerContrast(
                (0..contrasts)
                    .map(|c| UNet::new(&mut store, &mut init, &format!("unet{c}"), config, 2))
                    .collect(),
            ),
            Variant::RuNet | Variant::HruNet => Nets::Cell(
                (0..config.n_blocks)
                    .map(|j| UNet::new(&mut store, &mut init, &format!("block{j}"), config, 2))
                    .collect(),
            ),
            Variant::GruUnet => {
                let gate = GruGate {
                    gates: Conv::new(&mut store, &mut init, "gru.gates", 4, 4, 3, 1, 1.0),
                    candidate: Conv::new(&mut store, &mut init, "gru.cand", 4, 2, 3, 1, 1.0),
                };
                Nets::Gru(gate, UNet::new(&mut store, &mut init, "unet", config, 4))
            }
        };
        Ok(ReconModel {
            config: config.clone(),
            contrasts,
            store,
            nets,
        })
    }

    pub fn config(&self) -> &ReconModelConfig {
        &self.config
    }

    pub fn contrasts(&self) -> usize {
        self.contrasts
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Sets every weight and bias to zero.
    pub fn zero_weights(&mut self) {
        for p in self.store.iter_mut() {
            let n = p.numel();
            p.set_data(vec![T::zero(); n]);
        }
    }

    fn slope(&self) -> T {
        T::of(self.config.negative_slope)
    }

    /// Plain U-Net pass with residual connection (no data consistency).
    pub fn unet_forward(&self, x_in: &Tensor<T>, contrast: usize) -> Result<Tensor<T>> {
        let net = match &self.nets {
            Nets::Shared(n) => n,
            Nets::PerContrast(v) => v.get(contrast).ok_or_else(|| {
                Error::Validation(format!("no network for contrast {contrast}"))
            })?,
            _ => return Err(Error::Config("model is not a plain U-Net".into())),
        };
        self.config.check_input(x_in.dim(2), x_in.dim(3))?;
        let (res, _) = net.forward(&self.store, x_in, None, self.slope());
        Ok(x_in.add(&res))
    }

    /// One recurrent block: residual network, then data consistency.
    pub fn hrunet_block_forward(
        &self,
        block: usize,
        x_in: &Tensor<T>,
        hidden_in: &HiddenStateBundle<T>,
        y_hat: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<(Tensor<T>, HiddenStateBundle<T>)> {
        let Nets::Cell(blocks) = &self.nets else {
            return Err(Error::Config("model has no recurrent cell".into()));
        };
        let net = blocks
            .get(block)
            .ok_or_else(|| Error::Validation(format!("block {block} out of range")))?;
        let (b, h, w) = (x_in.dim(0), x_in.dim(2), x_in.dim(3));
        self.config.check_input(h, w)?;
        let expected = HiddenStateBundle::<T>::zeros(&self.config, b, h, w);
        if hidden_in.levels != expected.levels
            || hidden_in.maps.iter().zip(&expected.maps).any(|(a, e)| a.shape() != e.shape())
        {
            return Err(Error::Shape {
                expected: expected.maps.iter().flat_map(|m| m.shape().to_vec()).collect(),
                got: hidden_in.maps.iter().flat_map(|m| m.shape().to_vec()).collect(),
            });
        }
        let (res, new_hidden) = net.forward(&self.store, x_in, Some(hidden_in), self.slope());
        let x_out = data_consistency_t(mask, &x_in.add(&res), y_hat);
        let (levels, maps) = new_hidden.into_iter().unzip();
        Ok((x_out, HiddenStateBundle { levels, maps }))
    }

    /// Chains every block of the cell for one contrast.
    pub fn recurrent_cell_forward(
        &self,
        x_zf: &Tensor<T>,
        hidden_prev: &HiddenStateBundle<T>,
        y_hat: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<(Tensor<T>, HiddenStateBundle<T>)> {
        let mut x = x_zf.clone();
        let mut h = hidden_prev.clone();
        for j in 0..self.config.n_blocks {
            (x, h) = self.hrunet_block_forward(j, &x, &h, y_hat, mask)?;
        }
        Ok((x, h))
    }

    /// Reconstructs contrasts in order; returns one `[N, 2, H, W]` tensor per contrast.
    pub fn reconstruct(&self, inputs: &ContrastInputs<T>) -> Result<Vec<Tensor<T>>> {
        let (batch, h, w) = inputs.check(&self.config)?;
        let slope = self.slope();
        let n = inputs.x_zf.len();
        let mut out = Vec::with_capacity(n);
        match &self.nets {
            Nets::Shared(_) | Nets::PerContrast(_) => {
                if let Nets::PerContrast(v) = &self.nets {
                    if v.len() != n {
                        return Err(Error::Validation(format!(
                            "model has {} per-contrast networks but {n} contrasts were given",
                            v.len()
                        )));
                    }
                }
                for c in 0..n {
                    let x = self.unet_forward(&inputs.x_zf[c], c)?;
                    out.push(data_consistency_t(&inputs.masks[c], &x, &inputs.y_hat[c]));
                }
            }
            Nets::Cell(_) => {
                let mut hidden = HiddenStateBundle::zeros(&self.config, batch, h, w);
                for c in 0..n {
                    let (x, hn) = self.recurrent_cell_forward(
                        &inputs.x_zf[c],
                        &hidden,
                        &inputs.y_hat[c],
                        &inputs.masks[c],
                    )?;
                    hidden = hn;
                    out.push(x);
                }
            }
            Nets::Gru(gate, net) => {
                let mut state = Tensor::zeros(&[batch, 2, h, w]);
                for c in 0..n {
                    let x = &inputs.x_zf[c];
                    let rz = gate.gates.apply(&self.store, &Tensor::cat(&[x, &state], 1)).sigmoid();
                    let r = rz.narrow(1, 0, 2);
                    let z = rz.narrow(1, 2, 2);
                    let cand = gate
                        .candidate
                        .apply(&self.store, &Tensor::cat(&[x, &r.mul(&state)], 1))
                        .tanh();
                    let mixed = state.mul(&z.neg().add_scalar(T::one())).add(&z.mul(&cand));
                    let (res, _) = net.forward(&self.store, &Tensor::cat(&[x, &mixed], 1), None, slope);
                    let rec = data_consistency_t(&inputs.masks[c], &x.add(&res), &inputs.y_hat[c]);
                    state = rec.clone();
                    out.push(rec);
                }
            }
        }
        Ok(out)
    }
}
