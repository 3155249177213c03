//! Encoder, generator and discriminator towers with layer tying.
//!
//! All trainable tensors live in one slot store. Layers reference slots by
//! [`ParamId`]; a tied layer pair references the same slots, so tied weights
//! are identical by construction and their gradients sum into one buffer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, ConvGeom, ConvGrads, NormCache};
use crate::real::Real;
use crate::tensor::{DomainLabel, ImageBatch, LatentCode, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const MAX_SHARED_LAYERS: usize = 4;

fn default_channels() -> usize {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_domains: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub image_channels: usize,
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub n_conv_layers: usize,
    /// Discriminator layer count including the `(1 + n_domains)`-channel head.
    pub disc_depth: usize,
    pub share_lowest: bool,
    pub share_highest: bool,
    pub n_shared_layers: usize,
    /// Instance norm on discriminator layers 2.. (never on the first layer or the head).
    #[serde(default = "default_true")]
    pub disc_instance_norm: bool,
    #[serde(default)]
    pub label_injection: LabelInjection,
}

/// Where the generator receives the tiled one-hot label planes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelInjection {
    /// Concatenated to the first residual block's input only.
    FirstBlock,
    /// Concatenated to the input of every generator layer. Instance norm
    /// removes per-channel constants, so a label entering once is mostly
    /// normalized away before it reaches the output.
    #[default]
    EveryLayer,
}

impl ModelConfig {
    /// Full-size architecture: 256×256 images, 64 base filters, 6-layer discriminator.
    pub fn paper(n_domains: usize) -> Self {
        ModelConfig {
            n_domains,
            image_size: 256,
            image_channels: 3,
            base_channels: 64,
            n_residual_blocks: 4,
            n_conv_layers: 3,
            disc_depth: 6,
            share_lowest: true,
            share_highest: true,
            n_shared_layers: 1,
            disc_instance_norm: true,
            label_injection: LabelInjection::EveryLayer,
        }
    }

    /// 32×32 variant used for CPU-scale experiments.
    pub fn desk(n_domains: usize) -> Self {
        ModelConfig {
            image_size: 32,
            base_channels: 16,
            disc_depth: 4,
            ..Self::paper(n_domains)
        }
    }

    /// 8×8 variant for gradient checks.
    pub fn micro(n_domains: usize) -> Self {
        ModelConfig {
            image_size: 8,
            base_channels: 8,
            disc_depth: 3,
            ..Self::paper(n_domains)
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.base_channels << (self.n_conv_layers - 1)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size >> (self.n_conv_layers - 1)
    }

    pub fn encoder_layers(&self) -> usize {
        self.n_conv_layers + self.n_residual_blocks
    }

    /// Generator layers including the output layer.
    pub fn generator_layers(&self) -> usize {
        self.n_residual_blocks + self.n_conv_layers
    }

    fn disc_geoms(&self) -> Vec<ConvGeom> {
        let mut geoms = Vec::with_capacity(self.disc_depth);
        let mut cin = self.image_channels;
        for i in 0..self.disc_depth - 1 {
            let cout = self.base_channels << i;
            geoms.push(ConvGeom::conv(cin, cout, 3, 2, 1));
            cin = cout;
        }
        geoms.push(ConvGeom::conv(cin, 1 + self.n_domains, 2, 1, 0));
        geoms
    }

    /// Spatial size of the discriminator head output.
    pub fn disc_head_size(&self) -> Option<usize> {
        self.disc_geoms()
            .iter()
            .try_fold(self.image_size, |size, g| g.out_size(size))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_domains == 0 {
            return bad("n_domains must be positive".into());
        }
        if self.image_size == 0 || self.image_channels == 0 || self.base_channels == 0 {
            return bad("image_size, image_channels and base_channels must be positive".into());
        }
        if self.n_conv_layers == 0 {
            return bad("n_conv_layers must be positive".into());
        }
        if self.n_conv_layers > 16 {
            return bad(format!("n_conv_layers {} is too large", self.n_conv_layers));
        }
        let stride = 1usize << (self.n_conv_layers - 1);
        if self.image_size % stride != 0 {
            return bad(format!(
                "image_size {} is not divisible by the encoder stride {}",
                self.image_size, stride
            ));
        }
        if self.disc_depth == 0 || self.disc_depth > 16 {
            return bad(format!("disc_depth {} out of range", self.disc_depth));
        }
        if self.disc_head_size().is_none() {
            return bad(format!(
                "disc_depth {} collapses a {}px image below one pixel",
                self.disc_depth, self.image_size
            ));
        }
        if self.n_shared_layers > MAX_SHARED_LAYERS {
            return bad(format!(
                "n_shared_layers {} exceeds {}",
                self.n_shared_layers, MAX_SHARED_LAYERS
            ));
        }
        if self.n_shared_layers == 0 && (self.share_lowest || self.share_highest) {
            return bad("n_shared_layers = 0 requires share_lowest = share_highest = false".into());
        }
        if self.n_shared_layers > self.encoder_layers() || self.n_shared_layers > self.generator_layers() - 1 {
            return bad(format!(
                "n_shared_layers {} exceeds the tower depth",
                self.n_shared_layers
            ));
        }
        Ok(())
    }

    /// 1-based encoder layers tied between E_X and E_Y.
    pub fn tied_encoder_layers(&self) -> Vec<usize> {
        let k = self.n_shared_layers;
        let total = self.encoder_layers();
        let mut out = Vec::new();
        if self.share_lowest {
            out.extend(1..=k);
        }
        if self.share_highest {
            out.extend(total + 1 - k..=total);
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// 1-based generator layers tied between G_X and G_Y (never the output layer).
    pub fn tied_generator_layers(&self) -> Vec<usize> {
        let k = self.n_shared_layers;
        let last_hidden = self.generator_layers() - 1;
        let mut out = Vec::new();
        if self.share_highest {
            out.extend(1..=k);
        }
        if self.share_lowest {
            out.extend(last_hidden + 1 - k..=last_hidden);
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tower {
    X,
    Y,
}

impl Tower {
    pub fn other(self) -> Tower {
        match self {
            Tower::X => Tower::Y,
            Tower::Y => Tower::X,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetId {
    EncoderX,
    EncoderY,
    GeneratorX,
    GeneratorY,
    DiscriminatorX,
    DiscriminatorY,
}

impl NetId {
    pub const ALL: [NetId; 6] = [
        NetId::EncoderX,
        NetId::EncoderY,
        NetId::GeneratorX,
        NetId::GeneratorY,
        NetId::DiscriminatorX,
        NetId::DiscriminatorY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetId::EncoderX => "encoder_x",
            NetId::EncoderY => "encoder_y",
            NetId::GeneratorX => "generator_x",
            NetId::GeneratorY => "generator_y",
            NetId::DiscriminatorX => "discriminator_x",
            NetId::DiscriminatorY => "discriminator_y",
        }
    }

    pub fn from_name(name: &str) -> Option<NetId> {
        NetId::ALL.into_iter().find(|n| n.name() == name)
    }

    pub fn encoder(tower: Tower) -> NetId {
        match tower {
            Tower::X => NetId::EncoderX,
            Tower::Y => NetId::EncoderY,
        }
    }

    pub fn generator(tower: Tower) -> NetId {
        match tower {
            Tower::X => NetId::GeneratorX,
            Tower::Y => NetId::GeneratorY,
        }
    }

    pub fn discriminator(tower: Tower) -> NetId {
        match tower {
            Tower::X => NetId::DiscriminatorX,
            Tower::Y => NetId::DiscriminatorY,
        }
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, NetId::DiscriminatorX | NetId::DiscriminatorY)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// A pair of layers sharing parameters, 1-based layer indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TiedGroup {
    pub first: (NetId, usize),
    pub second: (NetId, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvUnit {
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<(ParamId, ParamId)>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Unit(ConvUnit),
    Residual { first: ConvUnit, second: ConvUnit },
}

impl Layer {
    fn params(&self) -> Vec<(String, ParamId)> {
        fn unit(prefix: &str, u: &ConvUnit, out: &mut Vec<(String, ParamId)>) {
            out.push((format!("{prefix}weight"), u.weight));
            out.push((format!("{prefix}bias"), u.bias));
            if let Some((g, b)) = u.norm {
                out.push((format!("{prefix}norm_weight"), g));
                out.push((format!("{prefix}norm_bias"), b));
            }
        }
        let mut out = Vec::new();
        match self {
            Layer::Unit(u) => unit("", u, &mut out),
            Layer::Residual { first, second } => {
                unit("conv1.", first, &mut out);
                unit("conv2.", second, &mut out);
            }
        }
        out
    }
}

/// Per-slot gradient buffers matching a [`ModelParams`] store.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    slots: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0]
    }

    pub fn zero(&mut self) {
        self.slots.iter_mut().for_each(|t| t.fill(T::zero()));
    }

    fn conv_pair(&mut self, unit: &ConvUnit) -> ConvGrads<'_, T> {
        let (w, b) = pair_mut(&mut self.slots, unit.weight.0, unit.bias.0);
        ConvGrads {
            weight: w.data_mut(),
            bias: b.data_mut(),
        }
    }

    fn norm_pair(&mut self, ids: (ParamId, ParamId)) -> (&mut [T], &mut [T]) {
        let (g, b) = pair_mut(&mut self.slots, ids.0 .0, ids.1 .0);
        (g.data_mut(), b.data_mut())
    }
}

fn pair_mut<X>(v: &mut [X], a: usize, b: usize) -> (&mut X, &mut X) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Parameters of all six networks plus the tying bookkeeping.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    config: ModelConfig,
    slots: Vec<Tensor<T>>,
    nets: Vec<Vec<Layer>>,
    /// Per net and layer: label planes appended to the layer input.
    labelled: Vec<Vec<bool>>,
    tied_groups: Vec<TiedGroup>,
}

struct Builder {
    shapes: Vec<Vec<usize>>,
    kinds: Vec<SlotInit>,
}

#[derive(Clone, Copy)]
enum SlotInit {
    Gaussian,
    Zero,
    One,
}

impl Builder {
    fn slot(&mut self, shape: &[usize], init: SlotInit) -> ParamId {
        self.shapes.push(shape.to_vec());
        self.kinds.push(init);
        ParamId(self.shapes.len() - 1)
    }

    fn unit(&mut self, geom: ConvGeom, norm: bool, act: Activation) -> ConvUnit {
        let weight = self.slot(&geom.weight_shape(), SlotInit::Gaussian);
        let bias = self.slot(&[geom.out_channels], SlotInit::Zero);
        let norm = norm.then(|| {
            (
                self.slot(&[geom.out_channels], SlotInit::One),
                self.slot(&[geom.out_channels], SlotInit::Zero),
            )
        });
        ConvUnit {
            geom,
            weight,
            bias,
            norm,
            act,
        }
    }

    fn residual(&mut self, channels: usize, extra_in: usize) -> Layer {
        Layer::Residual {
            first: self.unit(
                ConvGeom::conv(channels + extra_in, channels, 3, 1, 1),
                true,
                Activation::LeakyRelu,
            ),
            second: self.unit(ConvGeom::conv(channels, channels, 3, 1, 1), true, Activation::Identity),
        }
    }

    /// Builds a layer list, reusing `reuse[i]` for tied layer indices.
    fn tower(&mut self, layers: &[LayerPlan], tied: &[usize], reuse: Option<&[Layer]>) -> Vec<Layer> {
        layers
            .iter()
            .enumerate()
            .map(|(i, plan)| match reuse {
                Some(src) if tied.contains(&(i + 1)) => src[i].clone(),
                _ => match *plan {
                    LayerPlan::Unit { geom, norm, act } => Layer::Unit(self.unit(geom, norm, act)),
                    LayerPlan::Residual { channels, extra_in } => self.residual(channels, extra_in),
                },
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
enum LayerPlan {
    Unit { geom: ConvGeom, norm: bool, act: Activation },
    Residual { channels: usize, extra_in: usize },
}

impl LayerPlan {
    fn takes_labels(&self) -> bool {
        match *self {
            LayerPlan::Unit { .. } => false,
            LayerPlan::Residual { extra_in, .. } => extra_in > 0,
        }
    }
}

fn encoder_plan(cfg: &ModelConfig) -> Vec<LayerPlan> {
    let mut plan = Vec::new();
    let mut cin = cfg.image_channels;
    for i in 0..cfg.n_conv_layers {
        let cout = cfg.base_channels << i;
        let geom = if i == 0 {
            ConvGeom::conv(cin, cout, 7, 1, 3)
        } else {
            ConvGeom::conv(cin, cout, 3, 2, 1)
        };
        plan.push(LayerPlan::Unit {
            geom,
            norm: true,
            act: Activation::LeakyRelu,
        });
        cin = cout;
    }
    for _ in 0..cfg.n_residual_blocks {
        plan.push(LayerPlan::Residual {
            channels: cin,
            extra_in: 0,
        });
    }
    plan
}

/// Generator layers plus, per layer, whether label planes are appended to
/// its input.
fn generator_plan(cfg: &ModelConfig) -> (Vec<LayerPlan>, Vec<bool>) {
    let latent = cfg.latent_channels();
    let every = cfg.label_injection == LabelInjection::EveryLayer;
    let mut plan = Vec::new();
    let mut labelled = Vec::new();
    for i in 0..cfg.n_residual_blocks {
        let extra = if i == 0 || every { cfg.n_domains } else { 0 };
        plan.push(LayerPlan::Residual {
            channels: latent,
            extra_in: extra,
        });
        labelled.push(extra > 0);
    }
    let extra = if every { cfg.n_domains } else { 0 };
    let mut cin = latent;
    for i in 0..cfg.n_conv_layers - 1 {
        let cout = latent >> i;
        plan.push(LayerPlan::Unit {
            geom: ConvGeom::transposed(cin + extra, cout, 3, 2, 1, 1),
            norm: true,
            act: Activation::LeakyRelu,
        });
        labelled.push(every);
        cin = cout;
    }
    plan.push(LayerPlan::Unit {
        geom: ConvGeom::transposed(cin + extra, cfg.image_channels, 3, 1, 1, 0),
        norm: false,
        act: Activation::Tanh,
    });
    labelled.push(every);
    debug_assert!(plan.iter().zip(&labelled).all(|(p, l)| !p.takes_labels() || *l));
    (plan, labelled)
}

fn discriminator_plan(cfg: &ModelConfig) -> Vec<LayerPlan> {
    let geoms = cfg.disc_geoms();
    let last = geoms.len() - 1;
    geoms
        .into_iter()
        .enumerate()
        .map(|(i, geom)| LayerPlan::Unit {
            geom,
            norm: i != 0 && i != last && cfg.disc_instance_norm,
            act: if i == last {
                Activation::Identity
            } else {
                Activation::LeakyRelu
            },
        })
        .collect()
}

impl<T: Real> ModelParams<T> {
    /// Builds and initializes all six networks: weights ~ N(0, 0.02²),
    /// biases 0, norm scales 1. Tied layers share slots.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        for (slot, kind) in params.slots.iter_mut().zip(Self::init_kinds(config)) {
            match kind {
                SlotInit::Gaussian => slot
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::lit(normal.sample(&mut rng))),
                SlotInit::Zero => slot.fill(T::zero()),
                SlotInit::One => slot.fill(T::one()),
            }
        }
        Ok(params)
    }

    fn init_kinds(config: &ModelConfig) -> Vec<SlotInit> {
        Self::layout(config).2.kinds
    }

    fn layout(config: &ModelConfig) -> (Vec<Vec<Layer>>, Vec<Vec<bool>>, Builder, Vec<TiedGroup>) {
        let mut b = Builder {
            shapes: Vec::new(),
            kinds: Vec::new(),
        };
        let enc = encoder_plan(config);
        let (gen, gen_labelled) = generator_plan(config);
        let disc = discriminator_plan(config);
        let enc_tied = config.tied_encoder_layers();
        let gen_tied = config.tied_generator_layers();

        let ex = b.tower(&enc, &[], None);
        let ey = b.tower(&enc, &enc_tied, Some(&ex));
        let gx = b.tower(&gen, &[], None);
        let gy = b.tower(&gen, &gen_tied, Some(&gx));
        let dx = b.tower(&disc, &[], None);
        let dy = b.tower(&disc, &[], None);

        let mut tied = Vec::new();
        for &l in &enc_tied {
            tied.push(TiedGroup {
                first: (NetId::EncoderX, l),
                second: (NetId::EncoderY, l),
            });
        }
        for &l in &gen_tied {
            tied.push(TiedGroup {
                first: (NetId::GeneratorX, l),
                second: (NetId::GeneratorY, l),
            });
        }
        let plain = |n: usize| vec![false; n];
        let labelled = vec![
            plain(enc.len()),
            plain(enc.len()),
            gen_labelled.clone(),
            gen_labelled,
            plain(disc.len()),
            plain(disc.len()),
        ];
        (vec![ex, ey, gx, gy, dx, dy], labelled, b, tied)
    }

    /// Zero-filled parameters with the full layer structure.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (nets, labelled, builder, tied_groups) = Self::layout(config);
        let slots = builder.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(ModelParams {
            config: config.clone(),
            slots,
            nets,
            labelled,
            tied_groups,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tied_groups(&self) -> &[TiedGroup] {
        &self.tied_groups
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0]
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            slots: self.slots.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn layer_count(&self, net: NetId) -> usize {
        self.nets[net.index()].len()
    }

    /// `(name, slot)` of one layer's tensors; `layer` is 1-based.
    pub fn layer_params(&self, net: NetId, layer: usize) -> Vec<(String, ParamId)> {
        self.nets[net.index()][layer - 1].params()
    }

    /// Every tensor keyed `<network>/<layer>/<param>`. Tied slots appear under
    /// each owner's key.
    pub fn named_params(&self) -> Vec<(String, ParamId)> {
        let mut out = Vec::new();
        for net in NetId::ALL {
            for (i, layer) in self.nets[net.index()].iter().enumerate() {
                for (p, id) in layer.params() {
                    out.push((format!("{}/{}/{}", net.name(), i + 1, p), id));
                }
            }
        }
        out
    }

    /// Distinct slots used by `net`.
    pub fn param_ids(&self, net: NetId) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.nets[net.index()]
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(_, id)| id))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn param_ids_of(&self, nets: &[NetId]) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = nets.iter().flat_map(|n| self.param_ids(*n)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Largest element-wise difference across every tied layer pair.
    pub fn max_tied_difference(&self) -> f64 {
        let mut worst = 0.0f64;
        for g in &self.tied_groups {
            let a = self.layer_params(g.first.0, g.first.1);
            let b = self.layer_params(g.second.0, g.second.1);
            for ((_, ia), (_, ib)) in a.iter().zip(&b) {
                let d = self.slots[ia.0]
                    .max_abs_diff(&self.slots[ib.0])
                    .map_or(f64::INFINITY, |d| d.as_f64());
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn parameter_count(&self) -> usize {
        self.slots.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            slots: self.slots.iter().map(|t| t.cast()).collect(),
            nets: self.nets.clone(),
            labelled: self.labelled.clone(),
            tied_groups: self.tied_groups.clone(),
        }
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint). Every key of
    /// [`Self::named_params`] must be supplied; tied twins must agree exactly.
    pub fn from_named<F>(config: &ModelConfig, mut lookup: F) -> Result<Self>
    where
        F: FnMut(&str) -> Option<Tensor<T>>,
    {
        let mut params = Self::skeleton(config)?;
        let mut filled = vec![false; params.slots.len()];
        for (name, id) in params.named_params() {
            let t = lookup(&name).ok_or_else(|| Error::InvalidConfig(format!("missing tensor {name}")))?;
            if t.shape() != params.slots[id.0].shape() {
                return Err(Error::shape(params.slots[id.0].shape(), t.shape()));
            }
            if filled[id.0] {
                if params.slots[id.0] != t {
                    return Err(Error::InvalidConfig(format!(
                        "tied tensor {name} differs from its twin"
                    )));
                }
            } else {
                params.slots[id.0] = t;
                filled[id.0] = true;
            }
        }
        Ok(params)
    }

    fn check_images(&self, images: &ImageBatch<T>) -> Result<()> {
        images.expect_image_shape(self.config.image_channels, self.config.image_size)
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        let (n, c, h, w) = z.dims4();
        let expected = [n, self.config.latent_channels(), self.config.latent_size(), self.config.latent_size()];
        if [n, c, h, w] != expected {
            return Err(Error::shape(&expected, z.shape()));
        }
        Ok(())
    }

    pub fn encode(&self, tower: Tower, images: &ImageBatch<T>) -> Result<LatentCode<T>> {
        self.check_images(images)?;
        Ok(LatentCode(self.run(NetId::encoder(tower), images.tensor().clone(), &[])))
    }

    /// Decodes `z` for the target `labels` (one per sample, or one for all).
    pub fn generate(&self, tower: Tower, z: &LatentCode<T>, labels: &[DomainLabel]) -> Result<ImageBatch<T>> {
        self.check_latent(z.tensor())?;
        self.check_labels(z.tensor().shape()[0], labels)?;
        Ok(ImageBatch::new(self.run(NetId::generator(tower), z.tensor().clone(), labels))?)
    }

    pub fn discriminate(&self, tower: Tower, images: &ImageBatch<T>) -> Result<DiscOutput<T>> {
        self.check_images(images)?;
        let head = self.run(NetId::discriminator(tower), images.tensor().clone(), &[]);
        Ok(DiscOutput::from_head(&head, self.config.n_domains))
    }

    fn run(&self, net: NetId, mut x: Tensor<T>, labels: &[DomainLabel]) -> Tensor<T> {
        for (layer, &labelled) in self.nets[net.index()].iter().zip(&self.labelled[net.index()]) {
            if labelled {
                x = with_label_planes(&x, labels, self.config.n_domains);
            }
            x = match layer {
                Layer::Unit(u) => self.unit_forward(u, &x).0,
                Layer::Residual { first, second } => {
                    let h = self.unit_forward(first, &x).0;
                    let mut out = self.unit_forward(second, &h).0;
                    add_leading_channels(&mut out, &x);
                    out
                }
            };
        }
        x
    }

    /// Labels for a batch of `n`: one per sample, or one shared by all.
    pub(crate) fn check_labels(&self, n: usize, labels: &[DomainLabel]) -> Result<()> {
        if labels.len() != n && labels.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "{} labels for a batch of {}",
                labels.len(),
                n
            )));
        }
        let nd = self.config.n_domains;
        for l in labels {
            if l.id() >= nd || l.n_domains() != nd {
                return Err(Error::InvalidLabel {
                    label: l.id(),
                    n_domains: nd,
                });
            }
        }
        Ok(())
    }

    fn unit_forward(&self, u: &ConvUnit, x: &Tensor<T>) -> (Tensor<T>, Option<NormCache<T>>) {
        let mut y = nn::conv_forward(&u.geom, x, self.slots[u.weight.0].data(), self.slots[u.bias.0].data());
        let mut cache = None;
        if let Some((g, b)) = u.norm {
            let (normed, c) = nn::instance_norm_forward(&y, self.slots[g.0].data(), self.slots[b.0].data());
            y = normed;
            cache = Some(c);
        }
        nn::activate(u.act, &mut y);
        (y, cache)
    }

    fn unit_forward_cached(&self, u: &ConvUnit, x: &Tensor<T>) -> UnitCache<T> {
        let (output, norm) = self.unit_forward(u, x);
        UnitCache {
            input: x.clone(),
            norm,
            output,
        }
    }

    fn unit_backward(
        &self,
        u: &ConvUnit,
        cache: &UnitCache<T>,
        dy: &Tensor<T>,
        mut grads: Option<&mut Gradients<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut d = dy.clone();
        nn::activate_backward(u.act, &cache.output, &mut d);
        if let (Some((g, b)), Some(nc)) = (u.norm, cache.norm.as_ref()) {
            let pair = grads.as_deref_mut().map(|gr| gr.norm_pair((g, b)));
            d = nn::instance_norm_backward(nc, self.slots[g.0].data(), &d, pair);
        }
        let conv_grads = grads.map(|gr| gr.conv_pair(u));
        nn::conv_backward(
            &u.geom,
            &cache.input,
            self.slots[u.weight.0].data(),
            &d,
            conv_grads,
            need_input_grad,
        )
    }

    /// Forward pass recording everything the backward pass needs.
    /// `labels` are only read by layers that take label planes.
    pub(crate) fn forward_cached(&self, net: NetId, input: Tensor<T>, labels: &[DomainLabel]) -> (Tensor<T>, NetCache<T>) {
        let mut layers = Vec::with_capacity(self.nets[net.index()].len());
        let mut x = input;
        for (layer, &labelled) in self.nets[net.index()].iter().zip(&self.labelled[net.index()]) {
            if labelled {
                x = with_label_planes(&x, labels, self.config.n_domains);
            }
            match layer {
                Layer::Unit(u) => {
                    let c = self.unit_forward_cached(u, &x);
                    x = c.output.clone();
                    layers.push(LayerCache::Unit(c));
                }
                Layer::Residual { first, second } => {
                    let c1 = self.unit_forward_cached(first, &x);
                    let c2 = self.unit_forward_cached(second, &c1.output);
                    let mut out = c2.output.clone();
                    add_leading_channels(&mut out, &x);
                    layers.push(LayerCache::Residual {
                        first: c1,
                        second: c2,
                        in_channels: x.shape()[1],
                    });
                    x = out;
                }
            }
        }
        (x, NetCache { net, layers })
    }

    /// Backpropagates `dout` through a cached forward pass. Parameter
    /// gradients accumulate into `grads` when given.
    pub(crate) fn backward(
        &self,
        cache: &NetCache<T>,
        dout: Tensor<T>,
        mut grads: Option<&mut Gradients<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let layers = &self.nets[cache.net.index()];
        let mut d = dout;
        for (i, (layer, lc)) in layers.iter().zip(&cache.layers).enumerate().rev() {
            let need = need_input_grad || i > 0;
            let next = match (layer, lc) {
                (Layer::Unit(u), LayerCache::Unit(c)) => self.unit_backward(u, c, &d, grads.as_deref_mut(), need),
                (
                    Layer::Residual { first, second },
                    LayerCache::Residual {
                        first: c1,
                        second: c2,
                        in_channels,
                    },
                ) => {
                    let dh = self
                        .unit_backward(second, c2, &d, grads.as_deref_mut(), true)
                        .expect("input grad requested");
                    let dx = self.unit_backward(first, c1, &dh, grads.as_deref_mut(), need);
                    dx.map(|mut dx| {
                        let (n, c, h, w) = d.dims4();
                        let plane = c * h * w;
                        for s in 0..n {
                            let dst = &mut dx.data_mut()[s * in_channels * h * w..][..plane];
                            for (a, b) in dst.iter_mut().zip(&d.data()[s * plane..(s + 1) * plane]) {
                                *a += *b;
                            }
                        }
                        dx
                    })
                }
                _ => unreachable!("cache built from this network"),
            };
            match next {
                Some(n) if self.labelled[cache.net.index()][i] => d = strip_trailing_channels(&n, self.config.n_domains),
                Some(n) => d = n,
                None => return None,
            }
        }
        Some(d)
    }

    pub(crate) fn discriminate_cached(&self, tower: Tower, images: &Tensor<T>) -> (DiscOutput<T>, NetCache<T>, Vec<usize>) {
        let (head, cache) = self.forward_cached(NetId::discriminator(tower), images.clone(), &[]);
        let out = DiscOutput::from_head(&head, self.config.n_domains);
        (out, cache, head.shape().to_vec())
    }

    /// Backward through the pooled heads given gradients w.r.t. realness and
    /// class posterior.
    pub(crate) fn discriminator_backward(
        &self,
        out: &DiscOutput<T>,
        cache: &NetCache<T>,
        head_shape: &[usize],
        d_realness: &[T],
        d_posterior: &[T],
        grads: Option<&mut Gradients<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let nd = self.config.n_domains;
        let n = out.realness.len();
        let d_logits = nn::softmax_rows_backward(&out.class_posterior, d_posterior, nd);
        let mut dpooled = vec![T::zero(); n * (1 + nd)];
        for s in 0..n {
            let r = out.realness[s];
            dpooled[s * (1 + nd)] = d_realness[s] * r * (T::one() - r);
            dpooled[s * (1 + nd) + 1..(s + 1) * (1 + nd)].copy_from_slice(&d_logits[s * nd..(s + 1) * nd]);
        }
        let dhead = nn::global_avg_pool_backward(head_shape, &dpooled);
        self.backward(cache, dhead, grads, need_input_grad)
    }

    /// Latent shape for a batch of `n` images.
    pub fn latent_shape(&self, n: usize) -> [usize; 4] {
        [n, self.config.latent_channels(), self.config.latent_size(), self.config.latent_size()]
    }

    /// Test hook: zeroes the discriminator head weights and biases.
    pub fn zero_discriminator_head(&mut self, tower: Tower) {
        let net = NetId::discriminator(tower);
        let last = self.layer_count(net);
        for (_, id) in self.layer_params(net, last) {
            self.slots[id.0].fill(T::zero());
        }
    }
}

/// Appends one constant plane per domain: 1 for the sample's label, 0 elsewhere.
/// `labels` holds one label per sample or a single shared label.
pub(crate) fn with_label_planes<T: Real>(x: &Tensor<T>, labels: &[DomainLabel], nd: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c + nd, h, w]);
    for s in 0..n {
        let label = &labels[if labels.len() == 1 { 0 } else { s }];
        let dst = &mut out.data_mut()[s * (c + nd) * plane..(s + 1) * (c + nd) * plane];
        dst[..c * plane].copy_from_slice(&x.data()[s * c * plane..(s + 1) * c * plane]);
        dst[(c + label.id()) * plane..(c + label.id() + 1) * plane].fill(T::one());
    }
    out
}

fn strip_trailing_channels<T: Real>(g: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = g.dims4();
    let keep = (c - k) * h * w;
    let mut out = Vec::with_capacity(n * keep);
    for s in 0..n {
        out.extend_from_slice(&g.data()[s * c * h * w..][..keep]);
    }
    Tensor::from_vec(&[n, c - k, h, w], out).expect("consistent shape")
}

/// Adds `skip`'s leading channels to `out` (residual connection whose input
/// may carry extra label planes).
fn add_leading_channels<T: Real>(out: &mut Tensor<T>, skip: &Tensor<T>) {
    let (n, c, h, w) = out.dims4();
    let cin = skip.shape()[1];
    let plane = c * h * w;
    for s in 0..n {
        let src = &skip.data()[s * cin * h * w..][..plane];
        for (a, b) in out.data_mut()[s * plane..(s + 1) * plane].iter_mut().zip(src) {
            *a += *b;
        }
    }
}

#[derive(Debug, Clone)]
struct UnitCache<T> {
    input: Tensor<T>,
    norm: Option<NormCache<T>>,
    output: Tensor<T>,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Unit(UnitCache<T>),
    Residual {
        first: UnitCache<T>,
        second: UnitCache<T>,
        in_channels: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct NetCache<T> {
    net: NetId,
    layers: Vec<LayerCache<T>>,
}

/// Discriminator outputs per sample: realness in (0, 1) and the auxiliary
/// classifier's logits and posterior over domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput<T> {
    pub realness: Vec<T>,
    /// Row-major `n × n_domains`.
    pub class_logits: Vec<T>,
    /// Row-major `n × n_domains`, rows on the simplex.
    pub class_posterior: Vec<T>,
    pub n_domains: usize,
}

impl<T: Real> DiscOutput<T> {
    fn from_head(head: &Tensor<T>, n_domains: usize) -> Self {
        let n = head.shape()[0];
        let pooled = nn::global_avg_pool(head);
        let mut realness = Vec::with_capacity(n);
        let mut class_logits = Vec::with_capacity(n * n_domains);
        for row in pooled.chunks(1 + n_domains) {
            realness.push(nn::sigmoid(row[0]));
            class_logits.extend_from_slice(&row[1..]);
        }
        let class_posterior = nn::softmax_rows(&class_logits, n_domains);
        DiscOutput {
            realness,
            class_logits,
            class_posterior,
            n_domains,
        }
    }

    pub fn posterior_row(&self, sample: usize) -> &[T] {
        &self.class_posterior[sample * self.n_domains..(sample + 1) * self.n_domains]
    }
}
