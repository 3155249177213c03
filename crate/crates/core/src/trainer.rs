//! Cross-domain training: each iteration draws an ordered pair of distinct
//! domains, feeds one batch from each into the X and Y roles, then takes one
//! ADAM step on the discriminators followed by one on the encoders and
//! generators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss_with_grad, composite_loss, distance, distance_grad, gan_loss_with_grad, Distance,
    LossBreakdown, LossWeights, Phase,
};
use crate::model::{DiscOutput, Gradients, ModelConfig, ModelParams, NetCache, NetId, ParamId, Tower};
use crate::optim::{adam_update, AdamConfig, AdamMoments};
use crate::real::Real;
use crate::tensor::{DomainLabel, ImageBatch, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_per_domain: usize,
    pub max_iterations: u64,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    pub checkpoint_every: u64,
    pub log_every: u64,
    #[serde(default)]
    pub latent_distance: Distance,
    #[serde(default)]
    pub cycle_distance: Distance,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_per_domain: 1,
            max_iterations: 2000,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 500,
            log_every: 10,
            latent_distance: Distance::L1,
            cycle_distance: Distance::L1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad(format!("adam_beta1 must lie in [0, 1), got {}", self.adam_beta1));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad(format!("adam_beta2 must lie in [0, 1), got {}", self.adam_beta2));
        }
        if self.batch_per_domain == 0 {
            return bad("batch_per_domain must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
        }
    }
}

/// Draws an ordered pair of distinct domains, uniform over all `n(n-1)` pairs.
pub fn sample_domain_pair<R: Rng + ?Sized>(n_domains: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n_domains < 2 {
        return Err(Error::InvalidConfig(format!(
            "need ≥ 2 domains to draw a pair, got {n_domains}"
        )));
    }
    let a = rng.random_range(0..n_domains);
    let mut b = rng.random_range(0..n_domains - 1);
    if b >= a {
        b += 1;
    }
    Ok((a, b))
}

/// Images of one domain with the domain's label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub images: ImageBatch<T>,
    pub label: DomainLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub d: LossBreakdown,
    pub eg: LossBreakdown,
}

/// Serializable snapshot of the pair-sampling RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    /// One moment slot per parameter slot.
    pub moments: Vec<AdamMoments<T>>,
    pub iteration: u64,
    pub pair_rng: ChaCha8Rng,
    pub sampler: BatchSampler,
    pub loss_history: Vec<LossRecord>,
}

const SAMPLER_SEED_SALT: u64 = 0x5eed_da7a_0000_0001;

impl<T: Real> TrainState<T> {
    /// Fresh state: parameters and all RNGs derive from `train.seed`.
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let params = ModelParams::build(model, train.seed)?;
        let moments = (0..params.slot_count())
            .map(|i| AdamMoments::new(params.tensor(ParamId(i)).len()))
            .collect();
        let mut pair_rng = ChaCha8Rng::seed_from_u64(train.seed);
        pair_rng.set_stream(1);
        Ok(TrainState {
            params,
            moments,
            iteration: 0,
            pair_rng,
            sampler: BatchSampler::new(train.seed ^ SAMPLER_SEED_SALT, model.n_domains),
            loss_history: Vec::new(),
        })
    }

    fn apply(&mut self, grads: &Gradients<T>, ids: &[ParamId], adam: &AdamConfig) -> Result<()> {
        for id in ids {
            adam_update(
                self.params.tensor_mut(*id).data_mut(),
                grads.get(*id).data(),
                &mut self.moments[id.0],
                adam,
            )?;
        }
        Ok(())
    }
}

/// Forward passes through encoders and generators shared by both phases.
struct Translation<T> {
    x: Tensor<T>,
    y: Tensor<T>,
    lx: DomainLabel,
    ly: DomainLabel,
    z_x: Tensor<T>,
    z_y: Tensor<T>,
    enc_x: NetCache<T>,
    enc_y: NetCache<T>,
    /// `G_X(E_Y(y), l_x)`
    x_hat: Tensor<T>,
    gen_x_hat: NetCache<T>,
    /// `G_Y(E_X(x), l_y)`
    y_hat: Tensor<T>,
    gen_y_hat: NetCache<T>,
}

impl<T: Real> Translation<T> {
    fn forward(params: &ModelParams<T>, a: &LabeledBatch<T>, b: &LabeledBatch<T>) -> Result<Self> {
        let cfg = params.config();
        for batch in [a, b] {
            batch.images.expect_image_shape(cfg.image_channels, cfg.image_size)?;
            if batch.label.n_domains() != cfg.n_domains {
                return Err(Error::InvalidLabel {
                    label: batch.label.id(),
                    n_domains: cfg.n_domains,
                });
            }
        }
        params.check_labels(1, core::slice::from_ref(&a.label))?;
        params.check_labels(1, core::slice::from_ref(&b.label))?;
        if a.label.id() == b.label.id() {
            return Err(Error::InvalidConfig(format!(
                "both batches carry domain {}; a step needs two distinct domains",
                a.label.id()
            )));
        }
        if a.images.batch_size() != b.images.batch_size() {
            return Err(Error::shape(a.images.shape(), b.images.shape()));
        }
        let (z_x, enc_x) = params.forward_cached(NetId::EncoderX, a.images.tensor().clone(), &[]);
        let (z_y, enc_y) = params.forward_cached(NetId::EncoderY, b.images.tensor().clone(), &[]);
        let (x_hat, gen_x_hat) = params.forward_cached(NetId::GeneratorX, z_y.clone(), core::slice::from_ref(&a.label));
        let (y_hat, gen_y_hat) = params.forward_cached(NetId::GeneratorY, z_x.clone(), core::slice::from_ref(&b.label));
        Ok(Translation {
            x: a.images.tensor().clone(),
            y: b.images.tensor().clone(),
            lx: a.label.clone(),
            ly: b.label.clone(),
            z_x,
            z_y,
            enc_x,
            enc_y,
            x_hat,
            gen_x_hat,
            y_hat,
            gen_y_hat,
        })
    }
}

struct DiscPass<T> {
    out: DiscOutput<T>,
    cache: NetCache<T>,
    head_shape: Vec<usize>,
}

fn disc_pass<T: Real>(params: &ModelParams<T>, tower: Tower, images: &Tensor<T>) -> DiscPass<T> {
    let (out, cache, head_shape) = params.discriminate_cached(tower, images);
    DiscPass { out, cache, head_shape }
}

fn labels_of(label: &DomainLabel, n: usize) -> Vec<usize> {
    vec![label.id(); n]
}

fn scale<T: Real>(v: &mut [T], s: T) {
    v.iter_mut().for_each(|x| *x *= s);
}

fn check_finite(terms: &LossBreakdown) -> Result<()> {
    if let Some(name) = terms.first_non_finite() {
        let phase = match terms.phase {
            Phase::D => "discriminator",
            Phase::EG => "encoder/generator",
        };
        return Err(Error::NonFinite {
            what: format!("{phase} loss term {name}"),
        });
    }
    Ok(())
}

fn d_phase_with<T: Real>(
    params: &ModelParams<T>,
    tr: &Translation<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let nd = params.config().n_domains;
    let n = tr.x.shape()[0];
    let mut grads = params.zero_gradients();
    let alpha2 = T::lit(weights.alpha2);
    let mut terms = LossBreakdown::zero(Phase::D);

    // Fakes are constants here: no gradient flows back into E or G.
    for (tower, real, fake, label) in [
        (Tower::X, &tr.x, &tr.x_hat, &tr.lx),
        (Tower::Y, &tr.y, &tr.y_hat, &tr.ly),
    ] {
        let real_pass = disc_pass(params, tower, real);
        let fake_pass = disc_pass(params, tower, fake);
        let (gan, d_real, d_fake) = gan_loss_with_grad(&real_pass.out.realness, &fake_pass.out.realness, Phase::D)?;
        let (cls, mut d_post) = classification_loss_with_grad(&real_pass.out.class_posterior, &labels_of(label, n), nd)?;
        match tower {
            Tower::X => terms.gan_x = gan.as_f64(),
            Tower::Y => terms.gan_y = gan.as_f64(),
        }
        terms.cls_real += cls.as_f64();
        scale(&mut d_post, alpha2);
        params.discriminator_backward(
            &real_pass.out,
            &real_pass.cache,
            &real_pass.head_shape,
            &d_real,
            &d_post,
            Some(&mut grads),
            false,
        );
        let zero_post = vec![T::zero(); n * nd];
        params.discriminator_backward(
            &fake_pass.out,
            &fake_pass.cache,
            &fake_pass.head_shape,
            &d_fake,
            &zero_post,
            Some(&mut grads),
            false,
        );
    }
    terms.composite = composite_loss(&terms, weights);
    check_finite(&terms)?;
    Ok((terms, grads))
}

fn eg_phase_with<T: Real>(
    params: &ModelParams<T>,
    tr: &Translation<T>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let w = &cfg.weights;
    let nd = params.config().n_domains;
    let n = tr.x.shape()[0];
    let mut grads = params.zero_gradients();
    let mut terms = LossBreakdown::zero(Phase::EG);
    let lx = core::slice::from_ref(&tr.lx);
    let ly = core::slice::from_ref(&tr.ly);

    // Reconstructions x' = G_X(z_x, l_x), y' = G_Y(z_y, l_y).
    let (x_rec, gen_x_rec) = params.forward_cached(NetId::GeneratorX, tr.z_x.clone(), lx);
    let (y_rec, gen_y_rec) = params.forward_cached(NetId::GeneratorY, tr.z_y.clone(), ly);
    // Re-encoded translations z_ŷ = E_Y(ŷ), z_x̂ = E_X(x̂).
    let (z_yhat, enc_yhat) = params.forward_cached(NetId::EncoderY, tr.y_hat.clone(), &[]);
    let (z_xhat, enc_xhat) = params.forward_cached(NetId::EncoderX, tr.x_hat.clone(), &[]);
    // Cycles G_X(E_Y(ŷ), l_x), G_Y(E_X(x̂), l_y).
    let (x_cyc, gen_x_cyc) = params.forward_cached(NetId::GeneratorX, z_yhat.clone(), lx);
    let (y_cyc, gen_y_cyc) = params.forward_cached(NetId::GeneratorY, z_xhat.clone(), ly);
    let dx_pass = disc_pass(params, Tower::X, &tr.x_hat);
    let dy_pass = disc_pass(params, Tower::Y, &tr.y_hat);

    let (gan_x, _, d_fake_x) = gan_loss_with_grad(&[], &dx_pass.out.realness, Phase::EG)?;
    let (gan_y, _, d_fake_y) = gan_loss_with_grad(&[], &dy_pass.out.realness, Phase::EG)?;
    let (cls_x, mut dpost_x) = classification_loss_with_grad(&dx_pass.out.class_posterior, &labels_of(&tr.lx, n), nd)?;
    let (cls_y, mut dpost_y) = classification_loss_with_grad(&dy_pass.out.class_posterior, &labels_of(&tr.ly, n), nd)?;
    terms.gan_x = gan_x.as_f64();
    terms.gan_y = gan_y.as_f64();
    terms.cls_fake = cls_x.as_f64() + cls_y.as_f64();
    terms.rec = (distance(&tr.x, &x_rec, Distance::L2)? + distance(&tr.y, &y_rec, Distance::L2)?).as_f64();
    terms.lcl = (distance(&tr.z_x, &z_yhat, cfg.latent_distance)? + distance(&tr.z_y, &z_xhat, cfg.latent_distance)?)
        .as_f64();
    terms.cyc = (distance(&tr.x, &x_cyc, cfg.cycle_distance)? + distance(&tr.y, &y_cyc, cfg.cycle_distance)?).as_f64();
    terms.composite = composite_loss(&terms, w);
    check_finite(&terms)?;

    let alpha0 = T::lit(w.alpha0);
    let alpha1 = T::lit(w.alpha1);
    let alpha2 = T::lit(w.alpha2);
    let alpha3 = T::lit(w.alpha3);
    scale(&mut dpost_x, alpha2);
    scale(&mut dpost_y, alpha2);

    // Adjoints of the shared intermediates.
    let mut d_zx = Tensor::zeros(tr.z_x.shape());
    let mut d_zy = Tensor::zeros(tr.z_y.shape());
    let mut d_xhat = params
        .discriminator_backward(&dx_pass.out, &dx_pass.cache, &dx_pass.head_shape, &d_fake_x, &dpost_x, None, true)
        .expect("input grad requested");
    let mut d_yhat = params
        .discriminator_backward(&dy_pass.out, &dy_pass.cache, &dy_pass.head_shape, &d_fake_y, &dpost_y, None, true)
        .expect("input grad requested");

    let mut d_zyhat = Tensor::zeros(z_yhat.shape());
    let mut d_zxhat = Tensor::zeros(z_xhat.shape());
    if w.alpha1 > 0.0 {
        let g = distance_grad(&tr.z_x, &z_yhat, cfg.latent_distance, alpha1)?;
        d_zyhat.add_assign(&g);
        d_zx.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a -= *b);
        let g = distance_grad(&tr.z_y, &z_xhat, cfg.latent_distance, alpha1)?;
        d_zxhat.add_assign(&g);
        d_zy.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a -= *b);
    }
    if w.alpha3 > 0.0 {
        let g = distance_grad(&tr.x, &x_cyc, cfg.cycle_distance, alpha3)?;
        let d = params.backward(&gen_x_cyc, g, Some(&mut grads), true).expect("input grad");
        d_zyhat.add_assign(&d);
        let g = distance_grad(&tr.y, &y_cyc, cfg.cycle_distance, alpha3)?;
        let d = params.backward(&gen_y_cyc, g, Some(&mut grads), true).expect("input grad");
        d_zxhat.add_assign(&d);
    }
    if w.alpha1 > 0.0 || w.alpha3 > 0.0 {
        let d = params.backward(&enc_yhat, d_zyhat, Some(&mut grads), true).expect("input grad");
        d_yhat.add_assign(&d);
        let d = params.backward(&enc_xhat, d_zxhat, Some(&mut grads), true).expect("input grad");
        d_xhat.add_assign(&d);
    }
    if w.alpha0 > 0.0 {
        let g = distance_grad(&tr.x, &x_rec, Distance::L2, alpha0)?;
        let d = params.backward(&gen_x_rec, g, Some(&mut grads), true).expect("input grad");
        d_zx.add_assign(&d);
        let g = distance_grad(&tr.y, &y_rec, Distance::L2, alpha0)?;
        let d = params.backward(&gen_y_rec, g, Some(&mut grads), true).expect("input grad");
        d_zy.add_assign(&d);
    }
    let d = params.backward(&tr.gen_y_hat, d_yhat, Some(&mut grads), true).expect("input grad");
    d_zx.add_assign(&d);
    let d = params.backward(&tr.gen_x_hat, d_xhat, Some(&mut grads), true).expect("input grad");
    d_zy.add_assign(&d);
    params.backward(&tr.enc_x, d_zx, Some(&mut grads), false);
    params.backward(&tr.enc_y, d_zy, Some(&mut grads), false);
    Ok((terms, grads))
}

/// Discriminator-phase objective and its gradient w.r.t. every slot
/// (non-zero only on discriminator slots).
pub fn d_phase_gradients<T: Real>(
    params: &ModelParams<T>,
    a: &LabeledBatch<T>,
    b: &LabeledBatch<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let tr = Translation::forward(params, a, b)?;
    d_phase_with(params, &tr, weights)
}

/// Encoder/generator-phase objective and its gradient w.r.t. every slot
/// (non-zero only on encoder/generator slots).
pub fn eg_phase_gradients<T: Real>(
    params: &ModelParams<T>,
    a: &LabeledBatch<T>,
    b: &LabeledBatch<T>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let tr = Translation::forward(params, a, b)?;
    eg_phase_with(params, &tr, cfg)
}

pub fn discriminator_ids<T: Real>(params: &ModelParams<T>) -> Vec<ParamId> {
    params.param_ids_of(&[NetId::DiscriminatorX, NetId::DiscriminatorY])
}

pub fn encoder_generator_ids<T: Real>(params: &ModelParams<T>) -> Vec<ParamId> {
    params.param_ids_of(&[NetId::EncoderX, NetId::EncoderY, NetId::GeneratorX, NetId::GeneratorY])
}

/// One training iteration on batch `a` (X role) and `b` (Y role).
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    a: &LabeledBatch<T>,
    b: &LabeledBatch<T>,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    train_step_observed(state, a, b, cfg, &mut |_, _| {})
}

/// [`train_step`] that shows `after_phase` the parameters right after each
/// phase's update.
pub fn train_step_observed<T: Real>(
    state: &mut TrainState<T>,
    a: &LabeledBatch<T>,
    b: &LabeledBatch<T>,
    cfg: &TrainConfig,
    after_phase: &mut dyn FnMut(Phase, &ModelParams<T>),
) -> Result<LossRecord> {
    let adam = cfg.adam();
    let tr = Translation::forward(&state.params, a, b)?;

    let (d_terms, grads) = d_phase_with(&state.params, &tr, &cfg.weights)?;
    let d_ids = discriminator_ids(&state.params);
    state.apply(&grads, &d_ids, &adam)?;
    after_phase(Phase::D, &state.params);

    // E and G are untouched by the D step, so `tr` is still current.
    let (eg_terms, grads) = eg_phase_with(&state.params, &tr, cfg)?;
    let eg_ids = encoder_generator_ids(&state.params);
    state.apply(&grads, &eg_ids, &adam)?;
    after_phase(Phase::EG, &state.params);

    state.iteration += 1;
    let record = LossRecord {
        iteration: state.iteration,
        d: d_terms,
        eg: eg_terms,
    };
    state.loss_history.push(record);
    Ok(record)
}

/// Hooks invoked by [`train`]: logging and checkpoint cadence live here so
/// the loop itself stays free of IO.
pub trait TrainObserver<T> {
    fn on_log(&mut self, _state: &TrainState<T>, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl<T> TrainObserver<T> for NoopObserver {}

fn check_dataset(data: &MultiDomainDataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    if data.n_domains() < 2 {
        return Err(Error::InvalidDataset("need ≥ 2 domains".into()));
    }
    if data.n_domains() != model.n_domains {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} domains but the model expects {}",
            data.n_domains(),
            model.n_domains
        )));
    }
    if data.image_size() != model.image_size || data.image_channels() != model.image_channels {
        return Err(Error::InvalidConfig(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            data.image_channels(),
            data.image_size(),
            data.image_size(),
            model.image_channels,
            model.image_size,
            model.image_size
        )));
    }
    for d in 0..data.n_domains() {
        if data.train(d)?.len() < cfg.batch_per_domain {
            return Err(Error::InvalidDataset(format!(
                "domain {} has fewer than {} training images",
                data.domains()[d],
                cfg.batch_per_domain
            )));
        }
    }
    Ok(())
}

/// Runs `max_iterations` steps from a freshly initialized model.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    data: &MultiDomainDataset,
    model: &ModelConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    model.validate()?;
    let state = TrainState::new(model, cfg)?;
    resume(state, cfg, data, observer)
}

/// Continues `state` until `cfg.max_iterations`. Logs every `log_every`
/// steps, checkpoints every `checkpoint_every` steps and once at the end.
pub fn resume<T: Real>(
    mut state: TrainState<T>,
    cfg: &TrainConfig,
    data: &MultiDomainDataset,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    check_dataset(data, state.params.config(), cfg)?;
    let mut last_checkpoint = None;
    while state.iteration < cfg.max_iterations {
        let (da, db) = sample_domain_pair(data.n_domains(), &mut state.pair_rng)?;
        let (xa, la) = state.sampler.sample_batch(data, da, cfg.batch_per_domain)?;
        let (xb, lb) = state.sampler.sample_batch(data, db, cfg.batch_per_domain)?;
        let record = train_step(
            &mut state,
            &LabeledBatch { images: xa, label: la },
            &LabeledBatch { images: xb, label: lb },
            cfg,
        )?;
        if state.iteration % cfg.log_every == 0 {
            observer.on_log(&state, &record)?;
        }
        if state.iteration % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(&state)?;
            last_checkpoint = Some(state.iteration);
        }
    }
    if last_checkpoint != Some(state.iteration) {
        observer.on_checkpoint(&state)?;
    }
    Ok(state)
}

/// One finite-difference probe of a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradProbe {
    pub phase: Phase,
    pub slot: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a - n| / max(|a|, |n|)`; two values that are both below `floor`
    /// count as agreeing.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < floor {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares analytic phase gradients against central differences on
/// `per_phase` randomly chosen scalars of each phase's own parameters.
pub fn finite_difference_probes(
    params: &ModelParams<f64>,
    a: &LabeledBatch<f64>,
    b: &LabeledBatch<f64>,
    cfg: &TrainConfig,
    per_phase: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradProbe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(2 * per_phase);
    for phase in [Phase::D, Phase::EG] {
        let objective = |p: &ModelParams<f64>| -> Result<(f64, Gradients<f64>)> {
            let (terms, grads) = match phase {
                Phase::D => d_phase_gradients(p, a, b, &cfg.weights)?,
                Phase::EG => eg_phase_gradients(p, a, b, cfg)?,
            };
            Ok((terms.composite, grads))
        };
        let ids = match phase {
            Phase::D => discriminator_ids(params),
            Phase::EG => encoder_generator_ids(params),
        };
        let sizes: Vec<usize> = ids.iter().map(|id| params.tensor(*id).len()).collect();
        let total: usize = sizes.iter().sum();
        let (_, grads) = objective(params)?;
        let mut work = params.clone();
        for _ in 0..per_phase {
            let mut flat = rng.random_range(0..total);
            let mut k = 0;
            while flat >= sizes[k] {
                flat -= sizes[k];
                k += 1;
            }
            let (slot, index) = (ids[k], flat);
            let original = work.tensor(slot).data()[index];
            work.tensor_mut(slot).data_mut()[index] = original + eps;
            let (plus, _) = objective(&work)?;
            work.tensor_mut(slot).data_mut()[index] = original - eps;
            let (minus, _) = objective(&work)?;
            work.tensor_mut(slot).data_mut()[index] = original;
            probes.push(GradProbe {
                phase,
                slot,
                index,
                analytic: grads.get(slot).data()[index],
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_domains_only_yield_the_two_ordered_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [0usize; 2];
        for _ in 0..200 {
            match sample_domain_pair(2, &mut rng).unwrap() {
                (0, 1) => seen[0] += 1,
                (1, 0) => seen[1] += 1,
                other => panic!("unexpected pair {other:?}"),
            }
        }
        assert!(seen[0] > 0 && seen[1] > 0);
    }

    #[test]
    fn pair_sampling_needs_two_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_domain_pair(1, &mut rng).is_err());
    }

    #[test]
    fn pair_sequence_is_seed_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_domain_pair(5, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn train_config_validation_names_the_field() {
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidConfig(m)) => assert!(m.contains("learning_rate")),
            other => panic!("{other:?}"),
        }
        let cfg = TrainConfig {
            adam_beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(1);
        for _ in 0..17 {
            let _: u32 = rng.random();
        }
        let mut restored = RngState::capture(&rng).restore();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }
}
