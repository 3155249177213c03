use cdgan_core::data::{make_synthetic, BatchSampler, MultiDomainDataset, SyntheticDomainSpec};
use cdgan_core::losses::Phase;
use cdgan_core::model::{ModelConfig, ModelParams, ParamId};
use cdgan_core::tensor::{ImageBatch, LatentCode};
use cdgan_core::trainer::{
    discriminator_ids, encoder_generator_ids, resume, sample_domain_pair, train, train_step, train_step_observed,
    LabeledBatch, LossRecord, NoopObserver, TrainConfig, TrainState,
};
use cdgan_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn synthetic(n_domains: usize, per_domain: usize, size: usize) -> MultiDomainDataset {
    make_synthetic(&SyntheticDomainSpec {
        n_domains,
        images_per_domain: per_domain,
        image_size: size,
        seed: 7,
        test_fraction: 0.2,
    })
    .unwrap()
}

fn micro_cfg(iterations: u64) -> TrainConfig {
    TrainConfig {
        max_iterations: iterations,
        seed: 21,
        ..TrainConfig::default()
    }
}

fn batches(data: &MultiDomainDataset, sampler: &mut BatchSampler) -> (LabeledBatch<f32>, LabeledBatch<f32>) {
    let (xa, la) = sampler.sample_batch(data, 0, 1).unwrap();
    let (xb, lb) = sampler.sample_batch(data, 1, 1).unwrap();
    (
        LabeledBatch { images: xa, label: la },
        LabeledBatch { images: xb, label: lb },
    )
}

fn snapshot(params: &ModelParams<f32>) -> Vec<Tensor<f32>> {
    (0..params.slot_count()).map(|i| params.tensor(ParamId(i)).clone()).collect()
}

fn changed(before: &[Tensor<f32>], after: &ModelParams<f32>, ids: &[ParamId]) -> usize {
    ids.iter().filter(|id| before[id.0] != *after.tensor(**id)).count()
}

fn bits(history: &[LossRecord]) -> Vec<u64> {
    history
        .iter()
        .flat_map(|r| {
            let mut v = vec![r.iteration];
            v.extend(r.d.terms().iter().chain(r.eg.terms().iter()).map(|(_, x)| x.to_bits()));
            v
        })
        .collect()
}

fn chi_square_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn ordered_pairs_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [[0u64; 4]; 4];
    for _ in 0..12_000 {
        let (a, b) = sample_domain_pair(4, &mut rng).unwrap();
        counts[a][b] += 1;
    }
    let mut flat = Vec::new();
    for (a, row) in counts.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            if a == b {
                assert_eq!(c, 0);
            } else {
                assert!((850..=1150).contains(&c), "pair ({a},{b}) drawn {c} times");
                flat.push(c);
            }
        }
    }
    assert_eq!(flat.len(), 12);
    let p = chi_square_p(&flat);
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn each_domain_is_drawn_equally_often() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0u64; 5];
    for _ in 0..10_000 {
        let (a, b) = sample_domain_pair(5, &mut rng).unwrap();
        counts[a] += 1;
        counts[b] += 1;
    }
    let p = chi_square_p(&counts);
    assert!(p > 0.01, "chi-square p = {p} for {counts:?}");
}

#[test]
fn identical_seeds_give_bit_identical_histories() {
    let data = synthetic(3, 8, 8);
    let model = ModelConfig::micro(3);
    let a = train::<f32>(&micro_cfg(10), &data, &model, &mut NoopObserver).unwrap();
    let b = train::<f32>(&micro_cfg(10), &data, &model, &mut NoopObserver).unwrap();
    assert_eq!(a.loss_history.len(), 10);
    assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
    let other = train::<f32>(&TrainConfig { seed: 22, ..micro_cfg(10) }, &data, &model, &mut NoopObserver).unwrap();
    assert_ne!(bits(&a.loss_history), bits(&other.loss_history));
}

#[test]
fn tied_groups_stay_identical_through_both_phases() {
    let data = synthetic(2, 6, 8);
    let mut model = ModelConfig::micro(2);
    model.n_shared_layers = 2;
    let cfg = micro_cfg(0);
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    assert!(!state.params.tied_groups().is_empty());
    let mut sampler = BatchSampler::new(1, 2);
    for _ in 0..15 {
        let (a, b) = batches(&data, &mut sampler);
        let mut worst = 0.0f64;
        train_step_observed(&mut state, &a, &b, &cfg, &mut |_, p| worst = worst.max(p.max_tied_difference())).unwrap();
        assert_eq!(worst, 0.0);
    }
}

#[test]
fn each_phase_updates_only_its_own_networks() {
    let data = synthetic(2, 6, 8);
    let model = ModelConfig::micro(2);
    let cfg = micro_cfg(0);
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    let d_ids = discriminator_ids(&state.params);
    let eg_ids = encoder_generator_ids(&state.params);
    assert!(d_ids.iter().all(|id| !eg_ids.contains(id)));
    let mut sampler = BatchSampler::new(1, 2);
    for _ in 0..3 {
        let (a, b) = batches(&data, &mut sampler);
        let before = snapshot(&state.params);
        let mut after_d = None;
        train_step_observed(&mut state, &a, &b, &cfg, &mut |phase, p| match phase {
            Phase::D => {
                assert_eq!(changed(&before, p, &eg_ids), 0, "D step touched E/G");
                assert!(changed(&before, p, &d_ids) > 0, "D step changed nothing");
                after_d = Some(snapshot(p));
            }
            Phase::EG => {
                let mid = after_d.as_ref().unwrap();
                assert_eq!(changed(mid, p, &d_ids), 0, "EG step touched D");
                assert!(changed(mid, p, &eg_ids) > 0, "EG step changed nothing");
            }
        })
        .unwrap();
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = synthetic(2, 6, 8);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..micro_cfg(0)
    };
    let mut state = TrainState::<f32>::new(&ModelConfig::micro(2), &micro_cfg(0)).unwrap();
    let before = snapshot(&state.params);
    let mut sampler = BatchSampler::new(1, 2);
    let (a, b) = batches(&data, &mut sampler);
    let record = train_step(&mut state, &a, &b, &cfg).unwrap();
    assert_eq!(snapshot(&state.params), before);
    assert!(record.d.first_non_finite().is_none() && record.eg.first_non_finite().is_none());
    assert_eq!(state.iteration, 1);
}

#[test]
fn zero_iterations_return_the_initial_state() {
    let data = synthetic(2, 6, 8);
    let model = ModelConfig::micro(2);
    let cfg = micro_cfg(0);
    let state = train::<f32>(&cfg, &data, &model, &mut NoopObserver).unwrap();
    let fresh = TrainState::<f32>::new(&model, &cfg).unwrap();
    assert_eq!(state.iteration, 0);
    assert!(state.loss_history.is_empty());
    assert_eq!(snapshot(&state.params), snapshot(&fresh.params));
}

#[test]
fn resuming_a_cloned_state_matches_an_uninterrupted_run() {
    let data = synthetic(3, 8, 8);
    let model = ModelConfig::micro(3);
    let full = train::<f32>(&micro_cfg(15), &data, &model, &mut NoopObserver).unwrap();
    let half = train::<f32>(&micro_cfg(5), &data, &model, &mut NoopObserver).unwrap();
    let resumed = resume(half.clone(), &micro_cfg(15), &data, &mut NoopObserver).unwrap();
    assert_eq!(bits(&resumed.loss_history), bits(&full.loss_history));
    assert_eq!(snapshot(&resumed.params), snapshot(&full.params));
}

#[test]
fn latent_shapes_follow_the_encoder_strides() {
    let paper = ModelParams::<f32>::skeleton(&ModelConfig::paper(4)).unwrap();
    assert_eq!(paper.latent_shape(2), [2, 256, 64, 64]);

    let cfg = ModelConfig {
        image_size: 32,
        disc_depth: 4,
        ..ModelConfig::paper(4)
    };
    let params = ModelParams::<f32>::build(&cfg, 0).unwrap();
    let x = ImageBatch::new(Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    let z: LatentCode<f32> = params.encode(cdgan_core::model::Tower::X, &x).unwrap();
    assert_eq!(z.shape(), &[1, 256, 8, 8]);
}

#[test]
fn losses_stay_finite_for_the_first_hundred_iterations() {
    let data = synthetic(4, 200, 32);
    let cfg = TrainConfig {
        max_iterations: 100,
        ..TrainConfig::default()
    };
    let state = train::<f32>(&cfg, &data, &ModelConfig::desk(4), &mut NoopObserver).unwrap();
    assert_eq!(state.loss_history.len(), 100);
    for r in &state.loss_history {
        assert!(r.d.first_non_finite().is_none(), "iteration {}: {:?}", r.iteration, r.d);
        assert!(r.eg.first_non_finite().is_none(), "iteration {}: {:?}", r.iteration, r.eg);
    }
}
