use cdgan_core::data::{make_synthetic, BatchSampler, SyntheticDomainSpec};
use cdgan_core::losses::{Distance, Phase};
use cdgan_core::model::{ModelConfig, ModelParams};
use cdgan_core::trainer::{finite_difference_probes, GradProbe, LabeledBatch, TrainConfig};

fn batches(n: usize) -> (ModelParams<f64>, LabeledBatch<f64>, LabeledBatch<f64>) {
    let model = ModelConfig::micro(2);
    let data = make_synthetic(&SyntheticDomainSpec {
        n_domains: 2,
        images_per_domain: 6,
        image_size: model.image_size,
        seed: 11,
        test_fraction: 0.2,
    })
    .unwrap();
    let mut sampler = BatchSampler::new(5, 2);
    let (xa, la) = sampler.sample_batch::<f64>(&data, 0, n).unwrap();
    let (xb, lb) = sampler.sample_batch::<f64>(&data, 1, n).unwrap();
    let params = ModelParams::build(&model, 3).unwrap();
    (
        params,
        LabeledBatch { images: xa, label: la },
        LabeledBatch { images: xb, label: lb },
    )
}

// The network is piecewise smooth (LeakyReLU, L1), so any single step size
// occasionally straddles a breakpoint. A probe counts as agreeing when some
// small step reproduces the analytic value.
fn disagreeing(params: &ModelParams<f64>, a: &LabeledBatch<f64>, b: &LabeledBatch<f64>, cfg: &TrainConfig, n: usize) -> Vec<GradProbe> {
    let runs: Vec<Vec<GradProbe>> = [1e-5, 1e-6, 1e-7]
        .iter()
        .map(|&eps| finite_difference_probes(params, a, b, cfg, n, eps, 17).unwrap())
        .collect();
    (0..runs[0].len())
        .filter(|&i| runs.iter().all(|r| r[i].relative_error(1e-7) > 1e-2))
        .map(|i| runs[1][i])
        .collect()
}

#[test]
fn analytic_gradients_agree_with_central_differences() {
    let (params, a, b) = batches(2);
    let cfg = TrainConfig::default();
    let bad = disagreeing(&params, &a, &b, &cfg, 100);
    assert!(bad.len() <= 1, "disagreeing probes: {bad:?}");
}

#[test]
fn l2_distances_have_consistent_gradients_too() {
    let (params, a, b) = batches(1);
    let cfg = TrainConfig {
        latent_distance: Distance::L2,
        cycle_distance: Distance::L2,
        ..TrainConfig::default()
    };
    let bad = disagreeing(&params, &a, &b, &cfg, 40);
    assert!(bad.len() <= 1, "disagreeing probes: {bad:?}");
}

#[test]
fn probes_cover_both_phases_with_the_requested_count() {
    let (params, a, b) = batches(1);
    let probes = finite_difference_probes(&params, &a, &b, &TrainConfig::default(), 5, 1e-6, 1).unwrap();
    assert_eq!(probes.len(), 10);
    assert_eq!(probes.iter().filter(|p| p.phase == Phase::D).count(), 5);
    assert_eq!(probes.iter().filter(|p| p.phase == Phase::EG).count(), 5);
}
