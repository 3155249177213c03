use cdgan_core::data::{make_synthetic, MultiDomainDataset, SyntheticDomainSpec};
use cdgan_core::eval::{classification_accuracy, generate_eval_set, train_judge, JudgeConfig};
use cdgan_core::model::{ModelConfig, ModelParams};

fn benchmark() -> MultiDomainDataset {
    make_synthetic(&SyntheticDomainSpec {
        n_domains: 4,
        images_per_domain: 200,
        image_size: 32,
        seed: 7,
        test_fraction: 0.2,
    })
    .unwrap()
}

fn channel_mean(data: &MultiDomainDataset, domain: usize, channel: usize) -> f64 {
    let plane = data.image_size() * data.image_size();
    let split = data.split(domain).unwrap();
    let (sum, n) = split
        .train
        .iter()
        .chain(&split.test)
        .fold((0.0, 0usize), |(s, n), img| {
            let p = &img.pixels[channel * plane..(channel + 1) * plane];
            (s + p.iter().map(|v| *v as f64).sum::<f64>(), n + plane)
        });
    sum / n as f64
}

#[test]
fn benchmark_counts_and_ranges() {
    let data = benchmark();
    assert_eq!(data.total_images(), 800);
    for d in 0..4 {
        let split = data.split(d).unwrap();
        assert_eq!(split.train.len() + split.test.len(), 200);
        for s in split.train.iter().chain(&split.test) {
            assert_eq!(s.pixels.len(), 3 * 32 * 32);
            assert!(s.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let train: Vec<&str> = split.train.iter().map(|s| s.name.as_str()).collect();
        assert!(split.test.iter().all(|s| !train.contains(&s.name.as_str())));
    }
}

#[test]
fn red_tinted_domain_is_clearly_redder() {
    let data = benchmark();
    let reds: Vec<f64> = (0..4).map(|d| channel_mean(&data, d, 0)).collect();
    let (red, _) = reds
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    for (d, m) in reds.iter().enumerate().filter(|(d, _)| *d != red) {
        assert!(reds[red] - m >= 0.3, "domain {red} red mean {} vs domain {d} {m}", reds[red]);
    }
}

#[test]
fn two_layer_cnn_separates_the_synthetic_domains() {
    let data = benchmark();
    let judge = train_judge(
        &data,
        &JudgeConfig {
            channels: vec![16, 32],
            ..JudgeConfig::default()
        },
    )
    .unwrap();
    assert!(judge.real_test_accuracy() >= 0.99, "accuracy {}", judge.real_test_accuracy());
}

#[test]
fn judge_training_is_seed_deterministic_and_refuses_when_weak() {
    let data = make_synthetic(&SyntheticDomainSpec {
        n_domains: 3,
        images_per_domain: 30,
        image_size: 16,
        seed: 1,
        test_fraction: 0.2,
    })
    .unwrap();
    let cfg = JudgeConfig {
        epochs: 2,
        ..JudgeConfig::default()
    };
    let a = train_judge(&data, &cfg).unwrap();
    let b = train_judge(&data, &cfg).unwrap();
    assert_eq!(a.parameters(), b.parameters());
    assert_eq!(a.real_test_accuracy(), b.real_test_accuracy());

    let strict = train_judge(
        &data,
        &JudgeConfig {
            epochs: 0,
            accuracy_floor: 1.0,
            ..cfg
        },
    )
    .unwrap();
    let model = ModelConfig {
        image_size: 16,
        ..ModelConfig::micro(3)
    };
    let params = ModelParams::<f32>::build(&model, 0).unwrap();
    let set = generate_eval_set(&params, &data, None, 0).unwrap();
    assert!(strict.real_test_accuracy() < 1.0);
    assert!(!strict.is_usable());
    let err = classification_accuracy(&strict, &set.images, &set.targets).unwrap_err();
    assert!(err.to_string().contains("below the usability floor"), "{err}");
}

#[test]
fn scoring_is_a_pure_recount_of_argmaxes() {
    let data = make_synthetic(&SyntheticDomainSpec {
        n_domains: 3,
        images_per_domain: 30,
        image_size: 16,
        seed: 2,
        test_fraction: 0.2,
    })
    .unwrap();
    let judge = train_judge(&data, &JudgeConfig::default()).unwrap();
    let judge_before = judge.clone();
    let model = ModelConfig {
        image_size: 16,
        ..ModelConfig::micro(3)
    };
    let params = ModelParams::<f32>::build(&model, 4).unwrap();
    let set = generate_eval_set(&params, &data, None, 0).unwrap();
    assert_eq!(set.targets.len(), 3 * 6 * 2);
    assert_eq!(set, generate_eval_set(&params, &data, None, 0).unwrap());
    assert!(judge.is_usable());
    let acc = classification_accuracy(&judge, &set.images, &set.targets).unwrap();
    let preds = judge.predict(&set.images).unwrap();
    let correct = preds.iter().zip(&set.targets).filter(|(p, t)| **p == t.id()).count();
    assert_eq!(acc, correct as f64 / set.targets.len() as f64);
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(judge, judge_before);
}
