//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line with its measured runtime (`--nocapture` shows them live).
//!
//! Heavy training criteria serialize on a lock so their runtime budgets
//! are measured on an unloaded machine.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use vrnl_core::data::generate_gaussian_mixture;
use vrnl_core::estimate::estimate_transition_anchor;
use vrnl_core::mlp::{finite_difference_gradient, gradient_relative_error};
use vrnl_core::noise::{build_asymmetric, build_pair, build_symmetric, corrupt_labels};
use vrnl_core::risk::{
    eq2_weights, head_losses, reweight_vrnl_risk, volmin_vrnl_objective, vrnl_empirical_risk,
    WeightMean,
};
use vrnl_core::trainer::{run_pipeline, DataConfig, ExperimentConfig, TransitionSource};
use vrnl_core::{
    LossHead, Matrix, Method, Mlp, NoiseKind, NoiseSpec, OptimizerConfig, RiskSpec, RngStream,
    SyntheticSpec, TrainableTransition,
};

static RUN_LOCK: Mutex<()> = Mutex::new(());

/// Prints `acceptance NN name PASS/FAIL (t)` when the test finishes,
/// pass or panic.
struct Criterion {
    id: u32,
    name: &'static str,
    budget_seconds: f64,
    start: Instant,
}

impl Criterion {
    fn start(id: u32, name: &'static str, budget_seconds: f64) -> Self {
        Criterion {
            id,
            name,
            budget_seconds,
            start: Instant::now(),
        }
    }

    fn finish(self) {
        let elapsed = self.start.elapsed().as_secs_f64();
        assert!(
            elapsed < self.budget_seconds,
            "criterion {} overran its {}s budget: {elapsed:.1}s",
            self.id,
            self.budget_seconds
        );
    }
}

impl Drop for Criterion {
    fn drop(&mut self) {
        let status = if std::thread::panicking() {
            "FAIL"
        } else {
            "PASS"
        };
        println!(
            "acceptance {:02} {:<24} {} ({:.1}s)",
            self.id,
            self.name,
            status,
            self.start.elapsed().as_secs_f64()
        );
    }
}

fn random_problem(seed: u64) -> (Mlp, Matrix, Vec<usize>, usize) {
    let mut rng = RngStream::new(seed, 100);
    let d_in = 2 + rng.usize_below(3);
    let hidden = 3 + rng.usize_below(5);
    let classes = 2 + rng.usize_below(3);
    let mlp = Mlp::new(&[d_in, hidden, classes], &mut rng).unwrap();
    assert!(mlp.param_count() <= 200);
    let n = 8 + rng.usize_below(25); // batch size in 8..=32
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d_in).map(|_| rng.normal()).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.usize_below(classes)).collect();
    (mlp, Matrix::from_rows(&rows).unwrap(), labels, classes)
}

/// Criterion 1: the weighted-gradient path equals finite differences of the
/// variance-regularized empirical risk, 20 seeds, max relative error 1e-5.
#[test]
fn acceptance_01_gradient_identity() {
    let c = Criterion::start(1, "gradient-identity", 10.0);
    for seed in 0..20u64 {
        let (mlp, batch, labels, _) = random_problem(seed);
        for &alpha in &[0.0, 0.05, 0.1] {
            let losses = head_losses(&mlp, &LossHead::PlainCe, &batch, &labels).unwrap();
            let (weights, clamped) =
                eq2_weights(&losses, alpha, WeightMean::Batch, f64::NEG_INFINITY);
            assert_eq!(clamped, 0);
            let (_, analytic) = mlp
                .weighted_batch_gradient(&batch, &labels, &weights, &LossHead::PlainCe)
                .unwrap();
            let fd = finite_difference_gradient(&mlp, |m| {
                let l = head_losses(m, &LossHead::PlainCe, &batch, &labels).unwrap();
                vrnl_empirical_risk(&l, alpha).unwrap()
            });
            let rel = gradient_relative_error(&analytic, &fd);
            assert!(
                rel < 1e-5,
                "seed {seed} alpha {alpha}: relative error {rel}"
            );
        }
    }
    c.finish();
}

/// Criterion 2: forward, reweight (factors frozen) and volmin objectives
/// match finite differences within 1e-4, 10 seeds each.
#[test]
fn acceptance_02_objective_gradients() {
    let c = Criterion::start(2, "objective-gradients", 30.0);
    for seed in 0..10u64 {
        let (mlp, batch, labels, classes) = random_problem(seed + 50);
        let mut rng = RngStream::new(seed, 101);
        let alpha = 0.1;

        // Forward: variance-weighted gradient through the mixing matrix.
        let t = build_symmetric(classes, rng.uniform_in(0.1, 0.4)).unwrap();
        let head = LossHead::ForwardCe {
            transition: t.clone(),
        };
        let losses = head_losses(&mlp, &head, &batch, &labels).unwrap();
        let (weights, _) = eq2_weights(&losses, alpha, WeightMean::Batch, f64::NEG_INFINITY);
        let (_, analytic) = mlp
            .weighted_batch_gradient(&batch, &labels, &weights, &head)
            .unwrap();
        let fd = finite_difference_gradient(&mlp, |m| {
            let l = head_losses(m, &head, &batch, &labels).unwrap();
            vrnl_empirical_risk(&l, alpha).unwrap()
        });
        let rel = gradient_relative_error(&analytic, &fd);
        assert!(rel < 1e-4, "forward seed {seed}: relative error {rel}");

        // Reweight with frozen factors: weights apply to beta-scaled losses.
        let betas: Vec<f64> = (0..batch.rows())
            .map(|_| rng.uniform_in(0.3, 2.5))
            .collect();
        let plain = head_losses(&mlp, &LossHead::PlainCe, &batch, &labels).unwrap();
        let (_, w_hat) = reweight_vrnl_risk(&plain, &betas, alpha).unwrap();
        let grad_w: Vec<f64> = w_hat.iter().zip(&betas).map(|(w, b)| w * b).collect();
        let (_, analytic) = mlp
            .weighted_batch_gradient(&batch, &labels, &grad_w, &LossHead::PlainCe)
            .unwrap();
        let fd = finite_difference_gradient(&mlp, |m| {
            let l = head_losses(m, &LossHead::PlainCe, &batch, &labels).unwrap();
            let products: Vec<f64> = l.iter().zip(&betas).map(|(l, b)| l * b).collect();
            vrnl_empirical_risk(&products, alpha).unwrap()
        });
        let rel = gradient_relative_error(&analytic, &fd);
        assert!(rel < 1e-4, "reweight seed {seed}: relative error {rel}");

        // VolMin: classifier side against mean CE − α·Var at fixed T̂, and
        // the transition side against mean CE + λ·log det through the
        // parameterization.
        let mut tt = TrainableTransition::new(classes).unwrap();
        let u: Vec<f64> = (0..classes * (classes - 1))
            .map(|_| rng.uniform_in(-3.0, 1.0))
            .collect();
        tt.set_params(&u).unwrap();
        let lambda = 1e-3;
        let eval =
            volmin_vrnl_objective(&mlp, &tt, &batch, &labels, alpha, lambda, f64::NEG_INFINITY)
                .unwrap();

        let fixed_head = LossHead::ForwardCe {
            transition: tt.realize(),
        };
        let fd_theta = finite_difference_gradient(&mlp, |m| {
            let l = head_losses(m, &fixed_head, &batch, &labels).unwrap();
            vrnl_empirical_risk(&l, alpha).unwrap()
        });
        let rel = gradient_relative_error(&eval.theta_grads, &fd_theta);
        assert!(rel < 1e-4, "volmin theta seed {seed}: relative error {rel}");

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for k in 0..u.len() {
            let eval_at = |uk: f64| {
                let mut probe = tt.clone();
                let mut up = u.clone();
                up[k] = uk;
                probe.set_params(&up).unwrap();
                let t = probe.realize();
                let head = LossHead::ForwardCe {
                    transition: t.clone(),
                };
                let l = head_losses(&mlp, &head, &batch, &labels).unwrap();
                let mean = l.iter().sum::<f64>() / l.len() as f64;
                mean + lambda * vrnl_core::numerics::log_det(t.matrix()).unwrap().ln_abs
            };
            let fd = (eval_at(u[k] + h) - eval_at(u[k] - h)) / (2.0 * h);
            let scale = fd.abs().max(eval.u_grads[k].abs()).max(1e-8);
            max_rel = max_rel.max((fd - eval.u_grads[k]).abs() / scale);
        }
        assert!(
            max_rel < 1e-4,
            "volmin u seed {seed}: relative error {max_rel}"
        );
    }
    c.finish();
}

/// Criterion 3: weight algebra on the criterion-1 batches — mean weight
/// exactly 1 in batch mode, and strictly decreasing in the loss.
#[test]
fn acceptance_03_weight_algebra() {
    let c = Criterion::start(3, "weight-algebra", 10.0);
    for seed in 0..20u64 {
        let (mlp, batch, labels, _) = random_problem(seed);
        let losses = head_losses(&mlp, &LossHead::PlainCe, &batch, &labels).unwrap();
        for &alpha in &[0.05, 0.1] {
            let (w, clamped) = eq2_weights(&losses, alpha, WeightMean::Batch, f64::NEG_INFINITY);
            assert_eq!(clamped, 0);
            let mean_w = w.iter().sum::<f64>() / w.len() as f64;
            assert!(
                (mean_w - 1.0).abs() <= 1e-12,
                "seed {seed}: mean weight {mean_w}"
            );
            for i in 0..losses.len() {
                for j in 0..losses.len() {
                    if losses[i] < losses[j] {
                        assert!(w[i] > w[j], "seed {seed}: weights not strictly decreasing");
                    }
                }
            }
        }
    }
    c.finish();
}

fn true_transition(
    kind: NoiseKind,
    classes: usize,
    rate: f64,
    seed: u64,
) -> vrnl_core::TransitionMatrix {
    match kind {
        NoiseKind::Symmetric => build_symmetric(classes, rate).unwrap(),
        NoiseKind::Pair => build_pair(classes, rate).unwrap(),
        NoiseKind::Asymmetric => build_asymmetric(classes, rate, seed).unwrap(),
    }
}

/// Criterion 4: anchor estimation with oracle posteriors and planted
/// anchors recovers the true matrix to 1e-8 for C ∈ {2,3,5}, all kinds.
#[test]
fn acceptance_04_exact_transition_recovery() {
    let c = Criterion::start(4, "exact-t-recovery", 60.0);
    for &classes in &[2usize, 3, 5] {
        let spec = SyntheticSpec::ring(classes, 2, 3.0, 0.8, 400, 7);
        let (data, oracle) = generate_gaussian_mixture(&spec).unwrap();
        for kind in [NoiseKind::Symmetric, NoiseKind::Asymmetric, NoiseKind::Pair] {
            let t = true_transition(kind, classes, 0.3, 11);
            let noisy_model = oracle.through(&t);
            let estimate = estimate_transition_anchor(&noisy_model, &data.features, 100.0).unwrap();
            let err = t.l11_distance(&estimate);
            assert!(
                err < 1e-8,
                "C={classes} kind={kind:?}: estimation error {err}"
            );
        }
    }
    c.finish();
}

/// Criterion 5: empirical flip frequencies within the 4σ binomial bound,
/// 10,000 draws per class, fixed seed.
#[test]
fn acceptance_05_corruption_statistics() {
    let c = Criterion::start(5, "corruption-statistics", 60.0);
    let classes = 4;
    let per_class = 10_000usize;
    for (kind, stream) in [
        (NoiseKind::Symmetric, 1u64),
        (NoiseKind::Asymmetric, 2),
        (NoiseKind::Pair, 3),
    ] {
        let t = true_transition(kind, classes, 0.3, 13);
        let mut rng = RngStream::new(17, stream);
        for class in 0..classes {
            let clean = vec![class; per_class];
            let noisy = corrupt_labels(&clean, &t, &mut rng).unwrap();
            let mut counts = vec![0usize; classes];
            for &y in &noisy {
                counts[y] += 1;
            }
            for (row, &count) in counts.iter().enumerate() {
                let p = t.get(row, class);
                let freq = count as f64 / per_class as f64;
                let bound = 4.0 * (p * (1.0 - p) / per_class as f64).sqrt();
                assert!(
                    (freq - p).abs() <= bound,
                    "kind={kind:?} entry ({row},{class}): freq {freq} vs {p}, bound {bound}"
                );
            }
        }
    }
    c.finish();
}

fn paired_config(method: Method, alpha: f64, rate: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig::Synthetic {
            spec: SyntheticSpec::ring(3, 2, 2.0, 1.0, 3000, seed),
            test_n: 1000,
        },
        noise: NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
            classes: 3,
            seed,
        },
        risk: RiskSpec::new(method, alpha),
        optimizer: OptimizerConfig {
            seed,
            ..OptimizerConfig::default()
        },
        hidden: vec![128, 128],
        val_fraction: 0.1,
        warmup_epochs: 20,
        transition_source: TransitionSource::Given,
        anchor_percentile: 97.0,
        gamma: 0.0,
        seed,
        deterministic: true,
    }
}

/// Criterion 6: at sym-0.2 the regularized run ends with strictly larger
/// mean loss on mislabeled examples on at least 4 of 5 paired seeds, while
/// the correctly-labeled means stay within 2x of each other.
#[test]
fn acceptance_06_memorization_gap() {
    let _guard = RUN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let c = Criterion::start(6, "memorization-gap", 300.0);
    let mut ordered = 0;
    for seed in 0..5u64 {
        let base = run_pipeline(&paired_config(Method::Forward, 0.0, 0.2, seed)).unwrap();
        let vrnl = run_pipeline(&paired_config(Method::Forward, 0.1, 0.2, seed)).unwrap();
        let last_base = base.outcome.report.rows.last().unwrap().clone();
        let last_vrnl = vrnl.outcome.report.rows.last().unwrap().clone();
        let inc_base = last_base.loss_incorrect.expect("noise present");
        let inc_vrnl = last_vrnl.loss_incorrect.expect("noise present");
        if inc_vrnl > inc_base {
            ordered += 1;
        }
        let cor_base = last_base.loss_correct.expect("clean present");
        let cor_vrnl = last_vrnl.loss_correct.expect("clean present");
        let ratio = cor_vrnl / cor_base;
        assert!(
            (0.5..2.0).contains(&ratio),
            "seed {seed}: correct-label means differ by {ratio}x"
        );
        assert_eq!(
            base.summary.total_weight_clamps, 0,
            "unweighted run cannot clamp"
        );
        assert_eq!(
            vrnl.summary.total_weight_clamps, 0,
            "bounded forward losses keep weights positive at alpha 0.1"
        );
    }
    assert!(ordered >= 4, "ordering held on {ordered}/5 seeds");
    c.finish();
}

/// Criterion 7: at sym-0.5 the regularized variants lose no more than 0.5
/// accuracy points on the 5-seed mean, for forward and reweight.
#[test]
fn acceptance_07_accuracy_non_degradation() {
    let _guard = RUN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let c = Criterion::start(7, "accuracy-floor", 600.0);
    for method in [Method::Forward, Method::Reweight] {
        let mut base_mean = 0.0;
        let mut vrnl_mean = 0.0;
        for seed in 0..5u64 {
            base_mean += run_pipeline(&paired_config(method, 0.0, 0.5, seed))
                .unwrap()
                .summary
                .best_test_acc
                / 5.0;
            vrnl_mean += run_pipeline(&paired_config(method, 0.1, 0.5, seed))
                .unwrap()
                .summary
                .best_test_acc
                / 5.0;
        }
        println!("  {method:?}: base {base_mean:.4}, regularized {vrnl_mean:.4}");
        assert!(
            vrnl_mean >= base_mean - 0.005,
            "{method:?}: regularized mean {vrnl_mean} fell more than 0.5 points below {base_mean}"
        );
    }
    c.finish();
}

fn sweep_config(alpha: f64, gamma: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig::Synthetic {
            spec: SyntheticSpec::ring(3, 2, 2.0, 1.2, 1000, seed),
            test_n: 4000,
        },
        noise: NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: 0.3,
            classes: 3,
            seed,
        },
        risk: RiskSpec::new(Method::Reweight, alpha),
        optimizer: OptimizerConfig {
            seed,
            ..OptimizerConfig::default()
        },
        hidden: vec![128, 128],
        val_fraction: 0.1,
        warmup_epochs: 20,
        transition_source: TransitionSource::Given,
        anchor_percentile: 97.0,
        gamma,
        seed,
        deterministic: true,
    }
}

/// Criterion 8: under increasingly biased transitions the regularized
/// reweight run is at least as accurate at every γ and degrades no faster
/// between the endpoints.
#[test]
fn acceptance_08_biased_transition_robustness() {
    let _guard = RUN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let c = Criterion::start(8, "biased-t-robustness", 1800.0);
    let gammas = [0.01, 0.05, 0.10, 0.15];
    let mut base_means = Vec::new();
    let mut vrnl_means = Vec::new();
    for &gamma in &gammas {
        let mut base = 0.0;
        let mut vrnl = 0.0;
        for seed in 0..5u64 {
            base += run_pipeline(&sweep_config(0.0, gamma, seed))
                .unwrap()
                .summary
                .best_test_acc
                / 5.0;
            vrnl += run_pipeline(&sweep_config(0.1, gamma, seed))
                .unwrap()
                .summary
                .best_test_acc
                / 5.0;
        }
        println!("  gamma {gamma}: reweight {base:.4}, reweight regularized {vrnl:.4}");
        assert!(
            vrnl >= base,
            "gamma {gamma}: regularized mean {vrnl} below baseline {base}"
        );
        base_means.push(base);
        vrnl_means.push(vrnl);
    }
    let base_drop = base_means[0] - base_means[3];
    let vrnl_drop = vrnl_means[0] - vrnl_means[3];
    assert!(
        vrnl_drop <= base_drop,
        "regularized run degraded faster: {vrnl_drop} vs {base_drop}"
    );
    c.finish();
}

fn mnist_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("MNIST_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Criterion 9: 10k-example MNIST subset at sym-0.2 with a 784-256-10
/// classifier reaches at least 90% best-checkpoint test accuracy through
/// the full estimation pipeline.
#[test]
fn acceptance_09_mnist_sanity() {
    let _guard = RUN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let c = Criterion::start(9, "mnist-sanity", 900.0);
    let dir = mnist_dir();
    assert!(
        dir.join("train-images-idx3-ubyte").exists(),
        "MNIST files missing from {}; run scripts/fetch_mnist.sh (or set MNIST_DIR)",
        dir.display()
    );
    let cfg = ExperimentConfig {
        data: DataConfig::Mnist {
            dir,
            subsample: 10_000,
        },
        noise: NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: 0.2,
            classes: 10,
            seed: 0,
        },
        risk: RiskSpec::new(Method::Forward, 0.1),
        optimizer: OptimizerConfig::default(),
        hidden: vec![256],
        val_fraction: 0.1,
        warmup_epochs: 20,
        transition_source: TransitionSource::Estimate,
        anchor_percentile: 97.0,
        gamma: 0.0,
        seed: 0,
        deterministic: true,
    }
    .with_seed(0);
    let result = run_pipeline(&cfg).unwrap();
    println!(
        "  best test accuracy {:.4} (estimation error {:?})",
        result.summary.best_test_acc, result.summary.estimation_error
    );
    assert!(
        result.summary.best_test_acc >= 0.90,
        "best test accuracy {:.4} below the 90% floor",
        result.summary.best_test_acc
    );
    assert_eq!(result.outcome.report.rows.len(), 80);
    c.finish();
}

/// Criterion 10: repeating a run with the same seed reproduces the report
/// byte for byte.
#[test]
fn acceptance_10_determinism() {
    let _guard = RUN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let c = Criterion::start(10, "determinism", 300.0);
    let cfg = paired_config(Method::Forward, 0.1, 0.2, 3);
    let a = run_pipeline(&cfg).unwrap();
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(
        a.outcome.report.to_csv(),
        b.outcome.report.to_csv(),
        "reports differ between identical runs"
    );
    assert_eq!(a.outcome.best_model, b.outcome.best_model);

    // The reweight pipeline exercises every stage (warm-up, estimation
    // inputs, factor computation); check it too.
    let cfg = paired_config(Method::Reweight, 0.1, 0.2, 4);
    let a = run_pipeline(&cfg).unwrap();
    let b = run_pipeline(&cfg).unwrap();
    assert_eq!(a.outcome.report.to_csv(), b.outcome.report.to_csv());
    c.finish();
}
