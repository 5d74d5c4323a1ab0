//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with its runtime against the stated bound. Tests serialize on a shared
//! lock so timing-sensitive criteria are not distorted by parallel load.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use falformer::attention::{
    contiguous_landmarks, exact_attention, falsa_landmarks, nystrom_attention, AttentionMode, Pinv,
};
use falformer::bench::{bench_attention_point, loglog_slope, run_approx_error};
use falformer::checkpoint::{load_checkpoint, save_checkpoint};
use falformer::clustering::{kmeans, SegmentAssignment};
use falformer::data::{bag_to_bytes, load_bag, save_bag, synth_generate, FeatureBag, SynthSpec};
use falformer::error::Result;
use falformer::model::ModelConfig;
use falformer::numerics::{
    matmul, pinv_iterative, pinv_oracle, rel_frobenius, softmax_rows, Matrix,
};
use falformer::training::{
    auc_rank, evaluate_threaded, grad_check, history_log, metrics_from_predictions, train,
    Averaging, TrainOptions,
};

static LOCK: Mutex<()> = Mutex::new(());

fn serialized() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn conclude(n: usize, name: &str, started: Instant, bound_s: f64, ok: bool, detail: &str) {
    let elapsed = started.elapsed().as_secs_f64();
    let status = if ok && elapsed < bound_s { "PASS" } else { "FAIL" };
    println!("acceptance criterion {n} ({name}): {status} [{elapsed:.1}s / {bound_s:.0}s] {detail}");
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
    assert!(
        elapsed < bound_s,
        "criterion {n} ({name}) exceeded its runtime bound: {elapsed:.1}s >= {bound_s}s"
    );
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("falformer-acceptance-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// 1. With landmarks covering every token and the oracle pseudoinverse, both
///    approximations reproduce exact attention to 1e-8 relative Frobenius.
#[test]
fn criterion_1_exactness_oracle() {
    let _g = serialized();
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=64);
        let d = 8;
        let q = random_matrix(n, d, &mut rng);
        let k = random_matrix(n, d, &mut rng);
        let v = random_matrix(n, d, &mut rng);
        let exact = exact_attention(&q, &k, &v).unwrap();

        // vanilla route: contiguous landmarks, one per token
        let (ql, kl) = contiguous_landmarks(&q, &k, n).unwrap();
        let (nys, _) = nystrom_attention(&q, &k, &v, &ql, &kl, Pinv::Oracle).unwrap();
        worst = worst.max(rel_frobenius(&nys, &exact));

        // feature-aware route: row 0 as CLS, singleton segments for the rest
        let q_rest = q.slice_rows(1, n - 1);
        let k_rest = k.slice_rows(1, n - 1);
        let assignment = SegmentAssignment::singletons(&q_rest);
        let (ql, kl) = falsa_landmarks(
            &q_rest,
            &k_rest,
            &assignment,
            &q.slice_rows(0, 1),
            &k.slice_rows(0, 1),
        )
        .unwrap();
        let (fal, _) = nystrom_attention(&q, &k, &v, &ql, &kl, Pinv::Oracle).unwrap();
        worst = worst.max(rel_frobenius(&fal, &exact));
    }
    conclude(
        1,
        "exactness oracle",
        started,
        5.0,
        worst <= 1e-8,
        &format!("worst relative error {worst:.2e} over 20 seeds (bound 1e-8)"),
    );
}

/// 2. Six iterations of the iterative pseudoinverse satisfy all four Penrose
///    conditions within 1e-3 relative, cross-checked against the
///    decomposition oracle, on 50 random row-stochastic matrices.
#[test]
fn criterion_2_penrose_suite() {
    let _g = serialized();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for i in 0..50usize {
        let n = 4 + (i * 60) / 49; // sizes spread over 4..=64
        // diagonal boost scaled with ln(n) keeps the softmax matrix
        // well-conditioned at every size (self-similarity regime)
        let boost = 2.0 + (n as f64).ln();
        let logits = Matrix::from_fn(n, n, |r, c| {
            rng.random_range(-1.0..1.0) + if r == c { boost } else { 0.0 }
        });
        let a = softmax_rows(logits, 1.0);
        let z = pinv_iterative(&a, 6).unwrap();
        let residuals = penrose_residuals(&a, &z);
        for r in residuals {
            worst = worst.max(r);
        }
        let z_star = pinv_oracle(&a);
        worst = worst.max(rel_frobenius(&z, &z_star));
    }
    conclude(
        2,
        "penrose suite",
        started,
        10.0,
        worst <= 1e-3,
        &format!("worst residual {worst:.2e} over 50 matrices (bound 1e-3)"),
    );
}

fn penrose_residuals(a: &Matrix, z: &Matrix) -> [f64; 4] {
    let az = matmul(a, z).unwrap();
    let za = matmul(z, a).unwrap();
    let aza = matmul(&az, a).unwrap();
    let zaz = matmul(&za, z).unwrap();
    let rel = |num: f64, den: f64| if den == 0.0 { num } else { num / den };
    [
        rel(aza.sub(a).unwrap().frobenius_norm(), a.frobenius_norm()),
        rel(zaz.sub(z).unwrap().frobenius_norm(), z.frobenius_norm()),
        rel(
            az.sub(&az.transpose()).unwrap().frobenius_norm(),
            az.frobenius_norm(),
        ),
        rel(
            za.sub(&za.transpose()).unwrap().frobenius_norm(),
            za.frobenius_norm(),
        ),
    ]
}

/// 3. Analytic gradients match central finite differences (h = 1e-5) to
///    1e-4 max relative error on the tiny config, exact and falsa modes,
///    with gradient clipping out of the path.
#[test]
fn criterion_3_gradient_check() {
    let _g = serialized();
    let started = Instant::now();
    let tiny = |mode: AttentionMode| ModelConfig {
        d_f: 4,
        d_model: 8,
        layers: 1,
        n_segments: 3,
        heads: 1,
        n_classes: 2,
        attention_mode: mode,
        pinv: Pinv::Iterative { iters: 6 },
        kmeans_seed: 0,
        kmeans_iters: 20,
        recluster_per_layer: false,
        cluster_raw_features: false,
    };
    // grad_check runs backward directly: no clipping anywhere in the path
    let exact_err = grad_check(&tiny(AttentionMode::Exact), 7, 1e-5).unwrap();
    let falsa_err = grad_check(&tiny(AttentionMode::Falsa), 7, 1e-5).unwrap();
    let ok = exact_err <= 1e-4 && falsa_err <= 1e-4;
    conclude(
        3,
        "gradient check",
        started,
        30.0,
        ok,
        &format!("max relative error exact {exact_err:.2e}, falsa {falsa_err:.2e} (bound 1e-4)"),
    );
}

/// 4. On 4-cluster tokens in shuffled order with 4 landmarks, feature-aware
///    landmarks approximate exact attention strictly better (median over 20
///    seeds) than contiguous segments.
#[test]
fn criterion_4_landmark_quality_ablation() {
    let _g = serialized();
    let started = Instant::now();
    // separation 5 sigma, sigma 1, shuffled order, 4 landmarks, 20 seeds
    let records = run_approx_error(64, 8, 4, 5.0, 4, 20, 1.0).unwrap();
    let median_of = |mode: &str| {
        records
            .iter()
            .find(|r| r.mode == mode && r.seed.is_none())
            .map(|r| r.error)
            .unwrap()
    };
    let falsa = median_of("falsa");
    let contiguous = median_of("nystrom");
    conclude(
        4,
        "landmark quality ablation",
        started,
        60.0,
        falsa < contiguous,
        &format!("median error falsa {falsa:.3e} < contiguous {contiguous:.3e}"),
    );
}

/// 5. With 257 landmarks fixed, forward time scales like O(N) for the
///    feature-aware mode (log-log slope <= 1.35) and like O(N^2) for exact
///    attention (slope >= 1.7 up to its cap); peak working memory of the
///    approximation at N = 8192 stays below 10% of the N x N budget.
#[test]
fn criterion_5_complexity_analog() {
    let _g = serialized();
    let started = Instant::now();
    let d = 64;
    let landmarks = 257;
    let repeats = 3;
    let exact_cap = 4096;

    let mut falsa_points = Vec::new();
    let mut falsa_peak_at_max = 0u64;
    for &n in &[1024usize, 2048, 4096, 8192] {
        let rec = bench_attention_point("falsa", n, landmarks, d, repeats, 11).unwrap();
        falsa_points.push((n as f64, rec.median_ms.unwrap()));
        if n == 8192 {
            falsa_peak_at_max = rec.peak_bytes.unwrap();
        }
    }
    let mut exact_points = Vec::new();
    for &n in &[1024usize, 2048, 4096] {
        assert!(n <= exact_cap);
        let rec = bench_attention_point("exact", n, n, d, repeats, 11).unwrap();
        exact_points.push((n as f64, rec.median_ms.unwrap()));
    }
    let falsa_slope = loglog_slope(&falsa_points);
    let exact_slope = loglog_slope(&exact_points);
    let nxn_budget = 8192u64 * 8192 * 8;
    let mem_fraction = falsa_peak_at_max as f64 / nxn_budget as f64;
    let ok = falsa_slope <= 1.35 && exact_slope >= 1.7 && mem_fraction < 0.10;
    conclude(
        5,
        "complexity analog",
        started,
        300.0,
        ok,
        &format!(
            "falsa slope {falsa_slope:.2} (<=1.35), exact slope {exact_slope:.2} (>=1.7), peak mem {:.1}% of NxN budget (<10%)",
            100.0 * mem_fraction
        ),
    );
}

/// 6. End-to-end learning on the separable synthetic task: >= 95% test
///    accuracy and >= 0.98 test AUC with the training protocol defaults
///    (2 layers, RAdam, cross-entropy, 20 epochs, patience 10) at desk-scale
///    capacity; the falsa run lands within 2 accuracy points of exact.
#[test]
fn criterion_6_end_to_end_learning() {
    let _g = serialized();
    let started = Instant::now();
    let spec = SynthSpec {
        bags: [60, 20, 20],
        d_f: 32,
        tokens_min: 64,
        tokens_max: 256,
        n_clusters: 4,
        signal_cluster: 0,
        signal_fraction: 0.2,
        separation: 6.0,
        noise_sigma: 1.0,
    };
    let dataset = synth_generate(&spec, 0).unwrap();
    let run = |mode: AttentionMode| -> Result<(f64, Option<f64>)> {
        let config = ModelConfig {
            d_f: 32,
            d_model: 64,
            layers: 2,
            n_segments: 32,
            heads: 4,
            n_classes: 2,
            attention_mode: mode,
            pinv: Pinv::Iterative { iters: 6 },
            kmeans_seed: 0,
            kmeans_iters: 25,
            recluster_per_layer: false,
            cluster_raw_features: false,
        };
        let opts = TrainOptions {
            lr: 1e-3,
            epochs: 20,
            patience: 10,
            seed: 0,
            clip: Some(5.0),
            weight_decay: 0.0,
            averaging: Averaging::Macro,
        };
        let outcome = train(&dataset.train, &dataset.val, &config, &opts)?;
        let report = evaluate_threaded(&dataset.test, &outcome.params, &config, 1, Averaging::Macro)?;
        Ok((report.acc, report.auc))
    };
    let (falsa_acc, falsa_auc) = run(AttentionMode::Falsa).unwrap();
    let (exact_acc, _) = run(AttentionMode::Exact).unwrap();
    let gap = (falsa_acc - exact_acc).abs();
    let auc = falsa_auc.unwrap_or(0.0);
    let ok = falsa_acc >= 95.0 && auc >= 0.98 && gap <= 2.0;
    conclude(
        6,
        "end-to-end learning",
        started,
        600.0,
        ok,
        &format!(
            "falsa acc {falsa_acc:.2}% (>=95), auc {auc:.3} (>=0.98), exact acc {exact_acc:.2}%, gap {gap:.2} (<=2)"
        ),
    );
}

/// 7. Lloyd iterations never increase WCSS (100 seeded instances), and
///    best-of-5 restarts land within 5% of the exhaustive-partition optimum
///    on small instances.
#[test]
fn criterion_7_kmeans_properties() {
    let _g = serialized();
    let started = Instant::now();
    // monotonicity over 100 instances
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut monotone = true;
    for seed in 0..100u64 {
        let n = 10 + (seed as usize % 30);
        let tokens = random_matrix(n, 3, &mut rng);
        let a = kmeans(&tokens, 4, seed, 50).unwrap();
        for w in a.wcss_history.windows(2) {
            if w[1] > w[0] * (1.0 + 1e-12) + 1e-12 {
                monotone = false;
            }
        }
    }
    // best-of-5 vs exhaustive optimum on blob-structured instances
    let mut within = true;
    let mut worst_ratio: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + trial);
        let n = 8 + (trial as usize % 5); // up to 12
        let k = 2 + (trial as usize % 2); // up to 3
        let tokens = Matrix::from_fn(n, 2, |i, j| {
            let center = if j == 0 { 2.0 * (i % k) as f64 } else { 0.0 };
            center + rng.random_range(-1.0..1.0)
        });
        let opt = exhaustive_best_wcss(&tokens, k);
        let best = (0..5)
            .map(|s| kmeans(&tokens, k, s, 50).unwrap().wcss)
            .fold(f64::INFINITY, f64::min);
        let ratio = best / opt;
        worst_ratio = worst_ratio.max(ratio);
        if best > opt * 1.05 + 1e-12 {
            within = false;
        }
    }
    conclude(
        7,
        "k-means properties",
        started,
        60.0,
        monotone && within,
        &format!("monotone={monotone}, worst best-of-5 / optimum ratio {worst_ratio:.4} (<=1.05)"),
    );
}

fn exhaustive_best_wcss(tokens: &Matrix, k: usize) -> f64 {
    let n = tokens.rows();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    loop {
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        let mut wcss = 0.0;
        for s in 0..k {
            if counts[s] == 0 {
                continue;
            }
            let mut mean = vec![0.0; tokens.cols()];
            for (i, &a) in assign.iter().enumerate() {
                if a == s {
                    for (m, &v) in mean.iter_mut().zip(tokens.row(i)) {
                        *m += v;
                    }
                }
            }
            for m in &mut mean {
                *m /= counts[s] as f64;
            }
            for (i, &a) in assign.iter().enumerate() {
                if a == s {
                    wcss += tokens
                        .row(i)
                        .iter()
                        .zip(&mean)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>();
                }
            }
        }
        best = best.min(wcss);
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            assign[pos] += 1;
            if assign[pos] < k {
                break;
            }
            assign[pos] = 0;
            pos += 1;
        }
    }
}

/// 8. AUC matches brute-force pairwise ranking on 200 random score/label
///    sets within 1e-12; F1 / precision / recall match a recomputation from
///    the returned confusion counts exactly.
#[test]
fn criterion_8_metric_oracles() {
    let _g = serialized();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut worst_auc_diff: f64 = 0.0;
    let mut confusion_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(4..60);
        let quantize = rng.random_range(0..2) == 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if quantize {
                    rng.random_range(0..6) as f64 / 6.0
                } else {
                    rng.random()
                }
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let brute = brute_force_auc(&scores, &labels);
        let fast = auc_rank(&scores, &labels);
        match (fast, brute) {
            (None, None) => {}
            (Some(a), Some(b)) => worst_auc_diff = worst_auc_diff.max((a - b).abs()),
            _ => confusion_ok = false,
        }

        let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s > 0.5)).collect();
        for avg in [Averaging::Macro, Averaging::BinaryPositive] {
            let r = metrics_from_predictions(&labels, &preds, &scores, 2, avg).unwrap();
            // independent recomputation from the confusion counts
            let per_class = |c: usize| {
                let tp = r.confusion[c * 2 + c] as f64;
                let fp = r.confusion[(1 - c) * 2 + c] as f64;
                let fn_ = r.confusion[c * 2 + (1 - c)] as f64;
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                let f1 = if p + rec > 0.0 { 2.0 * p * rec / (p + rec) } else { 0.0 };
                (p, rec, f1)
            };
            let (p, rec, f1) = match avg {
                Averaging::Macro => {
                    let (p0, r0, f0) = per_class(0);
                    let (p1, r1, f1v) = per_class(1);
                    ((p0 + p1) / 2.0, (r0 + r1) / 2.0, (f0 + f1v) / 2.0)
                }
                Averaging::BinaryPositive => per_class(1),
            };
            if r.precision != p || r.recall != rec || r.f1 != f1 {
                confusion_ok = false;
            }
            let acc_from_confusion =
                100.0 * (r.confusion[0] + r.confusion[3]) as f64 / n as f64;
            if r.acc != acc_from_confusion {
                confusion_ok = false;
            }
        }
    }
    conclude(
        8,
        "metric oracles",
        started,
        60.0,
        worst_auc_diff <= 1e-12 && confusion_ok,
        &format!("worst AUC deviation {worst_auc_diff:.2e} (<=1e-12), confusion recomputation exact: {confusion_ok}"),
    );
}

fn brute_force_auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &p in &pos {
        for &n in &neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(total / (pos.len() * neg.len()) as f64)
}

/// 9. Same seed reproduces the training history byte for byte; checkpoint
///    and bag round-trips are bit-exact.
#[test]
fn criterion_9_determinism_and_round_trips() {
    let _g = serialized();
    let started = Instant::now();
    let dir = tmpdir("determinism");

    // seeded training history
    let spec = SynthSpec {
        bags: [8, 4, 0],
        d_f: 4,
        tokens_min: 6,
        tokens_max: 12,
        n_clusters: 3,
        signal_cluster: 0,
        signal_fraction: 0.5,
        separation: 5.0,
        noise_sigma: 0.5,
    };
    let dataset = synth_generate(&spec, 1).unwrap();
    let config = ModelConfig {
        d_f: 4,
        d_model: 8,
        layers: 1,
        n_segments: 3,
        heads: 1,
        n_classes: 2,
        attention_mode: AttentionMode::Falsa,
        pinv: Pinv::Iterative { iters: 6 },
        kmeans_seed: 0,
        kmeans_iters: 20,
        recluster_per_layer: false,
        cluster_raw_features: false,
    };
    let opts = TrainOptions {
        epochs: 3,
        lr: 1e-3,
        seed: 42,
        ..TrainOptions::default()
    };
    let a = train(&dataset.train, &dataset.val, &config, &opts).unwrap();
    let b = train(&dataset.train, &dataset.val, &config, &opts).unwrap();
    let history_identical = history_log(&a.history) == history_log(&b.history);

    // checkpoint round trip, including optimizer state
    let ckpt = dir.join("model.falc");
    save_checkpoint(&a.params, &config, Some(&a.opt_state), &ckpt).unwrap();
    let (loaded, loaded_config, loaded_state) = load_checkpoint(&ckpt).unwrap();
    let ckpt2 = dir.join("model2.falc");
    save_checkpoint(&loaded, &loaded_config, loaded_state.as_ref(), &ckpt2).unwrap();
    let checkpoint_identical = std::fs::read(&ckpt).unwrap() == std::fs::read(&ckpt2).unwrap();

    // bag round trip
    let bag = FeatureBag {
        id: "rt-bag".into(),
        tokens: Matrix::from_fn(9, 5, |i, j| ((i * 31 + j * 7) as f64).sin()),
        label: 1,
    };
    let bag_path = dir.join("bag.falb");
    save_bag(&bag, &bag_path).unwrap();
    let loaded_bag = load_bag(&bag_path).unwrap();
    let bag_identical = bag_to_bytes(&loaded_bag) == std::fs::read(&bag_path).unwrap();

    let ok = history_identical && checkpoint_identical && bag_identical;
    conclude(
        9,
        "determinism and round-trips",
        started,
        60.0,
        ok,
        &format!("history={history_identical}, checkpoint={checkpoint_identical}, bag={bag_identical}"),
    );
}
