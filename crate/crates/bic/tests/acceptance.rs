//! End-to-end acceptance suite. Each test prints a single PASS/FAIL line
//! (visible with `--nocapture`) and asserts the same condition.
//!
//! The expensive benchmark — a 10-class, 128-dimensional synthetic digit
//! corpus learned in 5 increments of 2 classes — is run once per
//! variant/seed pair and shared across all the tests that inspect it.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use bic::bias::{
    apply_bias, fit_bias_on_logits, grid_search_bias, mean_bias_loss, BiasFitConfig, BiasParams,
};
use bic::data::{load_idx, write_idx, ClassSchedule, Dataset, LabeledSample};
use bic::exemplar::{select_herding, ExemplarStore, SelectionStrategy};
use bic::losses::{bias_loss, cls_loss, combined_loss, distill_loss, lambda_for};
use bic::matrix::DenseMatrix;
use bic::nn::NetworkModel;
use bic::pipeline::{run_variant, TrainConfig, Variant};
use bic::report::{emit_report, new_class_bias_ratio, RunReport};

fn verdict(name: &str, ok: bool) {
    println!("{name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}");
}

// ---------------------------------------------------------------------------
// Shared benchmark corpus and runs
// ---------------------------------------------------------------------------

const CLASSES: usize = 10;
const STEPS: usize = 5;
const MODES: usize = 8;
const DIM: usize = 128;
const NOISE: f64 = 0.25;
const TRAIN_PER_CLASS: usize = 500;
const TEST_PER_CLASS: usize = 100;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Synthetic digit-style corpus: every class is a mixture of `MODES`
/// prototype "writing styles" with Gaussian pixel noise, quantized to
/// bytes. High dimensionality keeps a handful of stored exemplars from
/// summarizing a class, which is the regime incremental learning targets.
fn generate_samples(per_class: usize, noise_seed: u64, id_base: u64) -> Vec<LabeledSample> {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(0xACCE_5500);
    let protos: Vec<Vec<Vec<f64>>> = (0..CLASSES)
        .map(|_| {
            (0..MODES)
                .map(|_| (0..DIM).map(|_| proto_rng.gen_range(0.2..0.8)).collect())
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, NOISE).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut out = Vec::new();
    let mut id = id_base;
    for (c, class_protos) in protos.iter().enumerate() {
        for i in 0..per_class {
            let p = &class_protos[i % MODES];
            let features = p
                .iter()
                .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            out.push(LabeledSample { features, label: c, id });
            id += 1;
        }
    }
    out
}

struct Bench {
    dataset: Dataset,
    _dir: tempfile::TempDir,
}

static BENCH: LazyLock<Bench> = LazyLock::new(|| {
    let dir = tempfile::tempdir().expect("tempdir");
    let train = generate_samples(TRAIN_PER_CLASS, 1, 0);
    let test = generate_samples(TEST_PER_CLASS, 2, train.len() as u64);
    let ti = dir.path().join("train-images");
    let tl = dir.path().join("train-labels");
    let si = dir.path().join("test-images");
    let sl = dir.path().join("test-labels");
    write_idx(&train, &ti, &tl).expect("write train idx");
    write_idx(&test, &si, &sl).expect("write test idx");
    let train = load_idx(&ti, &tl, 0).expect("read train idx");
    let base = train.len() as u64;
    let test = load_idx(&si, &sl, base).expect("read test idx");
    let dataset = Dataset::from_parts(train, test).expect("dataset");
    Bench { dataset, _dir: dir }
});

fn desk_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        seed,
        ..TrainConfig::default()
    }
}

fn schedule_for(seed: u64) -> ClassSchedule {
    ClassSchedule::random(CLASSES, STEPS, seed).expect("schedule")
}

struct DeskRuns {
    /// (variant name, seed) -> report.
    reports: BTreeMap<(&'static str, u64), RunReport>,
    checkpoints: tempfile::TempDir,
    elapsed: Duration,
}

static DESK: LazyLock<DeskRuns> = LazyLock::new(|| {
    let bench = &*BENCH;
    let checkpoints = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let mut reports = BTreeMap::new();
    for &seed in &SEEDS {
        let sched = schedule_for(seed);
        for variant in Variant::ALL {
            let cfg = desk_config(variant, seed);
            let dir = checkpoints.path().join(format!("{}_{}", variant.name(), seed));
            std::fs::create_dir_all(&dir).expect("checkpoint dir");
            let report =
                run_variant(&bench.dataset, &sched, &cfg, Some(&dir)).expect("benchmark run");
            reports.insert((variant.name(), seed), report);
        }
    }
    DeskRuns {
        reports,
        checkpoints,
        elapsed: start.elapsed(),
    }
});

/// Final accuracy of a bias-corrected run with a non-default split ratio.
static RATIO_SWEEP: LazyLock<BTreeMap<((usize, usize), u64), f64>> = LazyLock::new(|| {
    let bench = &*BENCH;
    let mut out = BTreeMap::new();
    for &seed in &SEEDS {
        let sched = schedule_for(seed);
        for ratio in [(9, 1), (8, 2), (7, 3), (6, 4)] {
            let acc = if ratio == (9, 1) {
                DESK.reports[&("bic", seed)].final_accuracy().unwrap()
            } else {
                let cfg = TrainConfig {
                    split_ratio: ratio,
                    ..desk_config(Variant::Bic, seed)
                };
                run_variant(&bench.dataset, &sched, &cfg, None)
                    .expect("ratio run")
                    .final_accuracy()
                    .unwrap()
            };
            out.insert((ratio, seed), acc);
        }
    }
    out
});

static RANDOM_SELECTION: LazyLock<BTreeMap<u64, f64>> = LazyLock::new(|| {
    let bench = &*BENCH;
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                selection: SelectionStrategy::Random,
                ..desk_config(Variant::Bic, seed)
            };
            let acc = run_variant(&bench.dataset, &schedule_for(seed), &cfg, None)
                .expect("random-selection run")
                .final_accuracy()
                .unwrap();
            (seed, acc)
        })
        .collect()
});

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients match central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn t01_loss_and_layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let start = Instant::now();

    for trial in 0..50 {
        let n = rng.gen_range(2..5);
        let m = rng.gen_range(1..4);
        let teacher: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits: Vec<f64> = (0..n + m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let label = rng.gen_range(0..n + m);
        let temperature = 2.0;
        let lambda = n as f64 / (n + m) as f64;

        // Distillation loss over the old-class slice.
        let d = distill_loss(&teacher, &logits[..n], temperature).unwrap();
        for j in 0..n {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (distill_loss(&teacher, &up[..n], temperature).unwrap().value
                - distill_loss(&teacher, &dn[..n], temperature).unwrap().value)
                / (2.0 * h);
            worst = worst.max(rel_err(fd, d.grad_logits[j]));
        }

        // Classification loss over all logits.
        let c = cls_loss(&logits, label).unwrap();
        for j in 0..n + m {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (cls_loss(&up, label).unwrap().value - cls_loss(&dn, label).unwrap().value)
                / (2.0 * h);
            worst = worst.max(rel_err(fd, c.grad_logits[j]));
        }

        // Combined loss.
        let comb = combined_loss(&d, &c, lambda).unwrap();
        for j in 0..n + m {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[j] += h;
            dn[j] -= h;
            let at = |l: &[f64]| {
                let d = distill_loss(&teacher, &l[..n], temperature).unwrap();
                let c = cls_loss(l, label).unwrap();
                combined_loss(&d, &c, lambda).unwrap().value
            };
            let fd = (at(&up) - at(&dn)) / (2.0 * h);
            worst = worst.max(rel_err(fd, comb.grad_logits[j]));
        }

        // Bias-corrected classification loss at the corrected logits.
        let b = bias_loss(&logits, label).unwrap();
        for j in 0..n + m {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (bias_loss(&up, label).unwrap().value
                - bias_loss(&dn, label).unwrap().value)
                / (2.0 * h);
            worst = worst.max(rel_err(fd, b.grad_logits[j]));
        }

        // Every layer of a small network, against a scalar made from the
        // same classification loss.
        let input_dim = rng.gen_range(2..4);
        let out_dim = rng.gen_range(2..4);
        let mut model =
            NetworkModel::new(input_dim, &[rng.gen_range(2..4)], out_dim, &mut rng).unwrap();
        let batch = 3;
        let rows: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let inputs = DenseMatrix::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..out_dim)).collect();
        let scalar = |model: &NetworkModel| -> f64 {
            let logits = model.forward(&inputs).unwrap();
            (0..batch)
                .map(|r| cls_loss(logits.row(r), labels[r]).unwrap().value)
                .sum()
        };
        let (logits, cache) = model.forward_cached(&inputs).unwrap();
        let mut grad = DenseMatrix::zeros(batch, out_dim);
        for r in 0..batch {
            let g = cls_loss(logits.row(r), labels[r]).unwrap().grad_logits;
            for (j, v) in g.into_iter().enumerate() {
                grad.set(r, j, v);
            }
        }
        let analytic = model.backward(&cache, &grad).unwrap();
        for li in 0..model.layers().len() {
            let (rows_w, cols_w) = {
                let w = &model.layers()[li].weights;
                (w.rows(), w.cols())
            };
            // Sample a few weight entries per layer to keep the trial cheap.
            for _ in 0..4 {
                let r = rng.gen_range(0..rows_w);
                let cidx = rng.gen_range(0..cols_w);
                let orig = model.layers()[li].weights.get(r, cidx);
                model.layers_mut()[li].weights.set(r, cidx, orig + h);
                let up = scalar(&model);
                model.layers_mut()[li].weights.set(r, cidx, orig - h);
                let dn = scalar(&model);
                model.layers_mut()[li].weights.set(r, cidx, orig);
                let fd = (up - dn) / (2.0 * h);
                worst = worst.max(rel_err(fd, analytic.layers[li].weights.get(r, cidx)));
            }
            let bi = rng.gen_range(0..model.layers()[li].biases.len());
            let orig = model.layers()[li].biases[bi];
            model.layers_mut()[li].biases[bi] = orig + h;
            let up = scalar(&model);
            model.layers_mut()[li].biases[bi] = orig - h;
            let dn = scalar(&model);
            model.layers_mut()[li].biases[bi] = orig;
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic.layers[li].biases[bi]));
        }
        let _ = trial;
    }

    let ok = worst < 1e-5 && start.elapsed() < Duration::from_secs(10);
    verdict(
        &format!("loss and layer gradients match finite differences (worst rel err {worst:.2e})"),
        ok,
    );
}

// ---------------------------------------------------------------------------
// 2. apply_bias matches the piecewise formula exactly.
// ---------------------------------------------------------------------------

#[test]
fn t02_bias_application_matches_piecewise_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..6);
        let m = rng.gen_range(1..6);
        let logits: Vec<f64> = (0..n + m).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let alpha = rng.gen_range(-2.0..2.0);
        let beta = rng.gen_range(-5.0..5.0);
        let params = BiasParams { alpha, beta, new_class_range: (n, n + m) };
        let got = apply_bias(&logits, n, &params).unwrap();
        for (k, &o) in logits.iter().enumerate() {
            let want = if k < n { o } else { alpha * o + beta };
            ok &= got[k] == want;
        }
        let id = apply_bias(&logits, n, &BiasParams::identity(n, m)).unwrap();
        ok &= id == logits;
    }
    verdict("new-class logit correction matches the piecewise formula", ok);
}

// ---------------------------------------------------------------------------
// 3. Loss-mixing coefficient equals n/(n+m) exactly.
// ---------------------------------------------------------------------------

#[test]
fn t03_loss_mixing_coefficient_is_exact() {
    let mut ok = true;
    for m in 1..20usize {
        ok &= lambda_for(0, m).unwrap() == 0.0;
        for n in 0..50usize {
            ok &= lambda_for(n, m).unwrap() == n as f64 / (n + m) as f64;
        }
    }
    verdict("distillation weight equals old/(old+new), zero at the first step", ok);
}

// ---------------------------------------------------------------------------
// 4. Herding equals exhaustive greedy on small sets; prefixes agree.
// ---------------------------------------------------------------------------

/// Naive reference: at each round, recompute the chosen-set mean from
/// scratch for every remaining candidate and keep the argmin (lowest index
/// on ties).
fn naive_greedy(features: &[Vec<f64>], count: usize) -> Vec<usize> {
    let dim = features[0].len();
    let n = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < count.min(n) {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let mut dist = 0.0;
            for d in 0..dim {
                let mut s = features[i][d];
                for &c in &chosen {
                    s += features[c][d];
                }
                let diff = mean[d] - s / (chosen.len() + 1) as f64;
                dist += diff * diff;
            }
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

#[test]
fn t04_herding_matches_exhaustive_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut ok = true;
    for _ in 0..100 {
        let size = rng.gen_range(1..=8);
        let dim = rng.gen_range(1..=4);
        let features: Vec<Vec<f64>> = (0..size)
            .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let full = select_herding(&features, size).unwrap();
        ok &= full == naive_greedy(&features, size);
        for k in 0..=size {
            ok &= select_herding(&features, k).unwrap() == full[..k];
        }
    }
    verdict("mean-matching selection equals exhaustive greedy and is prefix-stable", ok);
}

// ---------------------------------------------------------------------------
// 5. Gradient fit never loses to a dense grid search by more than 1e-3.
// ---------------------------------------------------------------------------

#[test]
fn t05_bias_fit_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut ok = true;
    let mut worst_gap: f64 = f64::NEG_INFINITY;
    for _ in 0..20 {
        let n = rng.gen_range(2..5);
        let m = rng.gen_range(1..4);
        let samples = 40;
        let rows: Vec<Vec<f64>> = (0..samples)
            .map(|_| (0..n + m).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..samples).map(|i| i % (n + m)).collect();
        let logits = DenseMatrix::from_rows(&rows).unwrap();
        let fitted =
            fit_bias_on_logits(&logits, &labels, n, m, &BiasFitConfig::default()).unwrap();
        let grid =
            grid_search_bias(&logits, &labels, n, m, (0.0, 2.0), (-5.0, 5.0), 201).unwrap();
        let at_fit = mean_bias_loss(&logits, &labels, n, &fitted).unwrap();
        let at_grid = mean_bias_loss(&logits, &labels, n, &grid).unwrap();
        worst_gap = worst_gap.max(at_fit - at_grid);
        ok &= at_fit <= at_grid + 1e-3;
    }
    verdict(
        &format!("gradient bias fit matches a 201x201 grid search (worst gap {worst_gap:.2e})"),
        ok,
    );
}

// ---------------------------------------------------------------------------
// 6. Variant ordering and the correction's margin on the benchmark.
// ---------------------------------------------------------------------------

#[test]
fn t06_variant_ordering_on_benchmark() {
    let desk = &*DESK;
    let mut ordered = 0;
    let mut gaps = Vec::new();
    for &seed in &SEEDS {
        let acc = |v: &str| desk.reports[&(v, seed)].final_accuracy().unwrap();
        let (b1, b2, bic) = (acc("baseline1"), acc("baseline2"), acc("bic"));
        let (fc, joint) = (acc("fc_retrain_ub"), acc("joint_ub"));
        if b1 <= b2 && b2 < bic && bic <= fc && fc <= joint {
            ordered += 1;
        }
        gaps.push(bic - b2);
        println!(
            "  seed {seed}: baseline1 {b1:.3} baseline2 {b2:.3} bic {bic:.3} \
             fc_retrain_ub {fc:.3} joint_ub {joint:.3}"
        );
    }
    let gap_median = median(gaps);
    let in_time = desk.elapsed < Duration::from_secs(600);
    println!(
        "  ordering held in {ordered}/5 seeds, median correction gain {:.1} points, \
         runtime {:.0?}",
        gap_median * 100.0,
        desk.elapsed
    );
    verdict(
        "variant accuracies are ordered and bias correction gains >= 5 points",
        ordered >= 4 && gap_median >= 0.05 && in_time,
    );
}

// ---------------------------------------------------------------------------
// 7. The correction shrinks the old-to-new confusion mass.
// ---------------------------------------------------------------------------

#[test]
fn t07_correction_reduces_new_class_confusion() {
    let desk = &*DESK;
    let n = CLASSES - CLASSES / STEPS;
    let m = CLASSES / STEPS;
    let mut better = 0;
    for &seed in &SEEDS {
        let ratio = |v: &str| {
            let report = &desk.reports[&(v, seed)];
            new_class_bias_ratio(&report.steps.last().unwrap().confusion, n, m).unwrap()
        };
        if ratio("bic") < ratio("baseline2") {
            better += 1;
        }
    }
    verdict(
        &format!("corrected model leaks less old-class mass to new classes ({better}/5 seeds)"),
        better >= 4,
    );
}

// ---------------------------------------------------------------------------
// 8. Validation split sweep: 9:1 leads (or ties within a point).
// ---------------------------------------------------------------------------

#[test]
fn t08_split_ratio_sweep_favors_nine_to_one() {
    let sweep = &*RATIO_SWEEP;
    let ratios = [(9, 1), (8, 2), (7, 3), (6, 4)];
    let complete = ratios
        .iter()
        .all(|&r| SEEDS.iter().all(|&s| sweep.contains_key(&(r, s))));
    let med = |r: (usize, usize)| median(SEEDS.iter().map(|&s| sweep[&(r, s)]).collect());
    let best = ratios.iter().map(|&r| med(r)).fold(f64::NEG_INFINITY, f64::max);
    let nine = med((9, 1));
    for &r in &ratios {
        println!("  split {}:{} median final accuracy {:.3}", r.0, r.1, med(r));
    }
    verdict(
        "9:1 train/validation split is best or within one point of best",
        complete && nine >= best - 0.01,
    );
}

// ---------------------------------------------------------------------------
// 9. Selection strategy changes the result by at most 3 points.
// ---------------------------------------------------------------------------

#[test]
fn t09_selection_strategy_is_insensitive() {
    let herding = median(
        SEEDS
            .iter()
            .map(|&s| DESK.reports[&("bic", s)].final_accuracy().unwrap())
            .collect(),
    );
    let random = median(SEEDS.iter().map(|&s| RANDOM_SELECTION[&s]).collect());
    verdict(
        &format!(
            "herding vs random exemplar selection within 3 points \
             (medians {herding:.3} / {random:.3})"
        ),
        (herding - random).abs() <= 0.03,
    );
}

// ---------------------------------------------------------------------------
// 10. Exemplar budget and balance hold after every increment.
// ---------------------------------------------------------------------------

#[test]
fn t10_exemplar_store_invariants_hold_every_step() {
    let desk = &*DESK;
    let budget = TrainConfig::default().exemplar_budget;
    let mut ok = true;
    for ((variant, seed), _) in &desk.reports {
        let dir: &Path = &desk.checkpoints.path().join(format!("{variant}_{seed}"));
        for step in 0..STEPS {
            let manifest =
                ExemplarStore::read_manifest(&dir.join(format!("store_step{step}.bin")))
                    .expect("stored manifest");
            let counts: Vec<usize> = manifest.iter().map(|(_, ids)| ids.len()).collect();
            let total: usize = counts.iter().sum();
            let min = counts.iter().min().copied().unwrap_or(0);
            let max = counts.iter().max().copied().unwrap_or(0);
            ok &= total <= budget && max - min <= 1;
            ok &= manifest.len() == (step + 1) * (CLASSES / STEPS);
        }
    }
    verdict("exemplar totals stay within budget and classes within one sample", ok);
}

// ---------------------------------------------------------------------------
// 11. Identical configuration and seed reproduce summary.json byte for byte.
// ---------------------------------------------------------------------------

#[test]
fn t11_identical_runs_are_byte_identical() {
    let dataset = bic::data::make_blob_dataset(4, 40, 10, 8, 0.2, 7).unwrap();
    let sched = ClassSchedule::random(4, 2, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        lr_decay_epochs: vec![3],
        seed: 7,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        std::fs::create_dir_all(&out).unwrap();
        let report = run_variant(&dataset, &sched, &cfg, None).unwrap();
        emit_report(&report, &out).unwrap();
        bytes.push(std::fs::read(out.join("summary.json")).unwrap());
    }
    verdict(
        "repeated identical runs write byte-identical summary.json",
        bytes[0] == bytes[1],
    );
}
