//! Acceptance gate. Prints one line per criterion and exits nonzero if any
//! fails. The end-to-end criteria share one default pipeline run (seed 1)
//! plus an identical rerun for the determinism check.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;

use dapper_core::eval::{similarity, EstimationTrace};
use dapper_core::features::{
    global_diversity, individual_uncertainty, mutual_info_estimate, prediction_distribution, PredictionMatrix,
};
use dapper_core::kernel::{Graph, ParamStore, Tensor, Var};
use dapper_core::pipeline::{self, EvalOutcome, RunConfig, RunDir, PRIMARY_ESTIMATOR};
use dapper_core::rng::{stream, Rng};

const GRAD_SEEDS: u64 = 100;
const GRAD_TOL: f64 = 1e-4;
const FEATURE_MATRICES: usize = 10_000;
const HEADLINE_BUDGET: Duration = Duration::from_secs(45 * 60);
const ABLATION_BAND: f64 = 1.0;

type Check = Result<String, String>;

fn pass_if(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- kernel gradients ----

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks are never straddled by the
/// finite-difference step.
fn off_zero_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Largest relative error between the analytic gradient of
/// `sum(build(leaves) * r)` and central differences, scaled by `scale` (the
/// analytic gradient is compared with `scale * numeric`).
fn grad_error(rng: &mut Rng, leaves: &[Tensor], scale: f64, build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let vs: Vec<Var> = leaves.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vs);
        g.shape(y).to_vec()
    };
    let r = rand_tensor(rng, &probe);
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vs);
        g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let vs: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &vs);
    let rv = g.input(r.clone());
    let p = g.mul(y, rv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss, &mut store).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (li, v) in vs.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaves[li].len()]);
        let numeric: Vec<f64> = (0..leaves[li].len())
            .map(|i| {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[i] += h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[i] -= h;
                scale * (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

fn layer_suite(name: &str, case: &dyn Fn(&mut Rng) -> f64) -> (String, f64) {
    let worst = (0..GRAD_SEEDS)
        .map(|s| case(&mut stream(s, &[name.len() as u64, 0x67_72_61_64])))
        .fold(0.0f64, f64::max);
    (name.to_string(), worst)
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let suites = [
        layer_suite("dense", &|rng| {
            let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
            let leaves = [rand_tensor(rng, &[n, i]), rand_tensor(rng, &[i, o]), rand_tensor(rng, &[o])];
            grad_error(rng, &leaves, 1.0, &|g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                g.add_bias(y, v[2]).unwrap()
            })
        }),
        layer_suite("conv1d", &|rng| {
            let (n, c, o, k) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..5),
            );
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..k);
            let len = k + rng.random_range(0..8);
            let leaves = [rand_tensor(rng, &[n, c, len]), rand_tensor(rng, &[o, c, k]), rand_tensor(rng, &[o])];
            grad_error(rng, &leaves, 1.0, &|g, v| g.conv1d(v[0], v[1], v[2], stride, pad).unwrap())
        }),
        layer_suite("batchnorm", &|rng| {
            let (n, c, l) = (rng.random_range(2..6), rng.random_range(1..4), rng.random_range(1..4));
            let leaves = [rand_tensor(rng, &[n, c, l]), rand_tensor(rng, &[c]), rand_tensor(rng, &[c])];
            grad_error(rng, &leaves, 1.0, &|g, v| g.batch_norm(v[0], v[1], v[2], None, 1e-5).unwrap().0)
        }),
        layer_suite("relu", &|rng| {
            let shape = [rng.random_range(1..5), rng.random_range(1..7)];
            let leaves = [off_zero_tensor(rng, &shape)];
            grad_error(rng, &leaves, 1.0, &|g, v| g.relu(v[0]))
        }),
        layer_suite("softmax+log", &|rng| {
            let shape = [rng.random_range(1..5), rng.random_range(2..7)];
            let leaves = [rand_tensor(rng, &shape)];
            let a = grad_error(rng, &leaves, 1.0, &|g, v| g.log_softmax(v[0]).unwrap());
            let b = grad_error(rng, &leaves, 1.0, &|g, v| {
                let s = g.softmax(v[0]).unwrap();
                g.log(s)
            });
            a.max(b)
        }),
        layer_suite("lstm_cell", &|rng| {
            let (b, i, h) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
            let leaves = [
                rand_tensor(rng, &[b, i]),
                rand_tensor(rng, &[b, h]),
                rand_tensor(rng, &[b, h]),
                rand_tensor(rng, &[4 * h, i]),
                rand_tensor(rng, &[4 * h, h]),
                rand_tensor(rng, &[4 * h]),
            ];
            grad_error(rng, &leaves, 1.0, &|g, v| g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap())
        }),
        layer_suite("grad_reversal", &|rng| {
            let shape = [rng.random_range(1..5), rng.random_range(1..6)];
            let lambda = rng.random_range(0.0..2.0);
            let x = rand_tensor(rng, &shape);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = g.grad_reversal(xv, lambda);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if bits(g.value(y)) != bits(&x) {
                return f64::INFINITY;
            }
            // Forward differences see the identity; the backward pass must
            // scale them by exactly -lambda.
            grad_error(rng, &[x], -lambda, &|g, v| {
                let t = g.tanh(v[0]);
                g.grad_reversal(t, lambda)
            })
        }),
    ];
    let elapsed = start.elapsed();
    let worst = suites.iter().map(|s| s.1).fold(0.0f64, f64::max);
    let detail = suites
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    pass_if(
        worst < GRAD_TOL && elapsed < Duration::from_secs(60),
        format!("max rel err over {GRAD_SEEDS} seeds: {detail}; {:.1}s", elapsed.as_secs_f64()),
    )
}

// ---- features ----

fn random_matrix(rng: &mut Rng) -> PredictionMatrix {
    let rows = rng.random_range(1..40);
    let k = rng.random_range(2..10);
    // Mix gentle, peaked and exactly one-hot rows.
    let temp = [0.3, 1.0, 5.0, 40.0][rng.random_range(0..4)];
    let mut probs = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        if rng.random_bool(0.1) {
            let hot = rng.random_range(0..k);
            probs.extend((0..k).map(|c| if c == hot { 1.0 } else { 0.0 }));
            continue;
        }
        let logits: Vec<f64> = (0..k).map(|_| temp * rng.random_range(-1.0..1.0)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        probs.extend(e.iter().map(|v| v / s));
    }
    PredictionMatrix::new(rows, k, probs).unwrap()
}

fn brute_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        h -= v * v.max(1e-12).ln();
    }
    h
}

fn brute_pd(m: &PredictionMatrix) -> Vec<f64> {
    let mut pd = vec![0.0; m.classes()];
    for i in 0..m.rows() {
        for c in 0..m.classes() {
            pd[c] += m.row(i)[c];
        }
    }
    pd.iter().map(|v| v / m.rows() as f64).collect()
}

fn criterion_features() -> Check {
    let start = Instant::now();
    let mut rng = stream(2, &[]);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for _ in 0..FEATURE_MATRICES {
        let m = random_matrix(&mut rng);
        let k = m.classes() as f64;
        let pd = prediction_distribution(&m).unwrap();
        let gd = global_diversity(&m).unwrap();
        let iu = individual_uncertainty(&m).unwrap();
        let mi = mutual_info_estimate(&m).unwrap();

        let want_pd = brute_pd(&m);
        let want_gd = brute_entropy(&want_pd);
        let want_iu = (0..m.rows()).map(|i| brute_entropy(m.row(i))).sum::<f64>() / m.rows() as f64;
        for (a, b) in pd.iter().zip(&want_pd) {
            worst = worst.max((a - b).abs());
        }
        worst = worst
            .max((gd - want_gd).abs())
            .max((iu - want_iu).abs())
            .max((mi - (want_gd - want_iu)).abs());

        let in_range = |v: f64| (0.0..=k.ln() + 1e-12).contains(&v);
        if !in_range(gd) || !in_range(iu) || mi < -1e-9 || (pd.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            violations += 1;
        }
    }
    let elapsed = start.elapsed();
    pass_if(
        worst <= 1e-12 && violations == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{FEATURE_MATRICES} matrices, max oracle diff {worst:.1e}, {violations} bound violations, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---- similarity ----

fn criterion_similarity(outcome: &EvalOutcome, run: &RunDir) -> Check {
    let mut rng = stream(3, &[]);
    let mut worst = 0.0f64;
    let mut self_ok = true;
    for _ in 0..10_000 {
        let len = rng.random_range(1..40);
        let truth: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let est: Vec<f64> = (0..len).map(|_| rng.random_range(-1.5..1.5)).collect();
        let got = similarity(&EstimationTrace::new("t", truth.clone()), &EstimationTrace::new("e", est.clone()))
            .unwrap()
            .value;
        let mut total = 0.0;
        let mut count = 0;
        for e in 1..len {
            total += (truth[e] - est[e].clamp(-1.0, 1.0)).abs();
            count += 1;
        }
        let want = if count == 0 { 1.0 } else { 1.0 - total / count as f64 };
        worst = worst.max((got - want).abs());
        let t = EstimationTrace::new("t", truth);
        self_ok &= similarity(&t, &t).unwrap().value == 1.0;
    }
    let tgt = outcome.report.summary.method("TgtLabel").and_then(|m| m.mean);
    let csv = std::fs::read_to_string(run.eval_dir().join("similarity.csv")).unwrap_or_default();
    let row_ok = csv
        .lines()
        .any(|l| l.split(',').take(4).eq(["TgtLabel", "all", "all", "100.0000"]));
    pass_if(
        worst <= 1e-15 && self_ok && tgt == Some(100.0) && row_ok,
        format!("oracle diff {worst:.1e}, self-similarity exact: {self_ok}, TgtLabel mean {tgt:?}, report row present: {row_ok}"),
    )
}

// ---- end-to-end ----

fn headline_run(dir: &Path) -> (EvalOutcome, Duration) {
    if dir.exists() {
        std::fs::remove_dir_all(dir).unwrap();
    }
    std::fs::create_dir_all(dir).unwrap();
    let cfg = RunConfig {
        seed: 1,
        ..RunConfig::default()
    }
    .resolved();
    let start = Instant::now();
    let out = pipeline::run_all(&cfg, &RunDir::new(dir)).expect("headline pipeline");
    (out, start.elapsed())
}

fn criterion_mi(outcome: &EvalOutcome) -> Check {
    let mi = &outcome.mi;
    pass_if(
        mi.points >= 200 && mi.pearson > 0.3,
        format!(
            "pearson {:.3} over {} epochs of {} simulated episodes",
            mi.pearson, mi.points, mi.episodes
        ),
    )
}

fn mean_of(outcome: &EvalOutcome, method: &str) -> f64 {
    outcome
        .report
        .summary
        .method(method)
        .and_then(|m| m.mean)
        .unwrap_or(f64::NEG_INFINITY)
}

fn criterion_headline(outcome: &EvalOutcome, elapsed: Duration) -> Check {
    let s = &outcome.report.summary;
    let (d, soft, src) = (
        mean_of(outcome, PRIMARY_ESTIMATOR),
        mean_of(outcome, "SoftmaxScore"),
        mean_of(outcome, "SrcLabel"),
    );
    let per = |m: &str| s.method(m).map(|m| m.per_algorithm.clone()).unwrap_or_default();
    let (pd, ps, pr) = (per(PRIMARY_ESTIMATOR), per("SoftmaxScore"), per("SrcLabel"));
    let groups: BTreeMap<&String, bool> = pd
        .iter()
        .map(|(alg, v)| {
            let best = ps.get(alg).copied().unwrap_or(f64::NEG_INFINITY).max(pr.get(alg).copied().unwrap_or(f64::NEG_INFINITY));
            (alg, *v > best)
        })
        .collect();
    let wins = groups.values().filter(|w| **w).count();
    let group_text = pd
        .iter()
        .map(|(alg, v)| {
            format!(
                "{alg} {v:.1}/{:.1}/{:.1}",
                ps.get(alg).copied().unwrap_or(f64::NAN),
                pr.get(alg).copied().unwrap_or(f64::NAN)
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    pass_if(
        d > soft && d > src && wins >= 3 && groups.len() == 4 && s.failed_runs == 0 && elapsed < HEADLINE_BUDGET,
        format!(
            "{PRIMARY_ESTIMATOR} {d:.2} vs SoftmaxScore {soft:.2} vs SrcLabel {src:.2}; wins {wins}/{} groups ({group_text}); {} runs, {:.1} min",
            groups.len(),
            s.runs,
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn criterion_degradation(outcome: &EvalOutcome) -> Check {
    let t = &outcome.degradation.test_episodes;
    let r = &outcome.degradation.evaluation_runs;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", v));
    pass_if(
        t.cases > 0 && t.estimator_sign_agreement.is_some_and(|a| a >= 0.7),
        format!(
            "held-out simulated runs with true change < {}: {} cases, {PRIMARY_ESTIMATOR} agreement {}, SoftmaxScore {}; evaluation runs: {} cases, {} / {}",
            t.threshold,
            t.cases,
            fmt(t.estimator_sign_agreement),
            fmt(t.softmax_sign_agreement),
            r.cases,
            fmt(r.estimator_sign_agreement),
            fmt(r.softmax_sign_agreement)
        ),
    )
}

fn criterion_imbalance(outcome: &EvalOutcome) -> Check {
    let i = &outcome.report.summary.imbalance;
    pass_if(
        i.estimator_change.abs() < i.tgtlabel_change.abs() + 5.0,
        format!(
            "{PRIMARY_ESTIMATOR} {:.2} -> {:.2} (change {:.2}); TgtLabel change {:.2}",
            i.estimator_balanced, i.estimator_imbalanced, i.estimator_change, i.tgtlabel_change
        ),
    )
}

fn criterion_ablation(outcome: &EvalOutcome) -> Check {
    let names: BTreeMap<&str, String> = pipeline::estimator_variants(&RunConfig::default())
        .into_iter()
        .map(|v| (v.key, v.name))
        .collect();
    let m = |key: &str| mean_of(outcome, &names[key]);
    let (full, gd, gd_iu, feat, dfeat, mlp) = (m("dapper"), m("gd"), m("gd-iu"), m("feat"), m("dfeat"), m("mlp"));
    pass_if(
        full >= gd - ABLATION_BAND && full >= feat - ABLATION_BAND && full >= dfeat - ABLATION_BAND,
        format!(
            "GD+IU+PD {full:.2} vs GD {gd:.2} (GD+IU {gd_iu:.2}); Feat+dFeat {full:.2} vs dFeat {dfeat:.2} vs Feat {feat:.2}; dFeat >= Feat: {}; MLP body {mlp:.2}",
            dfeat >= feat
        ),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism(a: &Path, b: &Path) -> Check {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Err(format!("file sets differ: {} vs {} files", fa.len(), fb.len()));
    }
    let differing: Vec<_> = fa
        .iter()
        .filter(|p| std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap())
        .collect();
    let reports = fa.iter().filter(|p| p.starts_with("eval")).count();
    pass_if(
        differing.is_empty() && reports > 0,
        format!(
            "{} files compared ({reports} report files), {} differ{}",
            fa.len(),
            differing.len(),
            differing.first().map_or(String::new(), |p| format!(", e.g. {}", p.display()))
        ),
    )
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut results: Vec<(u32, &str, Check)> = Vec::new();
    let mut report = |n: u32, name: &'static str, c: Check| {
        let (tag, detail) = match &c {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} ({name}): {tag} - {detail}");
        results.push((n, name, c));
    };

    report(1, "kernel gradients", criterion_gradients());
    report(2, "feature oracles", criterion_features());

    let (dir_a, dir_b) = (root.join("headline"), root.join("headline-rerun"));
    let (outcome, elapsed) = headline_run(&dir_a);
    report(3, "similarity", criterion_similarity(&outcome, &RunDir::new(&dir_a)));
    report(4, "mutual information vs accuracy", criterion_mi(&outcome));
    report(5, "headline", criterion_headline(&outcome, elapsed));
    report(6, "degradation awareness", criterion_degradation(&outcome));
    report(7, "imbalance robustness", criterion_imbalance(&outcome));
    report(8, "ablations", criterion_ablation(&outcome));
    let _ = headline_run(&dir_b);
    report(9, "determinism", criterion_determinism(&dir_a, &dir_b));

    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if !failed.is_empty() {
        println!("acceptance: {} of {} criteria failed: {failed:?}", failed.len(), results.len());
        std::process::exit(1);
    }
    println!("acceptance: all {} criteria passed", results.len());
}
