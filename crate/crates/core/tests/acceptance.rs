//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.

use std::time::{Duration, Instant};

use pcreg::bench::{scaling_study, BenchConfig, BenchPath};
use pcreg::checks::{run_gradchecks, CheckModule};
use pcreg::estimator::{objective, register_oracle, weighted_svd};
use pcreg::geom::{metrics, registration_recall, rotation_error_deg, Point, PointCloud, RigidTransform, SuccessThresholds};
use pcreg::io::synth::{synth_pair, SynthConfig};
use pcreg::matching::CorrespondenceSet;
use pcreg::numeric::Tensor;
use pcreg::pipeline::ablation::{ablation_grid, ablation_table, run_ablation};
use pcreg::pipeline::{toy_dataset, ModelConfig};
use pcreg::serialize::{locality_score, morton_encode, serialize, Curve};
use pcreg::ssm::{discretize, ssm_conv, ssm_scan, Discretization, SsmParams};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Prints the verdict line, then fails the test if `ok` is false.
fn verdict(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n}: {detail}");
}

fn within(start: Instant, limit: Duration) -> (bool, f64) {
    let s = start.elapsed().as_secs_f64();
    (s < limit.as_secs_f64(), s)
}

/// Interleaves one bit at a time, x lowest.
fn naive_interleave(g: [u32; 3], depth: u32) -> u64 {
    let mut code = 0u64;
    for b in 0..depth {
        for (axis, &c) in g.iter().enumerate() {
            code |= (((c >> b) & 1) as u64) << (3 * b + axis as u32);
        }
    }
    code
}

fn uniform_cloud(g: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| Point::from_fn(|_, _| g.random::<f64>())).collect()).unwrap()
}

#[test]
fn criterion_1_serialization_correctness() {
    let start = Instant::now();
    let mut g = rng(1);
    let mut mismatches = 0;
    for _ in 0..100_000 {
        let depth = g.random_range(1..=21u32);
        let triple = [0; 3].map(|_: u32| g.random_range(0..(1u32 << depth)));
        if morton_encode(triple, depth, None).unwrap() != naive_interleave(triple, depth) {
            mismatches += 1;
        }
    }
    let mut variant_failures = 0;
    for seed in 0..3 {
        let cloud = uniform_cloud(&mut rng(100 + seed), 500);
        let base = serialize(&cloud, Curve::Zorder, 16).unwrap();
        let seq: Vec<Point> = base.order.iter().map(|&i| cloud.points()[i]).collect();
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..cloud.len()).collect();
            perm.shuffle(&mut g);
            let shuffled = cloud.permuted(&perm);
            let code = serialize(&shuffled, Curve::Zorder, 16).unwrap();
            let seq2: Vec<Point> = code.order.iter().map(|&i| shuffled.points()[i]).collect();
            let codes_follow = perm.iter().enumerate().all(|(k, &i)| code.codes[k] == base.codes[i]);
            if seq2 != seq || !codes_follow {
                variant_failures += 1;
            }
        }
    }
    let (fast, secs) = within(start, Duration::from_secs(5));
    verdict(
        1,
        mismatches == 0 && variant_failures == 0 && fast,
        format!("{mismatches} code mismatches / 1e5, {variant_failures} permutation failures / 300, {secs:.2}s"),
    );
}

#[test]
fn criterion_2_locality() {
    let mut zs = Vec::new();
    let mut wins = 0;
    for seed in 0..10 {
        let cloud = uniform_cloud(&mut rng(200 + seed), 4096);
        let z = locality_score(&cloud, &serialize(&cloud, Curve::Zorder, 16).unwrap(), 5).unwrap();
        let x = locality_score(&cloud, &serialize(&cloud, Curve::Xyz, 16).unwrap(), 5).unwrap();
        if z < x {
            wins += 1;
        }
        zs.push((z, x));
    }
    let all_below = zs.iter().all(|(z, _)| *z < 0.5);
    let listed: Vec<String> = zs.iter().map(|(z, x)| format!("{z:.4}/{x:.4}")).collect();
    verdict(
        2,
        all_below && wins >= 8,
        format!("zorder below xyz on {wins}/10; zorder/xyz scores {}", listed.join(" ")),
    );
}

/// Exact sampled solution of `h' = A h + B x` with `x` held over each step,
/// from the exponential of the augmented matrix `[[A, B], [0, 0]] Δ`.
fn exact_zoh_output(p: &SsmParams, x: &Tensor) -> Tensor {
    let (n, l) = p.b.shape();
    let mut m = DMatrix::<f64>::zeros(n + l, n + l);
    for i in 0..n {
        m[(i, i)] = p.a[i] * p.delta;
        for j in 0..l {
            m[(i, n + j)] = p.b.get(i, j) * p.delta;
        }
    }
    let e = m.exp();
    let phi = e.view((0, 0), (n, n)).into_owned();
    let gamma = e.view((0, n), (n, l)).into_owned();
    let c = DMatrix::from_row_slice(l, n, p.c.data());
    let mut h = nalgebra::DVector::<f64>::zeros(n);
    let mut y = Tensor::zeros(x.rows(), l);
    for k in 0..x.rows() {
        let xk = nalgebra::DVector::from_row_slice(x.row_slice(k));
        h = &phi * &h + &gamma * &xk;
        let yk = &c * &h;
        for j in 0..l {
            y.set(k, j, yk[j] + p.d[j] * xk[j]);
        }
    }
    y
}

#[test]
fn criterion_3_ssm_equivalence() {
    let start = Instant::now();
    let mut g = rng(3);
    let (mut worst_conv, mut worst_exact) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = g.random_range(1..=16);
        let m = g.random_range(1..=64);
        let l = g.random_range(1..=3);
        let p = SsmParams {
            a: (0..n).map(|_| -g.random_range(0.05..3.0)).collect(),
            b: Tensor::randn(n, l, 1.0, &mut g),
            c: Tensor::randn(l, n, 1.0, &mut g),
            d: (0..l).map(|_| g.random_range(-1.0..1.0)).collect(),
            delta: g.random_range(0.01..0.5),
        };
        let x = Tensor::randn(m, l, 1.0, &mut g);
        let disc = discretize(&p).unwrap();
        let no_skip = vec![0.0; l];
        let scan0 = ssm_scan(&disc, &p.c, &no_skip, &x).unwrap();
        let conv = ssm_conv(&Discretization::TimeInvariant(disc.clone()), &p.c, &x).unwrap();
        worst_conv = worst_conv.max(scan0.max_abs_diff(&conv));
        let scan = ssm_scan(&disc, &p.c, &p.d, &x).unwrap();
        worst_exact = worst_exact.max(scan.max_abs_diff(&exact_zoh_output(&p, &x)));
    }
    let (fast, secs) = within(start, Duration::from_secs(10));
    verdict(
        3,
        worst_conv <= 1e-10 && worst_exact <= 1e-10 && fast,
        format!("max |scan-conv| {worst_conv:.2e}, max |scan-exact| {worst_exact:.2e}, {secs:.2}s"),
    );
}

#[test]
fn criterion_4_gradients() {
    let start = Instant::now();
    let results = run_gradchecks(CheckModule::All).unwrap();
    let names: Vec<&str> = results.iter().map(|r| r.name).collect();
    let losses = names.iter().filter(|n| n.starts_with("loss_")).count();
    let covered = losses == 8
        && ["mamba_block", "self_attention", "cross_attention", "backbone", "coarse_stage"]
            .iter()
            .all(|n| names.contains(n));
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    let (fast, secs) = within(start, Duration::from_secs(60));
    verdict(
        4,
        covered && failed.is_empty() && fast,
        format!(
            "{} checks ({losses} losses), worst rel err {worst:.2e}, failures {failed:?}, {secs:.2}s",
            results.len()
        ),
    );
}

#[test]
fn criterion_5_weighted_svd() {
    let mut g = rng(5);
    let (mut worst_rre, mut worst_rte) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let gt = RigidTransform::random(&mut g, 180.0, 5.0);
        let n = g.random_range(3..30);
        let src: Vec<Point> = (0..n).map(|_| Point::from_fn(|_, _| g.random_range(-1.0..1.0))).collect();
        let tgt = src.iter().map(|p| gt.apply_point(p)).collect();
        let w = (0..n).map(|_| g.random_range(0.1..1.0)).collect();
        let est = weighted_svd(&CorrespondenceSet::new(src, tgt, w).unwrap()).unwrap();
        worst_rre = worst_rre.max(rotation_error_deg(&est.rotation, &gt.rotation));
        worst_rte = worst_rte.max((est.translation - gt.translation).norm());
    }
    let mut beaten = 0;
    for _ in 0..50 {
        let n = g.random_range(3..8);
        let src: Vec<Point> = (0..n).map(|_| Point::from_fn(|_, _| g.random_range(-1.0..1.0))).collect();
        let tgt: Vec<Point> = (0..n).map(|_| Point::from_fn(|_, _| g.random_range(-1.0..1.0))).collect();
        let w = (0..n).map(|_| g.random_range(0.1..2.0)).collect();
        let c = CorrespondenceSet::new(src, tgt, w).unwrap();
        let best = weighted_svd(&c).unwrap();
        let f = objective(&c, &best);
        // Half global candidates, half near the optimum.
        let lost = (0..10_000).any(|i| {
            let cand = if i % 2 == 0 {
                RigidTransform::random(&mut g, 180.0, 2.0)
            } else {
                RigidTransform::random(&mut g, 5.0, 0.05).compose(&best)
            };
            objective(&c, &cand) < f
        });
        if lost {
            beaten += 1;
        }
    }
    verdict(
        5,
        worst_rre < 1e-7 && worst_rte < 1e-9 && beaten == 0,
        format!("worst RRE {worst_rre:.2e} deg, worst RTE {worst_rte:.2e}, beaten on {beaten}/50 instances"),
    );
}

#[test]
fn criterion_6_oracle_end_to_end() {
    let start = Instant::now();
    let synth = SynthConfig::preset("highoverlap").unwrap();
    assert_eq!(synth.noise, 0.005);
    let cfg = ModelConfig::default();
    let th = SuccessThresholds { rot_deg: 5.0, trans: 0.1 };
    let mut results = Vec::new();
    let mut errors = 0;
    for seed in 0..50 {
        let pair = synth_pair(&synth, seed).unwrap();
        match register_oracle(&pair.src, &pair.tgt, &pair.gt, &cfg) {
            Ok((est, _)) => results.push(metrics(&est, &pair.gt, th)),
            Err(_) => errors += 1,
        }
    }
    let rr = registration_recall(&results) * results.len() as f64 / 50.0;
    let mean_rre = results.iter().map(|m| m.rre).sum::<f64>() / results.len().max(1) as f64;
    let (fast, secs) = within(start, Duration::from_secs(120));
    verdict(
        6,
        rr == 1.0 && mean_rre < 0.5 && fast,
        format!("RR {:.0}%, mean RRE {mean_rre:.4} deg, {errors} errors, {secs:.2}s", rr * 100.0),
    );
}

fn train_via_cli(dir: &std::path::Path, tag: &str) -> (i32, Vec<f64>) {
    let out_path = dir.join(format!("params_{tag}.bin"));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let args = ["pcreg", "train-toy", "--pairs", "20", "--steps", "200", "--seed", "1", "--out"];
    let code = pcreg::cli::run(
        args.iter().map(|s| s.to_string()).chain([out_path.display().to_string()]),
        &mut out,
        &mut err,
    );
    let csv = String::from_utf8(out).unwrap();
    let totals = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    (code, totals)
}

#[test]
fn criterion_7_toy_training() {
    let dir = tempfile::tempdir().unwrap();
    let (c1, a) = train_via_cli(dir.path(), "a");
    let (c2, b) = train_via_cli(dir.path(), "b");
    let finite = a.iter().all(|v: &f64| v.is_finite());
    let divergence = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let (start, end) = pcreg::pipeline::smoothed_endpoints(&a, pcreg::pipeline::train::SMOOTHING_WINDOW).unwrap();
    verdict(
        7,
        c1 == 0 && c2 == 0 && a.len() == 200 && b.len() == 200 && finite && end < 0.7 * start && divergence <= 1e-12,
        format!(
            "smoothed loss {start:.4} -> {end:.4} ({:.3}x), finite {finite}, run divergence {divergence:.1e}",
            end / start
        ),
    );
}

#[test]
fn criterion_8_scaling() {
    let start = Instant::now();
    let lengths = [256, 512, 1024, 1536];
    let table = scaling_study(&lengths, &BenchPath::ALL, &BenchConfig::default()).unwrap();
    let ssm = table.ratios_per_doubling(BenchPath::Ssm);
    let attn = table.ratios_per_doubling(BenchPath::Attn);
    let fit = table.fit(BenchPath::Ssm).unwrap();
    let afit = table.fit(BenchPath::Attn).unwrap();
    let saving = table.hybrid_saving(1536).unwrap();
    let (fast, secs) = within(start, Duration::from_secs(120));
    let ok = ssm.iter().all(|r| (1.8..=2.2).contains(r))
        && attn.iter().all(|r| (3.5..=4.5).contains(r))
        && fit.linear_r2 >= 0.999
        && fit.quadratic_share() <= 0.01
        && afit.quadratic[2] > 0.0
        && afit.quadratic_share() > 1.0
        && saving > 1.0
        && fast;
    verdict(
        8,
        ok,
        format!(
            "per-doubling ratios ssm {ssm:.3?} attn {attn:.3?}; ssm R² {:.6}; attention/hybrid at 1536 {saving:.2}x; {secs:.2}s",
            fit.linear_r2
        ),
    );
}

#[test]
fn criterion_9_ablation_harness() {
    let base = ModelConfig::toy();
    let train = toy_dataset(6, 9).unwrap();
    let tiny = SynthConfig::preset("tiny").unwrap();
    let eval: Vec<_> = (0..3).map(|i| synth_pair(&tiny, 900_000 + i).unwrap()).collect();
    let rows = run_ablation(&train, &eval, &base, 30).unwrap();
    let table = ablation_table(&rows);
    println!("{table}");
    let expected = ablation_grid(&base).len();
    verdict(
        9,
        rows.len() == expected && table.lines().count() == expected + 2,
        format!("{} configurations trained and scored, table emitted", rows.len()),
    );
}
