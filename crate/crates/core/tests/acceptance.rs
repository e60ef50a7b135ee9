//! Acceptance suite. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr, past the test harness's output capture, and then asserts the
//! outcome.

mod common;

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scnn_core::corpus::{extract_dir, gen_corpus, ExtractOptions};
use scnn_core::costbench::{run_bench, BenchMethod, BenchSpec, Threading};
use scnn_core::lanepost::{fit_spline, CurveFile, DecodeParams, LaneCurve, LaneRecord};
use scnn_core::laneval::{
    evaluate_corpus, evaluate_entries, fmeasure, iou_matrix, match_and_score, optimal_assignment, CorpusEntry,
    EvalOptions,
};
use scnn_core::meanfield::{count_messages_dense, count_messages_scnn, mf_iterate_counted, MeanFieldConfig};
use scnn_core::scnn::{
    gradcheck, scnn_forward, scnn_forward_counted, Direction, MessageCounter, PropagationConfig, ScnnKernel, Scheme,
};
use scnn_core::tensor::Precision;
use scnn_core::toytrain::{evaluate, train, Insertion, NetConfig, SceneConfig, StackConfig, TrainConfig};
use scnn_core::Tensor3;

use common::{brute_force_best, propagate_ref, random_kernel, random_tensor, DenseSpline};

fn report(n: usize, ok: bool, detail: String) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {n} failed: {detail}");
}

const SCHEMES: [Scheme; 2] = [Scheme::Sequential, Scheme::Parallel];

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut runs = 0;
    for dir in Direction::ALL {
        for scheme in SCHEMES {
            for w in [1, 3, 5] {
                for seed in 0..5u64 {
                    let (c, h, wd) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8));
                    let r = gradcheck(c, h, wd, w, PropagationConfig::new(dir, scheme), seed).unwrap();
                    worst = worst.max(r.max_rel_err);
                    runs += 1;
                    if !(r.pass && r.max_rel_err < 1e-5) {
                        failures.push(format!("{dir:?}/{scheme:?}/w={w}/seed={seed} ({c},{h},{wd}): {}", r.max_rel_err));
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        failures.is_empty() && secs < 60.0,
        format!("{runs} checks, worst rel err {worst:.2e}, {secs:.1}s, failures {failures:?}"),
    );
}

#[test]
fn criterion_2_recurrence_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8));
        let kw = [1, 3, 5, 7][rng.random_range(0..4)];
        let dir = Direction::ALL[rng.random_range(0..4)];
        let scheme = SCHEMES[rng.random_range(0..2)];
        let x = random_tensor(&mut rng, c, h, w);
        let k = random_kernel(&mut rng, c, kw);
        let got = scnn_forward(&x, &k, PropagationConfig::new(dir, scheme)).unwrap();
        let want = propagate_ref(&x, &[&k], dir, scheme);
        if got.data().iter().zip(want.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    report(2, mismatches == 0, format!("{mismatches} of 100 instances differ bitwise"));
}

/// Unit impulse in the first slice of `dir`, with a positive kernel.
fn impulse_reach(dir: Direction, scheme: Scheme, h: usize, w: usize) -> Vec<bool> {
    let mut x = Tensor3::zeros(1, h, w).unwrap();
    let (j, k) = match dir {
        Direction::Down => (0, w / 2),
        Direction::Up => (h - 1, w / 2),
        Direction::Right => (h / 2, 0),
        Direction::Left => (h / 2, w - 1),
    };
    x.set(0, j, k, 1.0).unwrap();
    let kernel = ScnnKernel::from_vec(1, 3, vec![0.25, 1.0, 0.25]).unwrap();
    let y = scnn_forward(&x, &kernel, PropagationConfig::new(dir, scheme)).unwrap();
    // reached[s] = slice s (in propagation order) holds a non-zero value
    let n = match dir {
        Direction::Down | Direction::Up => h,
        Direction::Right | Direction::Left => w,
    };
    (0..n)
        .map(|s| match dir {
            Direction::Down => (0..w).any(|c| y.get(0, s, c).unwrap() != 0.0),
            Direction::Up => (0..w).any(|c| y.get(0, h - 1 - s, c).unwrap() != 0.0),
            Direction::Right => (0..h).any(|r| y.get(0, r, s).unwrap() != 0.0),
            Direction::Left => (0..h).any(|r| y.get(0, r, w - 1 - s).unwrap() != 0.0),
        })
        .collect()
}

#[test]
fn criterion_3_sequential_parallel_separation() {
    let mut bad = Vec::new();
    for (h, w) in [(8, 8), (12, 5), (5, 12)] {
        for dir in Direction::ALL {
            let seq = impulse_reach(dir, Scheme::Sequential, h, w);
            if !seq.iter().all(|&r| r) {
                bad.push(format!("sequential {dir:?} {h}x{w}: {seq:?}"));
            }
            let par = impulse_reach(dir, Scheme::Parallel, h, w);
            let expect: Vec<bool> = (0..par.len()).map(|s| s <= 1).collect();
            if par != expect {
                bad.push(format!("parallel {dir:?} {h}x{w}: {par:?}"));
            }
        }
    }
    report(3, bad.is_empty(), format!("violations {bad:?}"));
}

#[test]
fn criterion_4_message_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    for h in 1..=8usize {
        for w in 1..=8usize {
            for kw in [1usize, 3, 9] {
                let x = random_tensor(&mut rng, 2, h, w);
                let k = random_kernel(&mut rng, 2, kw);
                let mut counter = MessageCounter::default();
                for dir in Direction::ALL {
                    scnn_forward_counted(&x, &k, PropagationConfig::new(dir, Scheme::Sequential), &mut counter).unwrap();
                }
                let formula = count_messages_scnn(h as u64, w as u64, kw as u64, 4);
                if counter.total() != formula {
                    bad.push(format!("scnn {h}x{w} w={kw}: {} vs {formula}", counter.total()));
                }
            }
            let n_iter = 2;
            let cfg = MeanFieldConfig::new(2, n_iter, 15).unwrap();
            let mut counter = 0u64;
            mf_iterate_counted(&random_tensor(&mut rng, 2, h, w), &cfg, &mut counter).unwrap();
            let formula = count_messages_dense(h as u64, w as u64, n_iter as u64);
            if counter != formula {
                bad.push(format!("dense {h}x{w}: {counter} vs {formula}"));
            }
        }
    }
    let dense = count_messages_dense(36, 100, 10);
    let sparse = count_messages_scnn(36, 100, 9, 4);
    let ratio = dense / sparse;
    let ok = bad.is_empty() && dense.is_multiple_of(sparse) && ratio == 1_000_000;
    report(
        4,
        ok,
        format!("counter mismatches {bad:?}; dense {dense}, scnn {sparse}, ratio {ratio} (required 1000000)"),
    );
}

#[test]
fn criterion_5_runtime_ratio() {
    let start = Instant::now();
    let bench = |method| {
        let spec = BenchSpec {
            repetitions: 3,
            warmup: 0,
            threading: Threading::Single,
            ..BenchSpec::new(method, [5, 288, 800])
        };
        run_bench(&spec).unwrap()
    };
    let scnn = bench(BenchMethod::ScnnDulr);
    let mf = bench(BenchMethod::MeanField);
    assert_eq!((scnn.w, mf.n_iter, mf.kernel_size), (9, 10, 21));
    let ratio = mf.median_ms / scnn.median_ms;
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        ratio >= 2.0 && secs < 300.0,
        format!(
            "scnn {:.1} ms, mean field {:.1} ms, ratio {ratio:.2}, {secs:.1}s",
            scnn.median_ms, mf.median_ms
        ),
    );
}

const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SCENES: usize = 100;

fn toy_config(stack: Option<Insertion>, seed: u64) -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            hidden: 8,
            stack: stack.map(StackConfig::new),
            ..NetConfig::default()
        },
        scene: SceneConfig {
            height: 64,
            width: 128,
            occlusion_rate: 0.5,
            ..SceneConfig::default()
        },
        steps: 2000,
        batch: 1,
        base_lr: 0.01,
        seed,
        ..TrainConfig::default()
    }
}

fn toy_f1(stack: Option<Insertion>, seed: u64) -> f64 {
    let cfg = toy_config(stack, seed);
    let run = train(&cfg, None).unwrap();
    let params = DecodeParams {
        row_step: 4,
        ..DecodeParams::default()
    };
    let summary = evaluate(&run.net, &cfg.scene, 1000 + seed, EVAL_SCENES, &params, 0.5).unwrap();
    summary.f1
}

#[test]
fn criterion_6_training_improvement() {
    let start = Instant::now();
    let mean = |stack: Option<Insertion>| -> (f64, Vec<f64>) {
        let f: Vec<f64> = TRAIN_SEEDS.iter().map(|&s| toy_f1(stack, s)).collect();
        (f.iter().sum::<f64>() / f.len() as f64, f)
    };
    let (base, base_f) = mean(None);
    let (top, top_f) = mean(Some(Insertion::TopHidden));
    let (out, out_f) = mean(Some(Insertion::Output));
    let secs = start.elapsed().as_secs_f64();
    let ok = top >= base + 0.05 && top >= out && secs < 1800.0;
    report(
        6,
        ok,
        format!(
            "mean F1(0.5) baseline {base:.3} {base_f:.3?}, top-hidden {top:.3} {top_f:.3?}, output {out:.3} {out_f:.3?}, {secs:.0}s"
        ),
    );
}

fn random_curves<R: Rng>(rng: &mut R, n: usize, h: f64, w: f64) -> Vec<LaneCurve> {
    (0..n)
        .map(|i| {
            let x0 = rng.random_range(0.0..w);
            let x1 = (x0 + rng.random_range(-40.0..40.0)).clamp(0.0, w - 1.0);
            let xm = 0.5 * (x0 + x1) + rng.random_range(-10.0..10.0);
            LaneCurve::fit(i + 1, vec![(x0, 0.0), (xm, h / 2.0), (x1, h - 1.0)]).unwrap()
        })
        .collect()
}

#[test]
fn criterion_7_evaluation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    let (h, w) = (120, 200);
    let mut instances = 0;
    for n_pred in 0..=4 {
        for n_gt in 0..=4 {
            for _ in 0..20 {
                let preds = random_curves(&mut rng, n_pred, h as f64, w as f64);
                let gts = random_curves(&mut rng, n_gt, h as f64, w as f64);
                for thr in [0.3, 0.5] {
                    let counts = match_and_score(&preds, &gts, h, w, 30.0, thr);
                    let ious = iou_matrix(&preds, &gts, h, w, 30.0);
                    let (best, tp) = brute_force_best(&ious, thr);
                    let total: f64 = optimal_assignment(&ious, thr).iter().map(|&(p, g)| ious[p][g]).sum();
                    instances += 1;
                    if counts.tp != tp || counts.fp != n_pred - tp || counts.fn_ != n_gt - tp || (total - best).abs() > 1e-12 {
                        bad.push(format!("{n_pred}x{n_gt} thr {thr}: {counts:?} vs tp {tp}"));
                    }
                }
            }
        }
    }
    let worked = optimal_assignment(&[vec![0.6, 0.4], vec![0.55, 0.35]], 0.5);
    if worked != vec![(0, 0)] {
        bad.push(format!("worked example gave {worked:?}"));
    }
    let f = fmeasure(2, 1, 1, 1.0);
    if f != 2.0 / 3.0 {
        bad.push(format!("fmeasure(2,1,1) = {f}"));
    }
    let entries: Vec<CorpusEntry> = (0..5)
        .map(|_| {
            let file = CurveFile::from_curves(w, h, &random_curves(&mut rng, 4, h as f64, w as f64));
            CorpusEntry {
                category: "normal".into(),
                pred: file.clone(),
                gt: file,
            }
        })
        .collect();
    for thr in [0.3, 0.5] {
        let r = evaluate_entries(&entries, &EvalOptions { iou_threshold: thr, ..EvalOptions::default() });
        if r.total.f1 != Some(1.0) {
            bad.push(format!("identity corpus F1 at {thr}: {:?}", r.total.f1));
        }
    }
    report(7, bad.is_empty(), format!("{instances} assignment instances, problems {bad:?}"));
}

#[test]
fn criterion_8_spline_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut knot_err, mut eval_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(2..=15);
        let mut y = rng.random_range(0.0..10.0);
        let knots: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                y += rng.random_range(1.0..30.0);
                (rng.random_range(0.0..800.0), y)
            })
            .collect();
        let curve = fit_spline(&knots).unwrap();
        let spline = curve.spline.as_ref().unwrap();
        for &(x, ky) in &knots {
            knot_err = knot_err.max((spline.eval(ky) - x).abs());
        }
        let oracle = DenseSpline::fit(&knots);
        let (lo, hi) = (knots[0].1, knots[n - 1].1);
        for _ in 0..100 {
            let t = rng.random_range(lo..=hi);
            eval_err = eval_err.max((spline.eval(t) - oracle.eval(t)).abs());
        }
    }
    report(
        8,
        knot_err <= 1e-9 && eval_err <= 1e-9,
        format!("max knot error {knot_err:.2e}, max deviation from dense solver {eval_err:.2e}"),
    );
}

fn pipeline_report(dir: &std::path::Path, seed: u64) -> String {
    let scene = SceneConfig {
        occlusion_rate: 0.5,
        ..SceneConfig::default()
    };
    let summary = gen_corpus(dir, 6, seed, &scene).unwrap();
    let opts = ExtractOptions {
        decode: DecodeParams {
            row_step: 10,
            ..DecodeParams::default()
        },
        ..ExtractOptions::default()
    };
    extract_dir(dir, &opts).unwrap();
    let (report, errs) = evaluate_corpus(&summary.list, &EvalOptions::default()).unwrap();
    assert!(errs.is_empty(), "{errs:?}");
    serde_json::to_string(&report).unwrap()
}

#[test]
fn criterion_9_format_stability() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = Vec::new();
    let tmp = tempfile::tempdir().unwrap();

    let mut t = random_tensor(&mut rng, 3, 7, 5);
    t.data_mut()[..6].copy_from_slice(&[-0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, 1e300, -1.0 / 3.0]);
    let path = tmp.path().join("t.scnt");
    t.save(&path).unwrap();
    let back = Tensor3::load(&path).unwrap();
    if back.shape() != t.shape() || back.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        bad.push("f64 tensor".to_string());
    }
    let t32 = Tensor3::from_fn(2, 4, 6, |_, _, _| rng.random_range(-1.0f32..1.0) as f64)
        .unwrap()
        .with_precision(Precision::F32);
    let back = Tensor3::from_bytes(&t32.to_bytes()).unwrap();
    if back.data().iter().zip(t32.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        bad.push("f32 tensor".to_string());
    }
    let k = random_kernel(&mut rng, 3, 5);
    if ScnnKernel::from_bytes(&k.to_bytes(Precision::F64)).unwrap() != k {
        bad.push("kernel".to_string());
    }

    let curves = random_curves(&mut rng, 4, 288.0, 800.0);
    let mut file = CurveFile::from_curves(800, 288, &curves);
    file.lanes.push(LaneRecord {
        id: 5,
        exists: false,
        points: Vec::new(),
    });
    let cpath = tmp.path().join("c.json");
    file.save(&cpath).unwrap();
    let cback = CurveFile::load(&cpath).unwrap();
    let pts_bits = |f: &CurveFile| -> Vec<u64> {
        f.lanes.iter().flat_map(|l| l.points.iter().flat_map(|p| [p.0.to_bits(), p.1.to_bits()])).collect()
    };
    if cback != file || pts_bits(&cback) != pts_bits(&file) {
        bad.push("curve file".to_string());
    }

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (pipeline_report(a.path(), 21), pipeline_report(b.path(), 21));
    if ra != rb {
        bad.push(format!("pipeline reports differ:\n{ra}\n{rb}"));
    }
    report(9, bad.is_empty(), format!("problems {bad:?}"));
}
