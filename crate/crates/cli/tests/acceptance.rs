//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::cell::Cell;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use suap_cli::commands::{cmd_attack, AttackRun};
use suap_cli::{Overrides, RunConfig};
use suap_core::config::parse_ini;
use suap_core::losses::{self, LossWeights, RegularizerConfig};
use suap_core::metrics::{self, BBox, MetricScores};
use suap_core::scene::{generate_scene, SceneSpec};
use suap_core::solvers::{self, AoExpConfig, LinearOracle, TopK};
use suap_core::spectral;
use suap_core::detector::{Detector, DetectorConfig};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: f64, what: &str) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, || {
        format!("{what} took {:.2}s, limit {limit}s", elapsed.as_secs_f64())
    })
}

fn run_config(text: &str, out: &Path, overrides: Overrides) -> RunConfig {
    let mut ini = parse_ini(text).unwrap();
    Overrides { out: Some(out.to_path_buf()), ..overrides }.apply(&mut ini).unwrap();
    RunConfig::from_ini(&ini).unwrap()
}

fn presets() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn lambert_accuracy() -> Check {
    let start = Instant::now();
    let lo = -1.0 / std::f64::consts::E + 1e-6;
    let span = 1e6 - lo;
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        // log-spaced offsets from the lower end, hitting both endpoints
        let t = k as f64 / 999.0;
        let x = if k == 999 { 1e6 } else { lo + ((1.0 + span).ln() * t).exp() - 1.0 };
        let w = spectral::lambert_w0(x).map_err(|e| format!("W0({x}) failed: {e}"))?;
        worst = worst.max((w * w.exp() - x).abs() / x.abs().max(1.0));
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-12, || format!("worst residual {worst:e}"))?;
    within(elapsed, 1.0, "1000 evaluations")?;
    Ok(format!("max residual {worst:.2e} in {:.3}s", elapsed.as_secs_f64()))
}

fn zero_threshold_identity() -> Check {
    let mut runner = TestRunner::new(Config { cases: 500, failure_persistence: None, ..Config::default() });
    let strategy = (0.5f64..100.0, 1e-3f64..1.0, 0.0f64..5.0, 0.0f64..=1.0);
    let worst = Cell::new(0.0f64);
    let cases = Cell::new(0usize);
    runner
        .run(&strategy, |(eta, lambda2, lambda1, frac)| {
            let theta = lambda1 * frac;
            let z = solvers::singular_value_step(theta, eta, lambda1, lambda2).unwrap();
            worst.set(worst.get().max(z.abs()));
            cases.set(cases.get() + 1);
            proptest::prop_assert!(z.abs() <= 1e-10, "z = {z:e} at theta {theta}, eta {eta}, l1 {lambda1}, l2 {lambda2}");
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{} cases, max |z| {:.1e}", cases.get(), worst.get()))
}

/// Minimizer of `-<G, d> + l1 |d|_* + (l2/2) |d|_F^2` via an SVD that does
/// not share code with the library, plus its subgradient residual.
fn soft_threshold_oracle(g: &Array2<f64>, l1: f64, l2: f64) -> (Array2<f64>, f64, f64) {
    let (h, w) = g.dim();
    let m = DMatrix::from_fn(h, w, |i, j| g[[i, j]]);
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let shrunk = svd.singular_values.map(|s| (s - l1).max(0.0) / l2);
    let star = &u * DMatrix::from_diagonal(&shrunk) * &vt;
    let objective = -svd.singular_values.iter().map(|s| (s - l1).max(0.0).powi(2)).sum::<f64>() / (2.0 * l2);

    // optimality: D = G - l2 d* = l1 U_r V_r^T + W, W orthogonal to U_r, V_r, |W|_2 <= l1
    let d = &m - &star * l2;
    let r = shrunk.iter().filter(|&&s| s > 0.0).count();
    let ur = u.columns(0, r).into_owned();
    let vr = vt.rows(0, r).transpose();
    let on_support = &ur * vt.rows(0, r);
    let pu = &ur * ur.transpose();
    let pv = &vr * vr.transpose();
    let eye_h = DMatrix::<f64>::identity(h, h);
    let eye_w = DMatrix::<f64>::identity(w, w);
    let tangent = &d - (&eye_h - &pu) * &d * (&eye_w - &pv);
    let normal = (&eye_h - &pu) * &d * (&eye_w - &pv);
    let spec = normal.clone().svd(false, false).singular_values.max();
    let residual = (tangent - on_support * l1).norm() + (spec - l1).max(0.0);
    let star = Array2::from_shape_fn((h, w), |(i, j)| star[(i, j)]);
    (star, objective, residual)
}

fn composite_convergence() -> Check {
    let start = Instant::now();
    let (l1, l2) = (0.3, 0.5);
    let reg = RegularizerConfig { lambda1: l1, lambda2: l2 };
    let cfg = AoExpConfig { regularizer: reg, iterations: 200, top_k: TopK::Full, eta0: 1.0 };
    let mut worst_gap: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array3::from_shape_fn((8, 8, 1), |_| rng.random_range(-1.0..1.0));
        let out = solvers::ao_exp(&LinearOracle::new(g.clone()), &cfg).map_err(|e| e.to_string())?;
        let value = -(&g * &out.delta).sum() + losses::regularizer_value(&out.delta, &reg).map_err(|e| e.to_string())?;
        let (star, best, residual) = soft_threshold_oracle(&losses::channel(&g, 0), l1, l2);
        let check = -(&losses::channel(&g, 0) * &star).sum()
            + l1 * spectral::nuclear_norm(&star).unwrap()
            + 0.5 * l2 * star.iter().map(|v| v * v).sum::<f64>();
        ensure((check - best).abs() < 1e-9, || format!("seed {seed}: oracle objective inconsistent"))?;
        worst_res = worst_res.max(residual);
        worst_gap = worst_gap.max(value - best);
        ensure(value - best <= 1e-3 && value - best >= -1e-9, || {
            format!("seed {seed}: gap {:.3e}", value - best)
        })?;
    }
    ensure(worst_res <= 1e-8, || format!("oracle subgradient residual {worst_res:e}"))?;
    within(start.elapsed(), 10.0, "20 instances")?;
    Ok(format!(
        "max gap {worst_gap:.2e}, oracle residual {worst_res:.1e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let h = 1e-4;
    let det = Detector::new(DetectorConfig::default(), 3).unwrap();
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for scene_seed in 0..10u64 {
        let spec = SceneSpec::random(48, 48, 3, 2, 1, 500 + scene_seed).map_err(|e| e.to_string())?;
        let seq = generate_scene(&spec).unwrap().frames;
        let parts = losses::clean_partitions(&seq, &det).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let delta = Array3::from_shape_fn(seq.dims(), |_| rng.random_range(-0.03..0.03));
        let weights = if scene_seed % 2 == 0 {
            LossWeights::default()
        } else {
            LossWeights { alpha: 0.1, beta: 0.0, gamma: -1.0 }
        };
        let g = losses::averaged_gradient(&seq, &delta, &det, &parts, &weights).unwrap();
        let supports = |d: &Array3<f64>| -> Vec<Vec<Vec<(usize, usize)>>> {
            seq.frames()
                .iter()
                .map(|f| {
                    let img = losses::perturbed_frame(f, d);
                    det.forward(img.view()).unwrap().1.into_iter().map(|x| x.support).collect()
                })
                .collect()
        };
        let base = supports(&delta);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 50 {
            attempts += 1;
            ensure(attempts < 2000, || format!("scene {scene_seed}: too few differentiable pixels"))?;
            let idx = (rng.random_range(0..48), rng.random_range(0..48), rng.random_range(0..3));
            let (mut plus, mut minus) = (delta.clone(), delta.clone());
            plus[idx] += h;
            minus[idx] -= h;
            let crosses_clamp = seq.frames().iter().any(|f| {
                let x = f64::from(f[idx]);
                (0.0..=1.0).contains(&(x + plus[idx])) != (0.0..=1.0).contains(&(x + minus[idx]))
            });
            if crosses_clamp || supports(&plus) != base || supports(&minus) != base {
                continue;
            }
            let lp = losses::averaged_loss(&seq, &plus, &det, &parts, &weights).unwrap().l_total;
            let lm = losses::averaged_loss(&seq, &minus, &det, &parts, &weights).unwrap().l_total;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.grad[idx];
            let scale = an.abs().max(fd.abs());
            let rel = if scale == 0.0 { 0.0 } else { (an - fd).abs() / scale };
            worst = worst.max(rel);
            ensure(rel <= 1e-4, || format!("scene {scene_seed} pixel {idx:?}: analytic {an:e} vs fd {fd:e}"))?;
            checked += 1;
        }
        total += checked;
    }
    within(start.elapsed(), 30.0, "gradient checks")?;
    Ok(format!(
        "{total} pixels over 10 scenes, max rel err {worst:.2e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn low_rank_contracts(tmp: &Path) -> Check {
    let scene = "[scene]\nheight = 40\nwidth = 40\nchannels = 3\nframes = 4\nrandom_objects = 1\nseed = 21\n";
    let rank_ratio = |run: &AttackRun, k: usize| -> f64 {
        (0..3)
            .map(|c| {
                let s = spectral::singular_values(&losses::channel(&run.outcome.delta, c)).unwrap();
                if s[0] == 0.0 { 0.0 } else { s[k] / s[0] }
            })
            .fold(0.0, f64::max)
    };

    let lora = run_config(
        &format!("{scene}[run]\nmethod = ao-exp-lora\n[ao_exp]\niterations = 50\ntop_k = 1\n"),
        &tmp.join("c5-lora"),
        Overrides::default(),
    );
    let run = cmd_attack(&lora).map_err(|e| e.to_string())?;
    ensure(run.outcome.delta.iter().any(|&v| v != 0.0), || "ao-exp-lora returned delta = 0".into())?;
    let r1 = rank_ratio(&run, 1);
    ensure(r1 <= 1e-8, || format!("ao-exp-lora sigma2/sigma1 = {r1:e}"))?;

    let pgd = run_config(
        &format!("{scene}[run]\nmethod = lora-pgd\n[lora_pgd]\nrank_fraction = 0.1\niterations = 30\n"),
        &tmp.join("c5-pgd"),
        Overrides::default(),
    );
    let run = cmd_attack(&pgd).map_err(|e| e.to_string())?;
    let r4 = rank_ratio(&run, 4);
    ensure(r4 <= 1e-8, || format!("lora-pgd sigma5/sigma1 = {r4:e}"))?;

    let fw = run_config(
        &format!("{scene}[run]\nmethod = fw-nucl\n[fw_nucl]\nepsilon = 40\niterations = 30\nline_search_evals = 5\n"),
        &tmp.join("c5-fw"),
        Overrides::default(),
    );
    let run = cmd_attack(&fw).map_err(|e| e.to_string())?;
    let max_nuc = run
        .outcome
        .trace
        .iter()
        .flat_map(|r| r.channel_nuclear.iter().copied())
        .fold(0.0, f64::max);
    ensure(run.outcome.trace.len() == 30, || "fw-nucl trace length".into())?;
    ensure(max_nuc <= 40.0 + 1e-6, || format!("fw-nucl nuclear norm {max_nuc}"))?;
    Ok(format!("sigma2/sigma1 {r1:.1e}, sigma5/sigma1 {r4:.1e}, max fw nuclear {max_nuc:.6}"))
}

fn desk_scale_effectiveness(tmp: &Path) -> Check {
    let start = Instant::now();
    let preset = fs::read_to_string(presets().join("toy-vanish.ini")).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut ok = true;
    // scene seeds disjoint from the ones used to pick the preset
    for seed in 1000..1005u64 {
        let seed_override = || Overrides { seed: Some(seed), ..Overrides::default() };
        let ao = run_config(&preset, &tmp.join(format!("c6-ao-{seed}")), seed_override());
        let ao_run = cmd_attack(&ao).map_err(|e| e.to_string())?;
        let eps = ao_run.report.channel_nuclear.iter().copied().fold(0.0, f64::max);
        let fw = run_config(
            &preset,
            &tmp.join(format!("c6-fw-{seed}")),
            Overrides {
                method: Some(suap_cli::Method::FwNucl),
                epsilon: Some(eps.max(1e-9)),
                iters: Some(30),
                ..seed_override()
            },
        );
        let fw_run = cmd_attack(&fw).map_err(|e| e.to_string())?;
        let (a, f) = (&ao_run.report, &fw_run.report);
        let scene_ok = a.adv_br <= 0.25 && a.iou_acc <= 0.3 * a.clean_iou_acc;
        ok &= scene_ok;
        if a.adv_br < f.adv_br {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: ao advBR {:.3} IoU_acc {:.3}/{:.3}, fw advBR {:.3} (eps {eps:.2}){}",
            a.adv_br,
            a.iou_acc,
            a.clean_iou_acc,
            f.adv_br,
            if scene_ok { "" } else { " <- bound missed" }
        ));
    }
    let detail = lines.join("; ");
    ensure(ok, || detail.clone())?;
    ensure(wins >= 4, || format!("ao-exp beat fw-nucl on {wins}/5 scenes; {detail}"))?;
    within(start.elapsed(), 300.0, "five scenes")?;
    Ok(format!("ao-exp < fw-nucl on {wins}/5, {:.1}s; {detail}", start.elapsed().as_secs_f64()))
}

fn metric_unit_truths() -> Check {
    let a = BBox::new(0, 0, 2, 2).unwrap();
    let b = BBox::new(1, 1, 3, 3).unwrap();
    let v = metrics::iou(&a, &b).unwrap();
    ensure((v - 1.0 / 7.0).abs() <= 1e-12, || format!("IoU = {v}"))?;
    let map = metrics::mean_abs_perturbation(&Array3::from_elem((5, 7, 3), 0.5));
    ensure(map == 1.5, || format!("MAP = {map}"))?;
    let br = metrics::adv_box_ratio(&[2, 3, 1], &[0, 0, 0]).unwrap();
    ensure(br == 0.0, || format!("advBR = {br}"))?;
    // two metrics, three methods, two instances
    //   m1: [1, 2] -> ranks x: A1 B2.5 C2.5, y: A2 B1 C3
    //   m2 (higher better): [3, 1] -> x: A1 B2 C3, y: A3 B2 C1
    let table = [
        MetricScores { values: vec![vec![0.1, 0.4], vec![0.3, 0.2], vec![0.3, 0.9]], lower_is_better: true },
        MetricScores { values: vec![vec![5.0, 1.0], vec![4.0, 2.0], vec![3.0, 3.0]], lower_is_better: false },
    ];
    let ranks = metrics::average_ranks(&table).unwrap();
    let manual = [(1.0 + 2.0 + 1.0 + 3.0) / 4.0, (2.5 + 1.0 + 2.0 + 2.0) / 4.0, (2.5 + 3.0 + 3.0 + 1.0) / 4.0];
    ensure(ranks.iter().zip(manual).all(|(r, m)| (r - m).abs() < 1e-12), || {
        format!("ranks {ranks:?}, expected {manual:?}")
    })?;
    Ok(format!("IoU {v:.15}, MAP {map}, advBR {br}, ranks {ranks:?}"))
}

const SMALL: &str = "[scene]\nheight = 32\nwidth = 32\nchannels = 3\nframes = 4\nrandom_objects = 1\nseed = 5\n[loss]\nalpha = 0.1\nbeta = 0\ngamma = -1\n[regularizer]\nlambda1 = 0.01\nlambda2 = 0.001\n[ao_exp]\niterations = 25\n[lora_pgd]\niterations = 25\nrank_fraction = 0.25\n[fw_nucl]\niterations = 10\nepsilon = 10\n";

fn determinism(tmp: &Path, runs: &mut Vec<AttackRun>) -> Check {
    let mut sizes = Vec::new();
    for method in ["ao-exp", "lora-pgd", "fw-nucl"] {
        let text = format!("{SMALL}[run]\nmethod = {method}\nseed = 17\n");
        let dirs = [tmp.join(format!("c8-{method}-a")), tmp.join(format!("c8-{method}-b"))];
        for d in &dirs {
            runs.push(cmd_attack(&run_config(&text, d, Overrides::default())).map_err(|e| e.to_string())?);
        }
        for file in ["delta.uapt", "trace.csv", "report.csv"] {
            let a = fs::read(dirs[0].join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(dirs[1].join(file)).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{method}: {file} differs between runs"))?;
            if file == "delta.uapt" {
                sizes.push(a.len());
            }
        }
    }
    Ok(format!("delta, trace and report byte-identical for 3 methods ({sizes:?} byte tensors)"))
}

fn universality(runs: &[AttackRun]) -> Check {
    ensure(!runs.is_empty(), || "no attacked sequences".into())?;
    let mut checked = 0usize;
    let mut clamped = 0usize;
    let mut worst: f64 = 0.0;
    for run in runs {
        let delta = &run.outcome.delta;
        for (clean, adv) in run.clean.frames().iter().zip(run.adversarial.frames()) {
            for ((idx, &c), &a) in clean.indexed_iter().zip(adv.iter()) {
                let target = f64::from(c) + delta[idx];
                if !(0.0..=1.0).contains(&target) {
                    clamped += 1;
                    continue;
                }
                let err = (f64::from(a) - f64::from(c) - delta[idx]).abs();
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    ensure(worst <= 1e-7, || format!("max deviation {worst:e}"))?;
    Ok(format!("{checked} unclamped pixels over {} sequences, max deviation {worst:.1e} ({clamped} clamped)", runs.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut runs = Vec::new();
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} {tag} {name} [{secs:.2}s]: {detail}");
        results.push((n, name, out, secs));
    };
    record(1, "lambert-w accuracy", &mut lambert_accuracy);
    record(2, "zero-threshold identity", &mut zero_threshold_identity);
    record(3, "composite-oracle convergence", &mut composite_convergence);
    record(4, "gradient fidelity", &mut gradient_fidelity);
    record(5, "low-rank contracts", &mut || low_rank_contracts(tmp.path()));
    record(6, "desk-scale effectiveness", &mut || desk_scale_effectiveness(tmp.path()));
    record(7, "metric unit truths", &mut metric_unit_truths);
    record(8, "determinism", &mut || determinism(tmp.path(), &mut runs));
    record(9, "universality", &mut || universality(&runs));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
