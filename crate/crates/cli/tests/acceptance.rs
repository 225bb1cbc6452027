//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix2, Vector2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdr_core::cloud::{build_knn, logit, KnnTable};
use stdr_core::geometry::{Camera, Splat2D};
use stdr_core::gradcheck::{chain_scene, check_chain};
use stdr_core::image::Image;
use stdr_core::scenes::{generate_scene, Dataset, SceneSpec};
use stdr_core::splat::{render_forward, RenderSettings, SplatInput, MIN_COV_DET};
use stdr_core::stdr::{spatial_awareness_loss, temporal_smoothness_loss};
use stdr_core::trainer::{
    evaluate_frames, load_checkpoint, mean_metrics, periodic_checkpoint_name, train, train_step, Config, RunOptions,
    TrainState, CHECKPOINT_FILE, METRICS_FILE,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn full_chain_gradients() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0f64);
    let mut problems = Vec::new();
    for s in 0..20u64 {
        let seed = 100 + s;
        let n = 5 + (s as usize * 7) % 16;
        let iteration = [200, 3000, 4500, 6500][s as usize % 4];
        let stdr = s % 5 != 4;
        let mut scene = match chain_scene(seed, n, 4, 16, iteration, stdr) {
            Ok(sc) => sc,
            Err(e) => return outcome(false, format!("scene {seed}: {e}")),
        };
        let report = match check_chain(&mut scene, 1e-3, 1e-4, 1e-8) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("scene {seed}: {e}")),
        };
        checked += report.checked;
        skipped += report.skipped;
        worst = worst.max(report.worst);
        if !report.passed() {
            let f = &report.failures[0];
            problems.push(format!("scene {seed}: {} failures, first {f:?}", report.failures.len()));
        }
        if report.skipped * 50 > report.checked {
            problems.push(format!(
                "scene {seed}: {} of {} components skipped",
                report.skipped, report.checked
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 300.0 {
        problems.push(format!("took {secs:.0} s (limit 300 s)"));
    }
    let detail = format!(
        "20 scenes, {checked} components, {skipped} kinks skipped, worst rel err {worst:.2e} (tol 1e-4), {secs:.0} s"
    );
    if problems.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; {}", problems.join("; ")))
    }
}

// ---------------------------------------------------------------- 2

fn random_splats(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Vec<Option<SplatInput>> {
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.05 {
                return None;
            }
            let (sx, sy) = (rng.random_range(0.5..6.0f64), rng.random_range(0.5..6.0f64));
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (c, s) = (th.cos(), th.sin());
            let r = Matrix2::new(c, -s, s, c);
            Some(SplatInput {
                splat: Splat2D {
                    mean2d: Vector2::new(rng.random_range(-4.0..size + 4.0), rng.random_range(-4.0..size + 4.0)),
                    cov2d: r * Matrix2::new(sx * sx, 0.0, 0.0, sy * sy) * r.transpose(),
                    depth: rng.random_range(0.5..5.0),
                },
                color: [rng.random(), rng.random(), rng.random()],
                alpha: rng.random_range(0.01..0.99),
            })
        })
        .collect()
}

/// Every splat at every pixel, sorted front to back; no tiles, no culling radius.
fn naive(inputs: &[Option<SplatInput>], w: usize, h: usize, s: &RenderSettings) -> Image {
    let mut order: Vec<SplatInput> = inputs.iter().flatten().copied().collect();
    order.sort_by(|a, b| a.splat.depth.total_cmp(&b.splat.depth));
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            for sp in &order {
                let cov = (sp.splat.cov2d + sp.splat.cov2d.transpose()) * 0.5;
                if !(cov.determinant() > MIN_COV_DET) {
                    continue;
                }
                let d = p - sp.splat.mean2d;
                let a = sp.alpha * (-0.5 * (d.transpose() * cov.try_inverse().unwrap() * d)[0]).exp();
                if a < s.alpha_threshold {
                    continue;
                }
                for c in 0..3 {
                    rgb[c] += sp.color[c] * a * t;
                }
                t *= 1.0 - a;
                if t < s.min_transmittance {
                    break;
                }
            }
            for c in 0..3 {
                rgb[c] += t * s.background[c];
            }
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

fn tiled_equals_naive() -> Outcome {
    let cam = Camera::new(
        32,
        32,
        [32.0, 32.0, 16.0, 16.0],
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0.0; 3],
    )
    .unwrap();
    let settings = RenderSettings::default();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(1..=100);
        let inputs = random_splats(&mut rng, n, 32.0);
        let tiled = match render_forward(&inputs, &cam, &settings) {
            Ok(out) => out.image,
            Err(e) => return outcome(false, format!("scene {seed}: {e}")),
        };
        let oracle = naive(&inputs, 32, 32, &settings);
        for (a, b) in tiled.data.iter().zip(&oracle.data) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("50 scenes of <= 100 splats at 32x32, max abs diff {worst:.2e} (tol 1e-10)"),
    )
}

// ---------------------------------------------------------------- 3

fn regularizer_analytics() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Time-constant masks have no temporal loss.
    let k = 8;
    let constant: Vec<f64> = (0..40).flat_map(|_| vec![rng.random_range(-4.0..4.0); k]).collect();
    let (lt, _) = temporal_smoothness_loss(&constant, k).unwrap();
    if lt != 0.0 {
        problems.push(format!("temporal loss {lt:e} on time-constant masks"));
    }
    let (lt, _) = temporal_smoothness_loss(&[logit(0.2), logit(0.7)], 2).unwrap();
    if (lt - 0.25).abs() > 1e-9 {
        problems.push(format!("temporal example {lt} != 0.25"));
    }

    // Identical rows have zero KL; KL is never negative.
    let pts: Vec<[f64; 3]> = (0..40)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let knn = build_knn(&pts, 5).unwrap();
    let row: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let same: Vec<f64> = (0..40).flat_map(|_| row.clone()).collect();
    let (ls, _) = spatial_awareness_loss(&same, k, &knn, 40, 1000, &mut rng).unwrap();
    if ls.abs() > 1e-12 {
        problems.push(format!("KL {ls:e} on identical rows"));
    }
    let mut lowest = f64::INFINITY;
    for _ in 0..200 {
        let scale = rng.random_range(0.1..12.0);
        let logits: Vec<f64> = (0..40 * k).map(|_| rng.random_range(-scale..scale)).collect();
        let (ls, _) = spatial_awareness_loss(&logits, k, &knn, 20, 60, &mut rng).unwrap();
        lowest = lowest.min(ls);
    }
    if lowest < -1e-9 {
        problems.push(format!("KL {lowest:e} below -1e-9"));
    }

    // Single pair p = (0.75, 0.25), q = (0.5, 0.5): pick a sampler seed that draws Gaussian 0.
    let pair = KnnTable {
        k: 1,
        indices: vec![1, 0],
    };
    let seed = (0u64..)
        .find(|&s| index::sample(&mut ChaCha8Rng::seed_from_u64(s), 2, 1).index(0) == 0)
        .unwrap();
    let (kl, _) = spatial_awareness_loss(
        &[3f64.ln(), 0.0, 0.0, 0.0],
        2,
        &pair,
        1,
        1,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    if (kl - expected).abs() > 1e-9 || (kl - 0.13081).abs() > 1e-5 {
        problems.push(format!("KL example {kl} != {expected}"));
    }

    let detail = format!("Lt(const) = 0, KL(identical) = {ls:.1e}, min KL {lowest:.2e}, examples 0.25 / {kl:.5}");
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            detail
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 4, 7

fn small_scene() -> Dataset {
    generate_scene(&SceneSpec {
        timestamps: 4,
        n_static: 40,
        n_dynamic: 10,
        cameras: 5,
        width: 32,
        height: 32,
        seed: 1,
        ..SceneSpec::default()
    })
    .unwrap()
}

fn fresh(data: &Dataset, cfg: Config) -> TrainState {
    TrainState::new(cfg, &data.init_positions(), &data.init_colors(), data.timestamps()).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn schedule_contract() -> Outcome {
    let data = small_scene();
    let mut state = fresh(&data, Config::default());
    let loss_cfg = state.config.loss.clone();
    let opacity0 = bits(&state.cloud.params.opacity_logits);
    let mut masks_frozen: Option<Vec<u64>> = None;
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    for it in 0..7000u64 {
        if it == 6000 {
            masks_frozen = Some(bits(&state.cloud.params.mask_logits));
        }
        let report = match train_step(&mut state, &data) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("iteration {it}: {e}")),
        };
        worst = worst.max((report.total - report.recompose(&loss_cfg)).abs());
        if it < 3000 && bits(&state.cloud.params.opacity_logits) != opacity0 {
            problems.push(format!("opacity changed at iteration {it}"));
            break;
        }
        if let Some(m) = &masks_frozen {
            if bits(&state.cloud.params.mask_logits) != *m {
                problems.push(format!("masks changed at iteration {it}"));
                break;
            }
        }
    }
    if bits(&state.cloud.params.opacity_logits) == opacity0 {
        problems.push("opacity never trained".into());
    }
    if worst > 1e-12 {
        problems.push(format!("recomposition error {worst:e}"));
    }
    let detail = format!(
        "7000 iterations: opacity fixed on [0, 3000), masks fixed on [6000, 7000), recomposition error {worst:.1e} (tol 1e-12)"
    );
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            detail
        } else {
            problems.join("; ")
        },
    )
}

fn strip_wall(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

fn run_to(state: &mut TrainState, data: &Dataset, dir: &Path, until: u64) -> stdr_core::Result<()> {
    train(
        state,
        data,
        &RunOptions {
            out_dir: dir.to_path_buf(),
            until,
            append_metrics: false,
        },
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_scene();
    let mut cfg = Config::default();
    cfg.train.checkpoint_every = 3500;
    cfg.train.seed = 11;
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        let mut state = fresh(&data, cfg.clone());
        if let Err(e) = run_to(&mut state, &data, dir, 7000) {
            return outcome(false, format!("run: {e}"));
        }
    }
    let read = |p: &Path| fs::read(p).unwrap();
    let text = |p: &Path| String::from_utf8(read(p)).unwrap();
    let metrics_a = strip_wall(&text(&a.join(METRICS_FILE)));
    let mut problems = Vec::new();
    if metrics_a != strip_wall(&text(&b.join(METRICS_FILE))) {
        problems.push("metrics differ between identical runs".to_string());
    }
    if read(&a.join(CHECKPOINT_FILE)) != read(&b.join(CHECKPOINT_FILE)) {
        problems.push("final checkpoints differ between identical runs".to_string());
    }

    let mut resumed = match load_checkpoint(&a.join(periodic_checkpoint_name(3500))) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("loading the mid-run checkpoint: {e}")),
    };
    if let Err(e) = run_to(&mut resumed, &data, &c, 7000) {
        return outcome(false, format!("resume: {e}"));
    }
    let metrics_c = strip_wall(&text(&c.join(METRICS_FILE)));
    // Header plus iterations 3500..7000 of the uninterrupted run.
    let mut expected = vec![metrics_a[0].clone()];
    expected.extend_from_slice(&metrics_a[3501..]);
    if metrics_c != expected {
        problems.push("resumed metrics differ from the uninterrupted run".to_string());
    }
    if read(&c.join(CHECKPOINT_FILE)) != read(&a.join(CHECKPOINT_FILE)) {
        problems.push("resumed final checkpoint differs from the uninterrupted run".to_string());
    }
    let detail = format!(
        "two 7000-iteration runs: {} metrics rows identical (wall_ms excluded), resume at 3500 bit-identical",
        metrics_a.len() - 1
    );
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            detail
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 5

fn ghosting_experiment() -> Vec<(String, Outcome)> {
    let start = Instant::now();
    let data = generate_scene(&SceneSpec::default()).unwrap();
    let k = data.timestamps();
    let held_out = data.eval_frames();
    let mut runs = Vec::new();
    for stdr in [true, false] {
        let mut cfg = Config::default();
        cfg.train.stdr = stdr;
        let mut state = fresh(&data, cfg);
        while state.iteration < 8000 {
            if let Err(e) = train_step(&mut state, &data) {
                let fail = outcome(false, format!("training (stdr = {stdr}): {e}"));
                return vec![("5".into(), fail)];
            }
        }
        let (psnr, _) = mean_metrics(&evaluate_frames(&state, &data, &held_out).unwrap());
        runs.push((state, psnr));
    }
    let secs = start.elapsed().as_secs_f64();
    let (stdr_psnr, base_psnr) = (runs[0].1, runs[1].1);
    let gain = stdr_psnr - base_psnr;
    let a = outcome(
        gain >= 1.0,
        format!(
            "held-out PSNR {stdr_psnr:.2} dB with STDR vs {base_psnr:.2} dB without, gain {gain:.2} dB (need >= 1.0); both runs {secs:.0} s"
        ),
    );

    let state = &runs[0].0;
    let dist = state.cached.clone().unwrap_or_else(|| state.cloud.mask_distribution());
    let entropy = dist.entropies();
    let ln_k = (k as f64).ln();
    let mean_ratio = |dynamic: bool| {
        let h: Vec<f64> = data
            .manifest
            .init_points
            .iter()
            .zip(&entropy)
            .filter(|(p, _)| p.dynamic == dynamic)
            .map(|(_, h)| h / ln_k)
            .collect();
        h.iter().sum::<f64>() / h.len() as f64
    };
    let (dynamic, fixed) = (mean_ratio(true), mean_ratio(false));
    let b = outcome(
        dynamic <= 0.5 && fixed >= 0.9,
        format!("mean entropy / ln K: dynamic {dynamic:.3} (need <= 0.5), static {fixed:.3} (need >= 0.9)"),
    );
    vec![("5a".into(), a), ("5b".into(), b)]
}

fn main() {
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut record = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name.to_string(), o));
    };
    record("1 full-chain gradients", full_chain_gradients());
    record("2 tiled = naive rasterizer", tiled_equals_naive());
    record("3 regularizer analytics", regularizer_analytics());
    record("4 schedule contract", schedule_contract());
    for (n, o) in ghosting_experiment() {
        record(&format!("{n} ghosting experiment"), o);
    }
    println!(
        "INFO 6 large-scale benchmark numbers: not reproduced; they need external baseline codebases and GPU-scale training, \
         criterion 5 is the desk-scale substitute"
    );
    record("7 determinism", determinism());
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
