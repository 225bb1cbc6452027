//! Finite-difference helpers for validating the hand-written backward passes.
//!
//! These are deliberately independent of every analytic adjoint in the crate:
//! they only ever evaluate forward functions.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{init_cloud, Column, MaskDistribution};
use crate::error::Result;
use crate::geometry::Camera;
use crate::image::Image;
use crate::nets::{Mlp, Mode};
use crate::splat::RenderSettings;
use crate::stdr::Phase;
use crate::trainer::{evaluate, iteration_rng, Config, TrainState, NETWORK_NAMES};

/// Relative error with denominator `max(|analytic|, |numeric|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Two-point central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Five-point central difference, truncation error `O(h⁴)`.
pub fn central_difference5(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Running tally for a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Components skipped because the stencil straddled a kink.
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn record(&mut self, label: impl Into<String>, analytic: f64, numeric: f64, tol: f64, floor: f64) {
        let e = rel_err(analytic, numeric, floor);
        self.checked += 1;
        if e > self.worst || e.is_nan() {
            self.worst = e;
        }
        if !(e <= tol) {
            self.failures.push(Mismatch {
                label: label.into(),
                analytic,
                numeric,
                rel_err: e,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A small randomized training problem for checking the full gradient chain.
pub struct ChainScene {
    pub state: TrainState,
    pub camera: Camera,
    pub timestamp: usize,
    pub target: Image,
}

/// Random scene with `n` Gaussians, `k` timestamps and a `size × size` view,
/// positioned at `iteration` of the schedule.
///
/// Networks are shrunk and their parameters jittered (the deformation output
/// layer starts at zero, which would hide every upstream gradient). Rendering
/// uses exact settings so the loss is smooth in every parameter.
pub fn chain_scene(seed: u64, n: usize, k: usize, size: u32, iteration: u64, stdr: bool) -> Result<ChainScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let positions: Vec<[f64; 3]> = (0..n).map(|_| [u(-0.7, 0.7), u(-0.7, 0.7), u(-0.4, 0.4)]).collect();
    let colors: Vec<[f64; 3]> = (0..n).map(|_| [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)]).collect();

    let mut cfg = Config::default();
    cfg.train.stdr = stdr;
    cfg.train.seed = seed;
    cfg.render = RenderSettings::exact();
    cfg.network.hidden_width = 8;
    cfg.network.spatial_width = 4;
    cfg.network.temporal_width = 4;
    cfg.network.deform_layers = 3;
    cfg.network.position_frequencies = 2;
    cfg.network.time_frequencies = 2;
    cfg.regularizer.knn_k = 3.min(n.saturating_sub(1));
    let mut cloud = init_cloud(&positions, &colors, k, 0, seed)?;
    let p = &mut cloud.params;
    for i in 0..n {
        let q = [u(0.5, 1.0), u(-0.5, 0.5), u(-0.5, 0.5), u(-0.5, 0.5)];
        p.rotations[i] = q;
        p.log_scales[i] = [u(0.06, 0.2).ln(), u(0.06, 0.2).ln(), u(0.06, 0.2).ln()];
        p.colors[i] = [u(-1.5, 1.5), u(-1.5, 1.5), u(-1.5, 1.5)];
        p.opacity_logits[i] = u(-1.0, 2.0);
    }
    for m in p.mask_logits.iter_mut() {
        *m = u(-1.5, 1.5);
    }
    if stdr && cfg.regularizer.knn_k > 0 {
        cloud.rebuild_knn(cfg.regularizer.knn_k)?;
    }
    let mut state = TrainState::with_cloud(cfg, cloud)?;
    for net in [
        &mut state.sep.shared,
        &mut state.sep.temporal,
        &mut state.sep.dynamic,
        &mut state.deform.net,
    ] {
        for v in net.params_mut() {
            *v += u(-0.15, 0.15);
        }
    }
    state.iteration = iteration;
    if stdr && state.phase() == Phase::Frozen {
        let logits: Vec<f64> = (0..n * k).map(|_| u(-1.0, 1.0)).collect();
        state.cached = Some(MaskDistribution::from_logits(&logits, k));
    }
    let camera = Camera::look_at(
        Vector3::new(0.3, -0.4, -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        50f64.to_radians(),
    )?;
    let timestamp = (seed as usize) % k;
    let data = (0..(size * size * 3) as usize).map(|_| u(0.0, 1.0)).collect();
    let target = Image::from_data(size as usize, size as usize, data)?;
    Ok(ChainScene {
        state,
        camera,
        timestamp,
        target,
    })
}

/// Step multipliers tried in order by [`check_chain`].
const STEP_SCALES: [f64; 3] = [1.0, 0.1, 0.01];

/// Compare every gradient reported by [`evaluate`] (cloud columns and all
/// network parameters) with five-point central differences of the total loss.
///
/// The generator is re-seeded for every evaluation so dropout masks and KL
/// samples are held fixed. Each component is differenced at `h`, then `h/10`
/// and `h/100` until one agrees: large steps keep roundoff off tiny
/// gradients, small ones step inside a nearby kink (a ReLU switching). If none
/// agrees and the estimates also disagree with each other, no step avoided
/// the kink and the component is counted as skipped; if they agree with each
/// other, it is a failure.
pub fn check_chain(scene: &mut ChainScene, h: f64, tol: f64, floor: f64) -> Result<GradCheckReport> {
    let seed = scene.state.seed;
    let it = scene.state.iteration;
    let (cam, ts, gt) = (scene.camera.clone(), scene.timestamp, scene.target.clone());
    let eval = |s: &TrainState| -> Result<f64> {
        let mut rng = iteration_rng(seed, it);
        Ok(evaluate(s, &cam, ts, &gt, Mode::Train, &mut rng)?.report.total)
    };
    let grads = {
        let mut rng = iteration_rng(seed, it);
        evaluate(&scene.state, &cam, ts, &gt, Mode::Train, &mut rng)?.grads
    };

    let mut report = GradCheckReport::default();
    let state = &mut scene.state;
    let mut probe = |state: &mut TrainState,
                     label: String,
                     analytic: f64,
                     get: &dyn Fn(&mut TrainState) -> &mut f64|
     -> Result<()> {
        let x0 = *get(state);
        let mut err = None;
        let mut f = |x: f64| {
            *get(state) = x;
            eval(state).unwrap_or_else(|e| {
                err = Some(e);
                f64::NAN
            })
        };
        let mut estimates = Vec::with_capacity(STEP_SCALES.len());
        for scale in STEP_SCALES {
            let d = central_difference5(&mut f, x0, h * scale);
            estimates.push(d);
            if rel_err(analytic, d, floor) <= tol {
                break;
            }
        }
        let best = estimates
            .iter()
            .copied()
            .min_by(|a, b| rel_err(analytic, *a, floor).total_cmp(&rel_err(analytic, *b, floor)))
            .expect("at least one step");
        let consistent = estimates
            .iter()
            .all(|a| estimates.iter().all(|b| rel_err(*a, *b, floor) <= tol));
        if rel_err(analytic, best, floor) > tol && !consistent {
            report.skipped += 1;
        } else {
            report.record(label, analytic, best, tol, floor);
        }
        *get(state) = x0;
        err.map_or(Ok(()), Err)
    };

    for column in Column::ALL {
        let len = grads.cloud.column(column).len();
        for j in 0..len {
            let a = grads.cloud.column(column)[j];
            probe(state, format!("{}[{j}]", column.name()), a, &move |s| {
                &mut s.cloud.params.column_mut(column)[j]
            })?;
        }
    }
    for (b, name) in NETWORK_NAMES.iter().enumerate() {
        for j in 0..grads.nets[b].len() {
            probe(state, format!("{name}[{j}]"), grads.nets[b][j], &move |s| {
                &mut net_mut(s, b).params_mut()[j]
            })?;
        }
    }
    Ok(report)
}

fn net_mut(s: &mut TrainState, b: usize) -> &mut Mlp {
    match b {
        0 => &mut s.sep.shared,
        1 => &mut s.sep.temporal,
        2 => &mut s.sep.dynamic,
        _ => &mut s.deform.net,
    }
}
