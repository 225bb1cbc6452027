//! Synthetic dynamic scenes with a deliberately ghosted initialization,
//! dataset persistence, and image metrics.

mod dataset;
pub mod metrics;

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, save_dataset, Dataset, Frame, InitPoint, Manifest, MANIFEST_FILE};
pub use metrics::{psnr, ssim, ssim_with_grad};

use crate::error::{Error, Result};
use crate::geometry::{build_covariance, project_gaussian, Camera, Quaternion};
use crate::image::Image;
use crate::splat::{render_forward, RenderSettings, SplatInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    /// Translation along +x, centered on the blob's rest position.
    Linear,
    /// Circle in the horizontal plane; amplitude is the diameter.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    pub kind: MotionKind,
    pub amplitude: f64,
}

impl Motion {
    /// Blob offset at normalized time `t ∈ [0, 1]`.
    pub fn offset(&self, t: f64) -> [f64; 3] {
        match self.kind {
            MotionKind::Linear => [self.amplitude * (t - 0.5), 0.0, 0.0],
            MotionKind::Circular => {
                let a = 2.0 * PI * t;
                let r = 0.5 * self.amplitude;
                [r * a.cos(), r * a.sin(), 0.0]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub timestamps: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub motion: Motion,
    /// Cameras on the ring, including held-out ones.
    pub cameras: usize,
    /// The last `held_out` ring cameras are excluded from training.
    pub held_out: usize,
    pub ring_radius: f64,
    /// Ring elevation above the horizontal plane, radians.
    pub elevation: f64,
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub width: u32,
    pub height: u32,
    /// Radius of the disc holding the static Gaussians.
    pub static_radius: f64,
    /// Radius of the dynamic blob.
    pub blob_radius: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            timestamps: 8,
            n_static: 200,
            n_dynamic: 50,
            motion: Motion {
                kind: MotionKind::Linear,
                amplitude: 2.0,
            },
            cameras: 13,
            held_out: 1,
            ring_radius: 4.0,
            elevation: 0.35,
            fov: 50f64.to_radians(),
            width: 64,
            height: 64,
            static_radius: 1.3,
            blob_radius: 0.12,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.timestamps < 2 {
            return Err(Error::Validation(format!(
                "K must be at least 2, got {}",
                self.timestamps
            )));
        }
        if self.cameras == 0 {
            return Err(Error::InvalidInput("scene needs at least one camera".into()));
        }
        if self.held_out >= self.cameras {
            return Err(Error::Validation(format!(
                "held_out ({}) must leave at least one training camera out of {}",
                self.held_out, self.cameras
            )));
        }
        if !(self.motion.amplitude >= 0.0) || !self.motion.amplitude.is_finite() {
            return Err(Error::Validation("motion amplitude must be finite and >= 0".into()));
        }
        if self.n_static + self.n_dynamic == 0 {
            return Err(Error::Validation("scene needs at least one Gaussian".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        if !(self.fov > 0.0 && self.fov < PI) || !(self.ring_radius > 0.0) {
            return Err(Error::Validation(
                "fov must lie in (0, π) and ring radius be positive".into(),
            ));
        }
        Ok(())
    }

    /// Normalized time of timestamp `index`.
    pub fn time(&self, index: usize) -> f64 {
        index as f64 / (self.timestamps - 1) as f64
    }

    pub fn ring(&self) -> Result<Vec<Camera>> {
        (0..self.cameras)
            .map(|c| {
                let a = 2.0 * PI * c as f64 / self.cameras as f64;
                let (ce, se) = (self.elevation.cos(), self.elevation.sin());
                let eye = Vector3::new(
                    self.ring_radius * ce * a.cos(),
                    self.ring_radius * ce * a.sin(),
                    self.ring_radius * se,
                );
                Camera::look_at(eye, Vector3::zeros(), Vector3::z(), self.width, self.height, self.fov)
            })
            .collect()
    }
}

/// A ground-truth Gaussian with explicit (not pre-activation) appearance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtGaussian {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub color: [f64; 3],
    pub alpha: f64,
}

/// Ground truth: static set plus the dynamic set at rest, and the trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub statics: Vec<GtGaussian>,
    pub dynamics: Vec<GtGaussian>,
    pub spec: SceneSpec,
}

impl GroundTruth {
    /// All Gaussians at timestamp `index`.
    pub fn at(&self, index: usize) -> Vec<GtGaussian> {
        let off = self.spec.motion.offset(self.spec.time(index));
        let mut all = self.statics.clone();
        all.extend(self.dynamics.iter().map(|g| GtGaussian {
            position: std::array::from_fn(|a| g.position[a] + off[a]),
            ..*g
        }));
        all
    }
}

/// Render explicit Gaussians with the exact (threshold-free) settings.
pub fn render_reference(gaussians: &[GtGaussian], cam: &Camera, background: [f64; 3]) -> Result<Image> {
    let inputs = gaussians
        .iter()
        .map(|g| {
            let sigma = build_covariance(&Quaternion::from_array(g.rotation), &Vector3::from(g.log_scale))?;
            Ok(
                project_gaussian(&Vector3::from(g.position), &sigma, cam).map(|splat| SplatInput {
                    splat,
                    color: g.color,
                    alpha: g.alpha,
                }),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = RenderSettings {
        background,
        ..RenderSettings::exact()
    };
    Ok(render_forward(&inputs, cam, &settings)?.image)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

fn in_ball(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p.map(|v| v * r);
        }
    }
}

pub fn ground_truth(spec: &SceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let statics = (0..spec.n_static)
        .map(|_| {
            // A low slab under the moving blob.
            let d = in_ball(&mut rng, spec.static_radius);
            let z = rng.random_range(-0.5..-0.15);
            let s = rng.random_range(0.08f64..0.16).ln();
            GtGaussian {
                position: [d[0], d[1], z],
                rotation: random_rotation(&mut rng),
                log_scale: [s, s + rng.random_range(-0.3..0.3), s + rng.random_range(-0.3..0.3)],
                color: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
                alpha: 0.9,
            }
        })
        .collect();
    let base: [f64; 3] = [0.3, 0.85, 0.2];
    let dynamics = (0..spec.n_dynamic)
        .map(|_| {
            let p = in_ball(&mut rng, spec.blob_radius);
            let s = (spec.blob_radius * rng.random_range(0.3..0.45)).ln();
            GtGaussian {
                position: [p[0], p[1], p[2] + 0.25],
                rotation: random_rotation(&mut rng),
                log_scale: [s; 3],
                color: base.map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)),
                alpha: 0.95,
            }
        })
        .collect();
    Ok(GroundTruth {
        statics,
        dynamics,
        spec: spec.clone(),
    })
}

/// Build the scene: ring cameras, ground-truth images for every
/// (camera, timestamp) pair, and the aggregated initialization that
/// superimposes every timestamp's copy of the dynamic Gaussians.
pub fn generate_scene(spec: &SceneSpec) -> Result<Dataset> {
    let gt = ground_truth(spec)?;
    let cameras = spec.ring()?;
    let k = spec.timestamps;
    let pairs: Vec<(usize, usize)> = (0..cameras.len()).flat_map(|c| (0..k).map(move |t| (c, t))).collect();
    let per_time: Vec<Vec<GtGaussian>> = (0..k).map(|t| gt.at(t)).collect();
    let images = pairs
        .par_iter()
        .map(|&(c, t)| {
            let img = render_reference(&per_time[t], &cameras[c], [0.0; 3])?;
            // Quantize now so in-memory and on-disk datasets agree exactly.
            Ok(Image::from_rgb8(&img.to_rgb8()))
        })
        .collect::<Result<Vec<_>>>()?;
    let train_cameras = spec.cameras - spec.held_out;
    let frames = pairs
        .iter()
        .map(|&(c, t)| Frame {
            camera: c,
            timestamp: t,
            image: format!("images/cam{c}_t{t}.png"),
            train: c < train_cameras,
        })
        .collect();

    let mut init_points: Vec<InitPoint> = gt
        .statics
        .iter()
        .map(|g| InitPoint {
            position: g.position,
            color: g.color,
            dynamic: false,
            timestamp: None,
        })
        .collect();
    for t in 0..k {
        let off = spec.motion.offset(spec.time(t));
        init_points.extend(gt.dynamics.iter().map(|g| InitPoint {
            position: std::array::from_fn(|a| g.position[a] + off[a]),
            color: g.color,
            dynamic: true,
            timestamp: Some(t),
        }));
    }
    let trajectories = gt
        .dynamics
        .iter()
        .map(|g| {
            (0..k)
                .map(|t| {
                    let off = spec.motion.offset(spec.time(t));
                    std::array::from_fn(|a| g.position[a] + off[a])
                })
                .collect()
        })
        .collect();
    let manifest = Manifest {
        version: dataset::MANIFEST_VERSION,
        width: spec.width,
        height: spec.height,
        timestamps: k,
        cameras,
        frames,
        init_points,
        trajectories,
        spec: Some(spec.clone()),
    };
    manifest.validate()?;
    Ok(Dataset { manifest, images })
}
