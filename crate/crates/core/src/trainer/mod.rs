//! Total loss, the three-phase optimization loop, checkpointing and
//! evaluation.

mod checkpoint;
pub mod config;
pub mod loss;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::Config;
pub use loss::{dssim_loss, l1_loss};

use crate::cloud::{init_cloud, sigmoid, softmax_backward_into, CloudParams, Column, GaussianCloud, MaskDistribution};
use crate::deform::{
    apply_deformation, apply_deformation_backward, DeformContext, DeformField, DeformShape, DeformationOutput,
    TimeGrads, TimeParams,
};
use crate::error::{Error, Result};
use crate::geometry::{project_backward, project_forward, Camera, GaussianGeometry, ProjectionContext, Quaternion};
use crate::image::Image;
use crate::nets::{adam_step, AdamConfig, AdamState, Mode};
use crate::scenes::{psnr, ssim, Dataset};
use crate::splat::{render_backward, render_forward, RenderOutput, SplatInput};
use crate::stdr::{
    reborrow, spatial_awareness_loss, temporal_smoothness_loss, Phase, SepContext, SepFeatures, SepField, SepFieldShape,
};

/// Stream used for network initialization; per-iteration streams are the
/// iteration numbers themselves.
const INIT_STREAM: u64 = u64::MAX;

/// Network blocks in checkpoint and optimizer order.
pub const NETWORK_NAMES: [&str; 4] = ["sep.shared", "sep.temporal", "sep.dynamic", "deform"];

pub const METRICS_HEADER: &str = "iteration,phase,l1,dssim,l_temp,l_spatial,total,wall_ms";

/// One iteration's loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub phase: Phase,
    pub l1: f64,
    pub dssim: f64,
    /// This step's 1/K share of the temporal smoothness loss.
    pub l_temp: f64,
    /// This step's 1/K share of the spatial KL loss.
    pub l_spatial: f64,
    pub total: f64,
}

impl LossReport {
    /// `λ·l1 + (1−λ)·dssim + λ₁·l_temp + λ₂·l_spatial`.
    pub fn recompose(&self, cfg: &config::LossConfig) -> f64 {
        cfg.lambda * self.l1
            + (1.0 - cfg.lambda) * self.dssim
            + cfg.lambda_temporal * self.l_temp
            + cfg.lambda_spatial * self.l_spatial
    }

    /// Metrics CSV row (without the trailing wall-clock column).
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.phase, self.l1, self.dssim, self.l_temp, self.l_spatial, self.total
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub cloud: GaussianCloud,
    pub sep: SepField,
    pub deform: DeformField,
    /// One per [`Column`], in [`Column::ALL`] order.
    pub cloud_adam: Vec<AdamState>,
    /// One per [`NETWORK_NAMES`] entry.
    pub net_adam: Vec<AdamState>,
    /// Next iteration to execute.
    pub iteration: u64,
    pub seed: u64,
    /// Mask distribution captured on entering the frozen phase.
    pub cached: Option<MaskDistribution>,
}

impl TrainState {
    /// Fresh state from an (aggregated) point cloud with `k` timestamps.
    pub fn new(config: Config, positions: &[[f64; 3]], colors: &[[f64; 3]], k: usize) -> Result<Self> {
        config.validate()?;
        let knn_k = if config.train.stdr { config.regularizer.knn_k } else { 0 };
        let cloud = init_cloud(positions, colors, k, knn_k, config.train.seed)?;
        Self::with_cloud(config, cloud)
    }

    /// Networks and optimizer state around an existing cloud.
    pub fn with_cloud(config: Config, cloud: GaussianCloud) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let n = &config.network;
        let sep = SepField::new(
            SepFieldShape {
                timestamps: cloud.k(),
                position_frequencies: n.position_frequencies,
                hidden_width: n.hidden_width,
                spatial_width: n.spatial_width,
                temporal_width: n.temporal_width,
                batch_norm: n.batch_norm,
                dropout: n.dropout,
            },
            &mut rng,
        )?;
        let deform = DeformField::new(
            DeformShape {
                position_frequencies: n.position_frequencies,
                time_frequencies: n.time_frequencies,
                hidden_width: n.hidden_width,
                depth: n.deform_layers,
                spatial_width: n.spatial_width,
                temporal_width: n.temporal_width,
                use_features: config.train.stdr,
                gating: n.dynamic_gating,
                deform_color: n.deform_color,
                deform_opacity: n.deform_opacity,
            },
            &mut rng,
        )?;
        let cloud_adam = Column::ALL
            .iter()
            .map(|c| AdamState::new(cloud.params.column(*c).len(), adam_config(&config, Some(*c))))
            .collect();
        let net_adam = [&sep.shared, &sep.temporal, &sep.dynamic, &deform.net]
            .iter()
            .map(|m| AdamState::new(m.num_params(), adam_config(&config, None)))
            .collect();
        Ok(Self {
            config,
            cloud,
            sep,
            deform,
            cloud_adam,
            net_adam,
            iteration: 0,
            seed,
            cached: None,
        })
    }

    pub fn k(&self) -> usize {
        self.cloud.k()
    }

    pub fn phase(&self) -> Phase {
        self.config.schedule.phase(self.iteration)
    }

    pub fn stdr(&self) -> bool {
        self.config.train.stdr
    }

    /// Parameters of the networks in [`NETWORK_NAMES`] order.
    pub fn network_params(&self) -> [&[f64]; 4] {
        [
            self.sep.shared.params(),
            self.sep.temporal.params(),
            self.sep.dynamic.params(),
            self.deform.net.params(),
        ]
    }

    fn network_mut(&mut self, i: usize) -> &mut crate::nets::Mlp {
        match i {
            0 => &mut self.sep.shared,
            1 => &mut self.sep.temporal,
            2 => &mut self.sep.dynamic,
            _ => &mut self.deform.net,
        }
    }

    pub fn network(&self, i: usize) -> &crate::nets::Mlp {
        match i {
            0 => &self.sep.shared,
            1 => &self.sep.temporal,
            2 => &self.sep.dynamic,
            _ => &self.deform.net,
        }
    }

    /// Mask distribution fed to the feature network at `phase`.
    pub fn feature_distribution(&self, phase: Phase) -> MaskDistribution {
        match (&self.cached, phase) {
            (Some(c), Phase::Frozen) => c.clone(),
            _ => self.cloud.mask_distribution(),
        }
    }
}

fn adam_config(cfg: &Config, column: Option<Column>) -> AdamConfig {
    let o = &cfg.optim;
    let lr = match column {
        Some(Column::Position) => o.lr_position,
        Some(Column::Rotation) => o.lr_rotation,
        Some(Column::LogScale) => o.lr_scale,
        Some(Column::Color) => o.lr_color,
        Some(Column::Opacity) => o.lr_opacity,
        Some(Column::Mask) => o.lr_mask,
        None => o.lr_network,
    };
    AdamConfig {
        lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
    }
}

/// Normalized time of timestamp `index` among `k`.
pub fn normalized_time(index: usize, k: usize) -> f64 {
    index as f64 / (k - 1) as f64
}

/// Gradients of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub cloud: CloudParams,
    /// Per network in [`NETWORK_NAMES`] order; all-zero when the network was unused.
    pub nets: [Vec<f64>; 4],
}

/// Saved forward pass for one view.
struct Forward {
    timestamp: usize,
    /// Distribution fed to the feature network and whether it is live (differentiable).
    probs: Option<(MaskDistribution, bool)>,
    sep: Option<(SepFeatures, SepContext)>,
    deform: Option<DeformContext>,
    time: TimeParams,
    projections: Vec<ProjectionContext>,
    base_alpha: Vec<f64>,
    modulation: Option<Vec<f64>>,
    render: RenderOutput,
}

fn forward(
    state: &TrainState,
    cam: &Camera,
    timestamp: usize,
    phase: Phase,
    mode: Mode,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Forward> {
    let k = state.k();
    if timestamp >= k {
        return Err(Error::Index {
            index: timestamp,
            len: k,
        });
    }
    let params = &state.cloud.params;
    let stdr = state.stdr();
    let t = normalized_time(timestamp, k);

    let mut probs = None;
    let mut sep = None;
    let mut deform = None;
    let time = if phase.deformation_active() {
        if stdr {
            let live = !(phase == Phase::Frozen && state.cached.is_some());
            let dist = state.feature_distribution(phase);
            sep = Some(state.sep.forward(&params.positions, &dist, mode, reborrow(&mut rng))?);
            probs = Some((dist, live));
        }
        let feats = sep.as_ref().map(|(f, _)| f);
        let (deltas, ctx) = state.deform.forward(&params.positions, feats, t, mode)?;
        deform = Some(ctx);
        apply_deformation(params, Some(&deltas))?
    } else {
        apply_deformation(params, None)?
    };

    let n = params.len();
    let modulation = stdr.then(|| {
        (0..n)
            .map(|i| sigmoid(params.mask_logits[i * k + timestamp]))
            .collect::<Vec<_>>()
    });
    let base_alpha: Vec<f64> = time.opacity_logits.iter().map(|o| sigmoid(*o)).collect();
    let projected = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = GaussianGeometry {
                position: Vector3::from(time.positions[i]),
                rotation: Quaternion::from_array(time.rotations[i]),
                log_scale: Vector3::from(time.log_scales[i]),
            };
            let (splat, ctx) = project_forward(&g, cam)?;
            let alpha = base_alpha[i] * modulation.as_ref().map_or(1.0, |m| m[i]);
            let input = splat.map(|splat| SplatInput {
                splat,
                color: time.colors[i].map(sigmoid),
                alpha,
            });
            Ok((input, ctx))
        })
        .collect::<Result<Vec<_>>>()?;
    let (inputs, projections): (Vec<_>, Vec<_>) = projected.into_iter().unzip();
    let render = render_forward(&inputs, cam, &state.config.render)?;
    Ok(Forward {
        timestamp,
        probs,
        sep,
        deform,
        time,
        projections,
        base_alpha,
        modulation,
        render,
    })
}

/// Backpropagate `d_image` through a saved forward; regularizer gradients are
/// added by the caller.
fn backward(state: &TrainState, fwd: &Forward, d_image: &Image) -> Result<Gradients> {
    let params = &state.cloud.params;
    let n = params.len();
    let k = state.k();
    let splat_grads = render_backward(&fwd.render.context, d_image)?;

    let mut grads = Gradients {
        cloud: CloudParams::zeros(n, k),
        nets: [
            vec![0.0; state.sep.shared.num_params()],
            vec![0.0; state.sep.temporal.num_params()],
            vec![0.0; state.sep.dynamic.num_params()],
            vec![0.0; state.deform.net.num_params()],
        ],
    };
    let mut dt = TimeGrads::zeros(n);
    let geo = (0..n)
        .into_par_iter()
        .map(|i| project_backward(&fwd.projections[i], &splat_grads[i].mean2d, &splat_grads[i].cov2d))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..n {
        let g = &splat_grads[i];
        dt.positions[i] = geo[i].position.into();
        dt.rotations[i] = geo[i].rotation;
        dt.log_scales[i] = geo[i].log_scale.into();
        for c in 0..3 {
            let s = sigmoid(fwd.time.colors[i][c]);
            dt.colors[i][c] = g.color[c] * s * (1.0 - s);
        }
        let a = fwd.base_alpha[i];
        let m = fwd.modulation.as_ref().map_or(1.0, |m| m[i]);
        dt.opacity_logits[i] = g.alpha * m * a * (1.0 - a);
        if fwd.modulation.is_some() {
            grads.cloud.mask_logits[i * k + fwd.timestamp] += g.alpha * a * m * (1.0 - m);
        }
    }
    let pre = apply_deformation_backward(&fwd.time, &dt);
    grads.cloud.positions.clone_from(&pre.positions);
    grads.cloud.rotations.clone_from(&pre.rotations);
    grads.cloud.log_scales.clone_from(&pre.log_scales);
    grads.cloud.colors.clone_from(&pre.colors);
    grads.cloud.opacity_logits.clone_from(&pre.opacity_logits);

    if let Some(dctx) = &fwd.deform {
        let deltas: Vec<DeformationOutput> = pre.as_deltas();
        let dg = state.deform.backward(dctx, &deltas)?;
        grads.nets[3] = dg.net;
        add_positions(&mut grads.cloud.positions, &dg.positions);
        if let Some((feats, sctx)) = &fwd.sep {
            let zeros_s;
            let d_spatial = match &dg.spatial {
                Some(m) => m,
                None => {
                    zeros_s = DMatrix::zeros(feats.spatial.nrows(), n);
                    &zeros_s
                }
            };
            let zeros_t;
            let d_temporal = match &dg.temporal {
                Some(m) => m,
                None => {
                    zeros_t = DMatrix::zeros(feats.temporal.nrows(), n);
                    &zeros_t
                }
            };
            let d_dynamic = dg.dynamic.clone().unwrap_or_else(|| vec![0.0; n]);
            let sg = state.sep.backward(sctx, d_spatial, d_temporal, &d_dynamic)?;
            let [a, b, c] = sg.nets;
            grads.nets[0] = a;
            grads.nets[1] = b;
            grads.nets[2] = c;
            add_positions(&mut grads.cloud.positions, &sg.positions);
            if let Some((dist, true)) = &fwd.probs {
                for i in 0..n {
                    let r = i * k..(i + 1) * k;
                    softmax_backward_into(
                        &dist.probs[r.clone()],
                        &sg.probs[r.clone()],
                        &mut grads.cloud.mask_logits[r],
                    );
                }
            }
        }
    }
    Ok(grads)
}

fn add_positions(acc: &mut [[f64; 3]], add: &[[f64; 3]]) {
    for (a, b) in acc.iter_mut().zip(add) {
        for j in 0..3 {
            a[j] += b[j];
        }
    }
}

/// A loss evaluation with gradients and the contexts needed to commit
/// batch-norm statistics.
pub struct Evaluation {
    pub report: LossReport,
    pub grads: Gradients,
    pub image: Image,
    sep: Option<SepContext>,
}

/// Total loss and gradients for one view at `state.iteration`'s phase.
///
/// Randomness is drawn in a fixed order: KL sampling, then dropout.
pub fn evaluate(
    state: &TrainState,
    cam: &Camera,
    timestamp: usize,
    gt: &Image,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Evaluation> {
    let phase = state.phase();
    let cfg = &state.config;
    let k = state.k();
    let masks = &state.cloud.params.mask_logits;

    // The photometric term sees one timestamp per step while the regularizers
    // span all K, so each step carries a 1/K share of them: over K steps the
    // objective is Σₜ photometricₜ + λ₁·Lt + λ₂·Ls.
    let (mut l_temp, mut l_spatial) = (0.0, 0.0);
    let mut reg_grad: Option<Vec<f64>> = None;
    if state.stdr() && phase.regularizers_active() {
        let share = 1.0 / k as f64;
        let (lt, gt_) = temporal_smoothness_loss(masks, k)?;
        l_temp = share * lt;
        let mut g: Vec<f64> = gt_.iter().map(|v| share * cfg.loss.lambda_temporal * v).collect();
        if !state.cloud.knn.is_empty() {
            let r = &cfg.regularizer;
            let (ls, gs) = spatial_awareness_loss(masks, k, &state.cloud.knn, r.sample_size, r.pair_cap, rng)?;
            l_spatial = share * ls;
            for (a, b) in g.iter_mut().zip(&gs) {
                *a += share * cfg.loss.lambda_spatial * b;
            }
        }
        reg_grad = Some(g);
    }

    let fwd = forward(state, cam, timestamp, phase, mode, Some(rng))?;
    let image = fwd.render.image.clone();
    let (l1, g1) = l1_loss(&image, gt)?;
    let (dssim, g2) = dssim_loss(&image, gt)?;
    let lambda = cfg.loss.lambda;
    let mut d_image = Image::new(image.width, image.height);
    for ((d, a), b) in d_image.data.iter_mut().zip(&g1.data).zip(&g2.data) {
        *d = lambda * a + (1.0 - lambda) * b;
    }
    let mut grads = backward(state, &fwd, &d_image)?;
    if let Some(g) = reg_grad {
        for (a, b) in grads.cloud.mask_logits.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let mut report = LossReport {
        iteration: state.iteration,
        phase,
        l1,
        dssim,
        l_temp,
        l_spatial,
        total: 0.0,
    };
    report.total = report.recompose(&cfg.loss);
    Ok(Evaluation {
        report,
        grads,
        image,
        sep: fwd.sep.map(|(_, c)| c),
    })
}

/// Render one view in eval mode at the state's current phase.
pub fn render_view(state: &TrainState, cam: &Camera, timestamp: usize) -> Result<Image> {
    Ok(forward(state, cam, timestamp, state.phase(), Mode::Eval, None)?
        .render
        .image)
}

/// The per-iteration generator: one ChaCha stream per iteration.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// One optimization step on a uniformly drawn training frame.
pub fn train_step(state: &mut TrainState, dataset: &Dataset) -> Result<LossReport> {
    let frames = dataset.train_frames();
    if frames.is_empty() {
        return Err(Error::InvalidInput("dataset has no training frames".into()));
    }
    if dataset.timestamps() != state.k() {
        return Err(Error::Validation(format!(
            "dataset has K = {} but the model has K = {}",
            dataset.timestamps(),
            state.k()
        )));
    }
    let it = state.iteration;
    let phase = state.phase();
    let stdr = state.stdr();
    let schedule = state.config.schedule;
    if stdr && phase == Phase::Frozen && state.cached.is_none() {
        state.cached = Some(state.cloud.mask_distribution());
    }
    let knn_k = state.config.regularizer.knn_k;
    if stdr && it < schedule.reg_end && it % schedule.knn_rebuild_every == 0 && state.cloud.len() > knn_k {
        state.cloud.rebuild_knn(knn_k)?;
    }

    let mut rng = iteration_rng(state.seed, it);
    let frame = frames[rng.random_range(0..frames.len())];
    let f = &dataset.manifest.frames[frame];
    let cam = &dataset.manifest.cameras[f.camera];
    let eval = evaluate(state, cam, f.timestamp, &dataset.images[frame], Mode::Train, &mut rng)?;

    for (c, column) in Column::ALL.iter().enumerate() {
        let trainable = match column {
            Column::Opacity => !stdr || phase.opacity_trainable(),
            Column::Mask => stdr && phase.masks_trainable(),
            _ => true,
        };
        if trainable {
            adam_step(
                state.cloud.params.column_mut(*column),
                eval.grads.cloud.column(*column),
                &mut state.cloud_adam[c],
            )?;
        }
    }
    let deform_on = phase.deformation_active();
    for i in 0..4 {
        let trainable = if i < 3 { stdr && deform_on } else { deform_on };
        if trainable {
            let mut adam = std::mem::replace(&mut state.net_adam[i], AdamState::new(0, AdamConfig::default()));
            let res = adam_step(state.network_mut(i).params_mut(), &eval.grads.nets[i], &mut adam);
            state.net_adam[i] = adam;
            res?;
        }
    }
    if let Some(ctx) = &eval.sep {
        let [a, b, c] = ctx.nets();
        state.sep.shared.commit_batch_stats(a);
        state.sep.temporal.commit_batch_stats(b);
        state.sep.dynamic.commit_batch_stats(c);
    }
    state.cloud.grads = eval.grads.cloud;
    state.iteration += 1;
    Ok(eval.report)
}

/// Options for [`train`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Train until the state reaches this iteration.
    pub until: u64,
    /// Append to an existing metrics file instead of starting a new one.
    pub append_metrics: bool,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

pub fn periodic_checkpoint_name(iteration: u64) -> String {
    format!("checkpoint_{iteration:06}.bin")
}

/// Run [`train_step`] until `opts.until`, streaming metrics and writing
/// checkpoints. The effective config is echoed next to them.
pub fn train(state: &mut TrainState, dataset: &Dataset, opts: &RunOptions) -> Result<()> {
    dataset.validate()?;
    let dir = &opts.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, state.config.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;

    let metrics_path = dir.join(METRICS_FILE);
    let append = opts.append_metrics && metrics_path.exists();
    let file = if append {
        OpenOptions::new().append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    if !append {
        writeln!(out, "{METRICS_HEADER}").map_err(io)?;
    }
    let every = state.config.train.checkpoint_every;
    while state.iteration < opts.until {
        let start = Instant::now();
        let report = train_step(state, dataset)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        writeln!(out, "{},{ms:.3}", report.csv_fields()).map_err(io)?;
        if every > 0 && state.iteration % every == 0 {
            save_checkpoint(state, &dir.join(periodic_checkpoint_name(state.iteration)))?;
        }
    }
    out.flush().map_err(io)?;
    save_checkpoint(state, &dir.join(CHECKPOINT_FILE))
}

/// Per-frame image quality.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub camera: usize,
    pub timestamp: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Render and score the given frames.
pub fn evaluate_frames(state: &TrainState, dataset: &Dataset, frames: &[usize]) -> Result<Vec<FrameMetrics>> {
    frames
        .iter()
        .map(|&i| {
            let f = &dataset.manifest.frames[i];
            let img = render_view(state, &dataset.manifest.cameras[f.camera], f.timestamp)?;
            Ok(FrameMetrics {
                frame: i,
                camera: f.camera,
                timestamp: f.timestamp,
                psnr: psnr(&img, &dataset.images[i])?,
                ssim: ssim(&img, &dataset.images[i])?,
            })
        })
        .collect()
}

/// Mean PSNR/SSIM; infinite PSNRs make the mean infinite.
pub fn mean_metrics(rows: &[FrameMetrics]) -> (f64, f64) {
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    )
}

/// Load a checkpoint and check it against a dataset.
pub fn load_for_dataset(path: &Path, dataset: &Dataset) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.k() != dataset.timestamps() {
        return Err(Error::Validation(format!(
            "checkpoint has K = {} but the dataset has K = {}",
            state.k(),
            dataset.timestamps()
        )));
    }
    Ok(state)
}
