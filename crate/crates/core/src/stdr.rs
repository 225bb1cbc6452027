//! Spatio-temporal decoupling: the separated feature network, the two mask
//! regularizers, and the three-phase training schedule.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::cloud::{sigmoid, softmax_backward_into, KnnTable, MaskDistribution};
use crate::error::{Error, Result};
use crate::nets::{
    positional_encoding_backward, positional_encoding_batch, Activation, LayerSpec, Mlp, MlpContext, MlpSpec, Mode,
};

/// Probabilities are clamped to this before taking logs in the KL term.
pub const KL_CLAMP: f64 = 1e-8;

/// Training phase, a pure function of the iteration counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Masks learn with opacity frozen; no deformation.
    WarmUp,
    /// Full pipeline on live masks, regularizers on.
    Regularized,
    /// Masks frozen, their softmax cached and fed to the feature network.
    Frozen,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::WarmUp => "warmup",
            Phase::Regularized => "regularized",
            Phase::Frozen => "frozen",
        }
    }

    pub fn regularizers_active(self) -> bool {
        self != Phase::Frozen
    }

    pub fn opacity_trainable(self) -> bool {
        self != Phase::WarmUp
    }

    pub fn masks_trainable(self) -> bool {
        self != Phase::Frozen
    }

    pub fn deformation_active(self) -> bool {
        self != Phase::WarmUp
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub warm_up_end: u64,
    pub reg_end: u64,
    /// KNN rebuild cadence inside the regularization window.
    pub knn_rebuild_every: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warm_up_end: 3000,
            reg_end: 6000,
            knn_rebuild_every: 500,
        }
    }
}

impl Schedule {
    pub fn phase(&self, iteration: u64) -> Phase {
        if iteration < self.warm_up_end {
            Phase::WarmUp
        } else if iteration < self.reg_end {
            Phase::Regularized
        } else {
            Phase::Frozen
        }
    }
}

/// Phase for `iteration` under the default boundaries (3000 / 6000).
pub fn schedule_phase(iteration: u64) -> Phase {
    Schedule::default().phase(iteration)
}

/// Shapes of the separated feature network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SepFieldShape {
    pub timestamps: usize,
    pub position_frequencies: usize,
    pub hidden_width: usize,
    pub spatial_width: usize,
    pub temporal_width: usize,
    pub batch_norm: bool,
    pub dropout: f64,
}

/// Per-Gaussian features, one column per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct SepFeatures {
    /// Shared-trunk output.
    pub spatial: DMatrix<f64>,
    /// Temporal branch output, in (−1, 1).
    pub temporal: DMatrix<f64>,
    /// Dynamic-vs-static probability, in (0, 1).
    pub dynamic: Vec<f64>,
}

/// `f_sep`: a shared two-layer trunk over (encoded position, mask
/// distribution) feeding a tanh temporal branch and a sigmoid dynamic branch.
#[derive(Clone, Debug)]
pub struct SepField {
    shape: SepFieldShape,
    pub shared: Mlp,
    pub temporal: Mlp,
    pub dynamic: Mlp,
}

#[derive(Clone, Debug)]
pub struct SepContext {
    positions: Vec<[f64; 3]>,
    shared: MlpContext,
    temporal: MlpContext,
    dynamic: MlpContext,
}

impl SepContext {
    pub fn nets(&self) -> [&MlpContext; 3] {
        [&self.shared, &self.temporal, &self.dynamic]
    }
}

/// Gradients from [`SepField::backward`].
#[derive(Clone, Debug)]
pub struct SepGrads {
    /// Shared, temporal, dynamic parameter gradients.
    pub nets: [Vec<f64>; 3],
    pub positions: Vec<[f64; 3]>,
    /// Row-major `N × K`.
    pub probs: Vec<f64>,
}

impl SepField {
    pub fn new(shape: SepFieldShape, rng: &mut dyn RngCore) -> Result<Self> {
        let input = 6 * shape.position_frequencies + shape.timestamps;
        let relu = |width| LayerSpec {
            width,
            activation: Activation::Relu,
        };
        let shared = MlpSpec {
            input_width: input,
            layers: vec![relu(shape.hidden_width), relu(shape.spatial_width)],
            batch_norm: false,
            dropout: 0.0,
            zero_init_output: false,
        };
        let branch = |width, activation| MlpSpec {
            input_width: shape.spatial_width,
            layers: vec![relu(shape.hidden_width), LayerSpec { width, activation }],
            batch_norm: shape.batch_norm,
            dropout: shape.dropout,
            zero_init_output: false,
        };
        Ok(Self {
            shape,
            shared: Mlp::new(shared, rng)?,
            temporal: Mlp::new(branch(shape.temporal_width, Activation::Tanh), rng)?,
            dynamic: Mlp::new(branch(1, Activation::Sigmoid), rng)?,
        })
    }

    pub fn shape(&self) -> &SepFieldShape {
        &self.shape
    }

    pub fn nets(&self) -> [&Mlp; 3] {
        [&self.shared, &self.temporal, &self.dynamic]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.shared, &mut self.temporal, &mut self.dynamic]
    }

    pub fn forward(
        &self,
        positions: &[[f64; 3]],
        probs: &MaskDistribution,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(SepFeatures, SepContext)> {
        let k = self.shape.timestamps;
        if probs.k != k || probs.len() != positions.len() {
            return Err(Error::Contract(format!(
                "feature network expects {} rows of {k} probabilities, got {} of {}",
                positions.len(),
                probs.len(),
                probs.k
            )));
        }
        for (i, row) in probs.probs.chunks_exact(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Contract(format!(
                    "mask row {i} is not a probability distribution (sum {sum})"
                )));
            }
        }
        let enc = positional_encoding_batch(positions, self.shape.position_frequencies);
        let n = positions.len();
        let mut input = DMatrix::zeros(enc.nrows() + k, n);
        input.rows_mut(0, enc.nrows()).copy_from(&enc);
        for i in 0..n {
            for (d, p) in probs.row(i).iter().enumerate() {
                input[(enc.nrows() + d, i)] = *p;
            }
        }
        let (spatial, shared) = self.shared.forward(&input, mode, reborrow(&mut rng))?;
        let (temporal, temporal_ctx) = self.temporal.forward(&spatial, mode, reborrow(&mut rng))?;
        let (dynamic, dynamic_ctx) = self.dynamic.forward(&spatial, mode, reborrow(&mut rng))?;
        Ok((
            SepFeatures {
                spatial,
                temporal,
                dynamic: dynamic.iter().copied().collect(),
            },
            SepContext {
                positions: positions.to_vec(),
                shared,
                temporal: temporal_ctx,
                dynamic: dynamic_ctx,
            },
        ))
    }

    pub fn backward(
        &self,
        ctx: &SepContext,
        d_spatial: &DMatrix<f64>,
        d_temporal: &DMatrix<f64>,
        d_dynamic: &[f64],
    ) -> Result<SepGrads> {
        let n = ctx.positions.len();
        let (g_temporal, dz_t) = self.temporal.backward(&ctx.temporal, d_temporal)?;
        let d_dyn = DMatrix::from_row_slice(1, n, d_dynamic);
        let (g_dynamic, dz_d) = self.dynamic.backward(&ctx.dynamic, &d_dyn)?;
        let d_trunk = d_spatial + dz_t + dz_d;
        let (g_shared, d_input) = self.shared.backward(&ctx.shared, &d_trunk)?;
        let enc_width = 6 * self.shape.position_frequencies;
        let k = self.shape.timestamps;
        let mut positions = vec![[0.0; 3]; n];
        let mut probs = vec![0.0; n * k];
        for i in 0..n {
            let col = d_input.column(i);
            let d_enc: Vec<f64> = col.rows(0, enc_width).iter().copied().collect();
            positional_encoding_backward(
                &ctx.positions[i],
                self.shape.position_frequencies,
                &d_enc,
                &mut positions[i],
            );
            for d in 0..k {
                probs[i * k + d] = col[enc_width + d];
            }
        }
        Ok(SepGrads {
            nets: [g_shared, g_temporal, g_dynamic],
            positions,
            probs,
        })
    }
}

pub(crate) fn reborrow<'b>(rng: &'b mut Option<&mut dyn RngCore>) -> Option<&'b mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Mean squared change of the sigmoid-activated masks between adjacent
/// timestamps, averaged over all `N · (K − 1)` adjacent pairs.
///
/// Returns the loss and its gradient w.r.t. the mask logits.
pub fn temporal_smoothness_loss(mask_logits: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "temporal smoothness needs K >= 2, got {k}"
        )));
    }
    if mask_logits.len() % k != 0 {
        return Err(Error::Contract("mask logits are not a whole number of rows".into()));
    }
    let n = mask_logits.len() / k;
    let mut grad = vec![0.0; mask_logits.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / (n * (k - 1)) as f64;
    let mut loss = 0.0;
    let mut s = vec![0.0; k];
    for (row, g) in mask_logits.chunks_exact(k).zip(grad.chunks_exact_mut(k)) {
        for (si, m) in s.iter_mut().zip(row) {
            *si = sigmoid(*m);
        }
        let mut ds = vec![0.0; k];
        for t in 0..k - 1 {
            let d = s[t] - s[t + 1];
            loss += d * d;
            ds[t] += 2.0 * d;
            ds[t + 1] -= 2.0 * d;
        }
        for t in 0..k {
            g[t] = scale * ds[t] * s[t] * (1.0 - s[t]);
        }
    }
    Ok((loss * scale, grad))
}

/// Mean KL divergence `KL(p̃ᵢ ‖ p̃ⱼ)` between the softmax mask rows of sampled
/// Gaussians `i` and their KNN neighbors `j`.
///
/// `min(sample_size, N)` Gaussians are drawn without replacement, reduced so
/// that at most `pair_cap` pairs are formed. Returns the loss and its gradient
/// w.r.t. the mask logits.
pub fn spatial_awareness_loss(
    mask_logits: &[f64],
    k: usize,
    knn: &KnnTable,
    sample_size: usize,
    pair_cap: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<f64>)> {
    if knn.is_empty() || knn.k == 0 {
        return Err(Error::InvalidInput(
            "spatial regularizer needs a non-empty KNN table".into(),
        ));
    }
    if sample_size == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let n = mask_logits.len() / k;
    if knn.len() != n {
        return Err(Error::Contract(format!(
            "KNN table has {} rows for {n} Gaussians",
            knn.len()
        )));
    }
    let probs = MaskDistribution::from_logits(mask_logits, k);
    let count = sample_size.min(n).min((pair_cap / knn.k).max(1));
    let sampled = index::sample(rng, n, count);
    let pairs = (count * knn.k) as f64;

    let mut loss = 0.0;
    let mut d_probs = vec![0.0; n * k];
    for i in sampled.iter() {
        let p = probs.row(i);
        for &j in knn.neighbors(i) {
            let q = probs.row(j);
            for d in 0..k {
                let lp = p[d].max(KL_CLAMP).ln();
                let lq = q[d].max(KL_CLAMP).ln();
                loss += p[d] * (lp - lq);
                d_probs[i * k + d] += (lp - lq + if p[d] > KL_CLAMP { 1.0 } else { 0.0 }) / pairs;
                if q[d] > KL_CLAMP {
                    d_probs[j * k + d] -= p[d] / q[d] / pairs;
                }
            }
        }
    }
    let mut grad = vec![0.0; n * k];
    for i in 0..n {
        let r = i * k..(i + 1) * k;
        softmax_backward_into(&probs.probs[r.clone()], &d_probs[r.clone()], &mut grad[r]);
    }
    Ok((loss / pairs, grad))
}
