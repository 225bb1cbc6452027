//! Columnar storage of the canonical Gaussian set and its spatio-temporal
//! mask logits.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{GaussianGeometry, Quaternion};

/// Opacity every Gaussian starts with.
pub const INITIAL_OPACITY: f64 = 0.1;

/// Scale used when a cloud has a single point and no neighbor distance exists.
pub const FALLBACK_SCALE: f64 = 0.01;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Adjoint of softmax for one row: `dL/dlogits = p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward_into(probs: &[f64], d_probs: &[f64], d_logits: &mut [f64]) {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    for ((dl, p), g) in d_logits.iter_mut().zip(probs).zip(d_probs) {
        *dl += p * (g - dot);
    }
}

/// Parameter columns of a cloud. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudParams {
    /// Number of timestamps (mask length).
    pub k: usize,
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    /// Pre-sigmoid colors.
    pub colors: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// Row-major `N × K`.
    pub mask_logits: Vec<f64>,
}

/// Parameter columns in checkpoint and optimizer order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Column {
    Position,
    Rotation,
    LogScale,
    Color,
    Opacity,
    Mask,
}

impl Column {
    pub const ALL: [Column; 6] = [
        Column::Position,
        Column::Rotation,
        Column::LogScale,
        Column::Color,
        Column::Opacity,
        Column::Mask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::Position => "position",
            Column::Rotation => "rotation",
            Column::LogScale => "log_scale",
            Column::Color => "color",
            Column::Opacity => "opacity",
            Column::Mask => "mask",
        }
    }
}

impl CloudParams {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            k,
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            colors: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            mask_logits: vec![0.0; n * k],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn column(&self, c: Column) -> &[f64] {
        match c {
            Column::Position => self.positions.as_flattened(),
            Column::Rotation => self.rotations.as_flattened(),
            Column::LogScale => self.log_scales.as_flattened(),
            Column::Color => self.colors.as_flattened(),
            Column::Opacity => &self.opacity_logits,
            Column::Mask => &self.mask_logits,
        }
    }

    pub fn column_mut(&mut self, c: Column) -> &mut [f64] {
        match c {
            Column::Position => self.positions.as_flattened_mut(),
            Column::Rotation => self.rotations.as_flattened_mut(),
            Column::LogScale => self.log_scales.as_flattened_mut(),
            Column::Color => self.colors.as_flattened_mut(),
            Column::Opacity => &mut self.opacity_logits,
            Column::Mask => &mut self.mask_logits,
        }
    }

    pub fn mask_row(&self, i: usize) -> &[f64] {
        &self.mask_logits[i * self.k..(i + 1) * self.k]
    }

    pub fn geometry(&self, i: usize) -> GaussianGeometry {
        GaussianGeometry {
            position: Vector3::from(self.positions[i]),
            rotation: Quaternion::from_array(self.rotations[i]),
            log_scale: Vector3::from(self.log_scales[i]),
        }
    }

    pub fn fill_zero(&mut self) {
        for c in Column::ALL {
            self.column_mut(c).fill(0.0);
        }
    }

    /// Validate column shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let shapes = [
            (Column::Rotation, 4 * n),
            (Column::LogScale, 3 * n),
            (Column::Color, 3 * n),
            (Column::Opacity, n),
            (Column::Mask, self.k * n),
        ];
        for (c, len) in shapes {
            if self.column(c).len() != len {
                return Err(Error::Contract(format!(
                    "column {} has {} values, expected {len}",
                    c.name(),
                    self.column(c).len()
                )));
            }
        }
        for c in Column::ALL {
            if let Some(pos) = self.column(c).iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite value in column {} at offset {pos}",
                    c.name()
                )));
            }
        }
        Ok(())
    }
}

/// One Gaussian's parameters, gathered from the columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub rotation: Quaternion,
    pub log_scale: [f64; 3],
    pub color: [f64; 3],
    pub opacity_logit: f64,
    pub mask_logits: Vec<f64>,
}

/// `N × k` nearest-neighbor index table.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct KnnTable {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl KnnTable {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Canonical Gaussians plus gradient accumulators and the neighbor table.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub params: CloudParams,
    pub grads: CloudParams,
    pub knn: KnnTable,
}

/// Row-wise softmax of the mask logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDistribution {
    pub k: usize,
    /// Row-major `N × K`.
    pub probs: Vec<f64>,
}

impl MaskDistribution {
    pub fn from_logits(logits: &[f64], k: usize) -> Self {
        let mut probs = vec![0.0; logits.len()];
        for (row, out) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
            softmax_into(row, out);
        }
        Self { k, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Shannon entropy (nats) of each row.
    pub fn entropies(&self) -> Vec<f64> {
        self.probs
            .chunks_exact(self.k)
            .map(|row| -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .collect()
    }
}

fn mean_neighbor_distance(points: &[[f64; 3]], i: usize, count: usize) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, p)| dist2(p, &points[i]).sqrt())
        .collect();
    let count = count.min(d.len());
    if count == 0 {
        return FALLBACK_SCALE;
    }
    d.select_nth_unstable_by(count - 1, f64::total_cmp);
    d[..count].iter().sum::<f64>() / count as f64
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Build a canonical cloud from an (aggregated) point cloud.
///
/// Rotations start at identity, scales are isotropic at the mean distance to
/// the three nearest neighbors, opacity at [`INITIAL_OPACITY`] and every mask
/// logit at zero. `colors` are in `[0, 1]` and stored pre-sigmoid. The seed is
/// kept for reproducibility bookkeeping; initialization itself draws nothing.
pub fn init_cloud(
    points: &[[f64; 3]],
    colors: &[[f64; 3]],
    k: usize,
    knn_k: usize,
    _seed: u64,
) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot initialize a cloud from zero points".into()));
    }
    if points.len() != colors.len() {
        return Err(Error::InvalidInput(format!(
            "{} points but {} colors",
            points.len(),
            colors.len()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 timestamps, got K={k}")));
    }
    let n = points.len();
    let log_scales = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = mean_neighbor_distance(points, i, 3).max(1e-7).ln();
            [s; 3]
        })
        .collect();
    let params = CloudParams {
        k,
        positions: points.to_vec(),
        rotations: vec![Quaternion::IDENTITY.to_array(); n],
        log_scales,
        colors: colors.iter().map(|c| c.map(|v| logit(v.clamp(0.02, 0.98)))).collect(),
        opacity_logits: vec![logit(INITIAL_OPACITY); n],
        mask_logits: vec![0.0; n * k],
    };
    params.validate()?;
    let knn = if knn_k > 0 && n > knn_k {
        build_knn(&params.positions, knn_k)?
    } else {
        KnnTable::default()
    };
    Ok(GaussianCloud {
        grads: CloudParams::zeros(n, k),
        params,
        knn,
    })
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        let p = &self.params;
        Gaussian {
            position: p.positions[i],
            rotation: Quaternion::from_array(p.rotations[i]),
            log_scale: p.log_scales[i],
            color: p.colors[i],
            opacity_logit: p.opacity_logits[i],
            mask_logits: p.mask_row(i).to_vec(),
        }
    }

    pub fn mask_distribution(&self) -> MaskDistribution {
        mask_distribution(self)
    }

    pub fn rebuild_knn(&mut self, k: usize) -> Result<()> {
        self.knn = build_knn(&self.params.positions, k)?;
        Ok(())
    }
}

pub fn mask_distribution(cloud: &GaussianCloud) -> MaskDistribution {
    MaskDistribution::from_logits(&cloud.params.mask_logits, cloud.k())
}

/// `sigmoid(mask_logit[i, t]) · sigmoid(opacity_logit[i])` for every Gaussian.
pub fn modulated_opacity(cloud: &GaussianCloud, t: usize) -> Result<Vec<f64>> {
    let k = cloud.k();
    if t >= k {
        return Err(Error::Index { index: t, len: k });
    }
    let p = &cloud.params;
    Ok((0..cloud.len())
        .map(|i| sigmoid(p.mask_logits[i * k + t]) * sigmoid(p.opacity_logits[i]))
        .collect())
}

/// Exhaustive k-nearest-neighbor search, self excluded, ties to the lower index.
pub fn build_knn(positions: &[[f64; 3]], k: usize) -> Result<KnnTable> {
    let n = positions.len();
    if n <= k || k == 0 {
        return Err(Error::InvalidInput(format!(
            "KNN needs more points than neighbors (N={n}, k={k})"
        )));
    }
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(&positions[i], &positions[j]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnTable {
        k,
        indices: rows.into_iter().flatten().collect(),
    })
}
