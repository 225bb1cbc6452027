//! Tile-based differentiable rasterizer.
//!
//! Splats are depth sorted once, binned into 16×16 pixel tiles, and each pixel
//! composites its tile's list front to back:
//!
//! ```text
//! C = Σᵢ cᵢ αᵢ Πⱼ<ᵢ (1 − αⱼ) + T_final · background
//! αᵢ(p) = aᵢ · exp(−½ Δᵀ Σ'ᵢ⁻¹ Δ),  Δ = p − μᵢ
//! ```
//!
//! The backward pass replays each pixel's traversal from the saved tile lists
//! and walks it in reverse, so only the per-splat conics are stored.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Splat2D};
use crate::image::Image;

/// Splats whose post-clamp 2D covariance determinant is at or below this are skipped.
pub const MIN_COV_DET: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Per-pixel contributions with α below this are skipped.
    pub alpha_threshold: f64,
    /// Blending stops once transmittance falls below this.
    pub min_transmittance: f64,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_threshold: 1.0 / 255.0,
            min_transmittance: 1e-4,
            background: [0.0; 3],
        }
    }
}

impl RenderSettings {
    /// Both thresholds disabled: every splat touches every pixel.
    pub fn exact() -> Self {
        Self {
            alpha_threshold: 0.0,
            min_transmittance: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::InvalidInput("tile size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_threshold) || !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(Error::InvalidInput("render thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One splat ready for compositing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatInput {
    pub splat: Splat2D,
    /// Linear color in [0, 1].
    pub color: [f64; 3],
    /// Effective peak opacity in (0, 1).
    pub alpha: f64,
}

/// Gradient w.r.t. one splat's inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: Vector2<f64>,
    /// Gradient w.r.t. each entry of the 2D covariance (symmetric).
    pub cov2d: Matrix2<f64>,
    pub color: [f64; 3],
    pub alpha: f64,
}

#[derive(Clone, Debug)]
struct Prepared {
    mean: Vector2<f64>,
    /// Inverse covariance entries (a, b, c) of [[a, b], [b, c]].
    conic: [f64; 3],
    color: [f64; 3],
    alpha: f64,
    /// Powers below this certainly give α under the threshold.
    min_power: f64,
}

/// Saved state for [`render_backward`].
#[derive(Clone, Debug)]
pub struct RenderContext {
    width: usize,
    height: usize,
    settings: RenderSettings,
    n_inputs: usize,
    /// Indexed like the inputs; `None` for culled or skipped splats.
    prepared: Vec<Option<Prepared>>,
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    pub final_transmittance: Vec<f64>,
    pub context: RenderContext,
}

impl RenderOutput {
    /// `1 − T_final` per pixel.
    pub fn accumulated_alpha(&self) -> Vec<f64> {
        self.final_transmittance.iter().map(|t| 1.0 - t).collect()
    }
}

/// Stable ascending order by depth; equal depths keep input order.
pub fn depth_sort(depths: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]));
    order
}

fn prepare(s: &SplatInput, threshold: f64) -> Option<Prepared> {
    let c = &s.splat.cov2d;
    let (a, b, d) = (c[(0, 0)], 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)]);
    let det = a * d - b * b;
    if !(det > MIN_COV_DET) || !(s.alpha > 0.0) {
        return None;
    }
    Some(Prepared {
        mean: s.splat.mean2d,
        conic: [d / det, -b / det, a / det],
        color: s.color,
        alpha: s.alpha,
        // Conservative margin; the exact test still runs on the computed α.
        min_power: if threshold > 0.0 {
            (threshold / s.alpha).ln() - 1e-6
        } else {
            f64::NEG_INFINITY
        },
    })
}

/// Screen-space radius outside which the splat's α is below the threshold.
fn cutoff_radius(s: &SplatInput, threshold: f64) -> Option<f64> {
    if threshold <= 0.0 {
        return Some(f64::INFINITY);
    }
    if s.alpha < threshold {
        return None;
    }
    let c = &s.splat.cov2d;
    let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // Never tighter than 3σ; one pixel of slack absorbs rounding at the edge.
    let sigmas = (2.0 * (s.alpha / threshold).ln()).sqrt().max(3.0);
    Some(sigmas * lambda_max.sqrt() + 1.0)
}

#[derive(Clone, Copy)]
struct Hit {
    idx: u32,
    /// Position in the tile list.
    slot: usize,
    /// Gaussian falloff `exp(power)`.
    falloff: f64,
    alpha: f64,
    /// Transmittance in front of this splat.
    trans: f64,
}

#[inline]
fn falloff_power(p: &Prepared, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - p.mean.x;
    let dy = py - p.mean.y;
    let power = -0.5 * (p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy);
    (power, dx, dy)
}

impl RenderContext {
    fn tile_of(&self, x: usize, y: usize) -> usize {
        (y / self.settings.tile_size) * self.tiles_x + x / self.settings.tile_size
    }

    /// Front-to-back traversal of one pixel; returns the final transmittance.
    fn traverse(&self, x: usize, y: usize, mut visit: impl FnMut(Hit)) -> f64 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut trans = 1.0;
        for (slot, &idx) in self.tile_lists[self.tile_of(x, y)].iter().enumerate() {
            let p = self.prepared[idx as usize]
                .as_ref()
                .expect("tile lists hold prepared splats");
            let (power, _, _) = falloff_power(p, px, py);
            if power > 0.0 || power < p.min_power {
                continue;
            }
            let falloff = power.exp();
            let alpha = p.alpha * falloff;
            if alpha < self.settings.alpha_threshold {
                continue;
            }
            visit(Hit {
                idx,
                slot,
                falloff,
                alpha,
                trans,
            });
            trans *= 1.0 - alpha;
            if trans < self.settings.min_transmittance {
                break;
            }
        }
        trans
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ts = self.settings.tile_size;
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let (x0, y0) = (tx * ts, ty * ts);
        let (x1, y1) = ((x0 + ts).min(self.width), (y0 + ts).min(self.height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Composite `inputs` (indexed per Gaussian, `None` = culled) into an image
/// of the camera's size.
pub fn render_forward(inputs: &[Option<SplatInput>], cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    settings.validate()?;
    let (width, height) = (cam.width as usize, cam.height as usize);
    let ts = settings.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);

    let prepared: Vec<Option<Prepared>> = inputs
        .iter()
        .map(|s| s.as_ref().and_then(|s| prepare(s, settings.alpha_threshold)))
        .collect();

    let depths: Vec<f64> = inputs
        .iter()
        .map(|s| s.as_ref().map_or(f64::INFINITY, |s| s.splat.depth))
        .collect();
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for i in depth_sort(&depths) {
        let (Some(input), Some(_)) = (&inputs[i], &prepared[i]) else {
            continue;
        };
        let Some(r) = cutoff_radius(input, settings.alpha_threshold) else {
            continue;
        };
        let m = input.splat.mean2d;
        // Pixel centers sit at integer + 0.5.
        let range = |center: f64, count: usize| -> Option<(usize, usize)> {
            let lo = (center - r - 0.5).ceil().max(0.0);
            let hi = (center + r - 0.5).floor().min(count as f64 - 1.0);
            (lo <= hi).then(|| (lo as usize / ts, hi as usize / ts))
        };
        let (Some((tx0, tx1)), Some((ty0, ty1))) = (range(m.x, width), range(m.y, height)) else {
            continue;
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let ctx = RenderContext {
        width,
        height,
        settings: settings.clone(),
        n_inputs: inputs.len(),
        prepared,
        tiles_x,
        tile_lists,
    };

    let bg = settings.background;
    let tiles: Vec<Vec<(usize, [f64; 3], f64)>> = (0..ctx.tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            ctx.tile_pixels(tile)
                .map(|(x, y)| {
                    let mut rgb = [0.0; 3];
                    let t_final = ctx.traverse(x, y, |h| {
                        let c = &ctx.prepared[h.idx as usize].as_ref().unwrap().color;
                        let w = h.alpha * h.trans;
                        for ch in 0..3 {
                            rgb[ch] += c[ch] * w;
                        }
                    });
                    for ch in 0..3 {
                        rgb[ch] += t_final * bg[ch];
                    }
                    (y * width + x, rgb, t_final)
                })
                .collect()
        })
        .collect();

    let mut image = Image::new(width, height);
    let mut final_transmittance = vec![1.0; width * height];
    for (pix, rgb, t) in tiles.into_iter().flatten() {
        image.data[pix * 3..pix * 3 + 3].copy_from_slice(&rgb);
        final_transmittance[pix] = t;
    }
    Ok(RenderOutput {
        image,
        final_transmittance,
        context: ctx,
    })
}

/// Per-splat accumulator in conic space before conversion to covariance space.
#[derive(Clone, Copy, Default)]
struct ConicGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    alpha: f64,
}

impl ConicGrad {
    fn add(&mut self, o: &ConicGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.alpha += o.alpha;
    }
}

/// Exact reverse-mode gradients of [`render_forward`] w.r.t. every splat input.
pub fn render_backward(ctx: &RenderContext, d_image: &Image) -> Result<Vec<SplatGrad>> {
    if d_image.width != ctx.width || d_image.height != ctx.height {
        return Err(Error::Contract(format!(
            "upstream gradient is {}x{}, render was {}x{}",
            d_image.width, d_image.height, ctx.width, ctx.height
        )));
    }
    let bg = ctx.settings.background;

    // Per-tile partial sums, combined below in fixed tile order.
    let partials: Vec<Vec<ConicGrad>> = (0..ctx.tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &ctx.tile_lists[tile];
            let mut local = vec![ConicGrad::default(); list.len()];
            let mut hits: Vec<Hit> = Vec::new();
            for (x, y) in ctx.tile_pixels(tile) {
                let pix = y * ctx.width + x;
                let dc = [
                    d_image.data[pix * 3],
                    d_image.data[pix * 3 + 1],
                    d_image.data[pix * 3 + 2],
                ];
                if dc == [0.0; 3] {
                    continue;
                }
                hits.clear();
                ctx.traverse(x, y, |h| hits.push(h));
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // Color behind the current splat, as seen through it.
                let mut behind = bg;
                for h in hits.iter().rev() {
                    let p = ctx.prepared[h.idx as usize].as_ref().unwrap();
                    let g = &mut local[h.slot];
                    let w = h.alpha * h.trans;
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        g.color[ch] += dc[ch] * w;
                        d_alpha += dc[ch] * h.trans * (p.color[ch] - behind[ch]);
                    }
                    for ch in 0..3 {
                        behind[ch] = h.alpha * p.color[ch] + (1.0 - h.alpha) * behind[ch];
                    }
                    // α = a · exp(power)
                    g.alpha += d_alpha * h.falloff;
                    let d_power = d_alpha * h.alpha;
                    let (_, dx, dy) = falloff_power(p, px, py);
                    let [ca, cb, cc] = p.conic;
                    // power = −½(a dx² + 2b dx dy + c dy²), Δ = p − μ.
                    g.mean[0] += d_power * (ca * dx + cb * dy);
                    g.mean[1] += d_power * (cb * dx + cc * dy);
                    g.conic[0] += d_power * (-0.5 * dx * dx);
                    g.conic[1] += d_power * (-0.5 * dx * dy);
                    g.conic[2] += d_power * (-0.5 * dy * dy);
                }
            }
            local
        })
        .collect();

    let mut acc = vec![ConicGrad::default(); ctx.n_inputs];
    for (tile, local) in partials.iter().enumerate() {
        for (g, &i) in local.iter().zip(&ctx.tile_lists[tile]) {
            acc[i as usize].add(g);
        }
    }

    Ok(acc
        .iter()
        .zip(&ctx.prepared)
        .map(|(g, p)| {
            let Some(p) = p else {
                return SplatGrad::default();
            };
            // Q = Σ'⁻¹  ⇒  dL/dΣ' = −Q (dL/dQ) Q, with dL/dQ as a full symmetric matrix.
            let q = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
            let gq = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
            SplatGrad {
                mean2d: Vector2::new(g.mean[0], g.mean[1]),
                cov2d: -(q * gq * q),
                color: g.color,
                alpha: g.alpha,
            }
        })
        .collect())
}
