//! PSNR and SSIM, plus the SSIM gradient used by the D-SSIM loss.
//!
//! SSIM is evaluated over the valid region only (no padding): every 11×11
//! window fully inside the image contributes one map entry.

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 · log10(1 / MSE)`; `+∞` for identical images.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mse = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(ssim_impl(pred, gt, false)?.0)
}

/// SSIM and its gradient w.r.t. `pred`.
pub fn ssim_with_grad(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(pred, gt, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn check_shapes(pred: &Image, gt: &Image) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::InvalidInput(format!(
            "image shapes differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if pred.data.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-region separable filter of one `w × h` plane.
fn filter(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`]: scatter a valid-region map back onto the plane.
fn filter_adjoint(map: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for k in 0..SSIM_WINDOW {
                rows[(y + k) * ow + x] += taps[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += taps[k] * v;
            }
        }
    }
    out
}

fn ssim_impl(pred: &Image, gt: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_shapes(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let taps = gaussian_window();
    let count = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW) * Image::CHANNELS) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..Image::CHANNELS {
        let x: Vec<f64> = pred.data.iter().skip(c).step_by(Image::CHANNELS).copied().collect();
        let y: Vec<f64> = gt.data.iter().skip(c).step_by(Image::CHANNELS).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, my) = (filter(&x, w, h, &taps), filter(&y, w, h, &taps));
        let (exx, eyy, exy) = (
            filter(&xx, w, h, &taps),
            filter(&yy, w, h, &taps),
            filter(&xy, w, h, &taps),
        );
        let m = mx.len();
        let (mut da, mut db, mut dc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for q in 0..m {
            let (ux, uy) = (mx[q], my[q]);
            let vx = exx[q] - ux * ux;
            let vy = eyy[q] - uy * uy;
            let cxy = exy[q] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dux = s * (2.0 * uy / n1 - 2.0 * ux / d1);
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * s / n2;
                // Chain through vx = E[x²] − μx² and cxy = E[xy] − μx μy.
                da[q] = (ds_dux - 2.0 * ux * ds_dvx - uy * ds_dcxy) / count;
                db[q] = ds_dvx / count;
                dc[q] = ds_dcxy / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ga = filter_adjoint(&da, w, h, &taps);
            let gb = filter_adjoint(&db, w, h, &taps);
            let gc = filter_adjoint(&dc, w, h, &taps);
            for p in 0..w * h {
                g.data[p * Image::CHANNELS + c] = ga[p] + 2.0 * x[p] * gb[p] + y[p] * gc[p];
            }
        }
    }
    Ok((total / count, grad))
}
