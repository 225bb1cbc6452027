//! Reconstruction losses.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenes::metrics::ssim_with_grad;

/// Mean absolute error and its (sub)gradient; ties get gradient 0.
pub fn l1_loss(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    if !pred.same_shape(gt) || pred.data.is_empty() {
        return Err(Error::InvalidInput(
            "L1 needs two non-empty images of equal shape".into(),
        ));
    }
    let n = pred.data.len() as f64;
    let mut grad = Image::new(pred.width, pred.height);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&gt.data) {
        let d = p - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// `(1 − SSIM) / 2` and its gradient.
pub fn dssim_loss(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    let (s, mut g) = ssim_with_grad(pred, gt)?;
    g.data.iter_mut().for_each(|v| *v *= -0.5);
    Ok(((1.0 - s) / 2.0, g))
}
