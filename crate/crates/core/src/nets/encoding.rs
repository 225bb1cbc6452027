use std::f64::consts::PI;

use nalgebra::DMatrix;

/// Frequency encoding of `v` with `freqs` octaves.
///
/// Layout: for each input dimension `d`, for `k = 0..freqs`:
/// `sin(2ᵏ π v_d), cos(2ᵏ π v_d)`. Output length is `2 · freqs · v.len()`.
pub fn positional_encoding(v: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs * v.len());
    for &x in v {
        let mut w = PI;
        for _ in 0..freqs {
            let (s, c) = (w * x).sin_cos();
            out.push(s);
            out.push(c);
            w *= 2.0;
        }
    }
    out
}

/// Adjoint of [`positional_encoding`]: accumulates `dL/dv` into `d_v`.
pub fn positional_encoding_backward(v: &[f64], freqs: usize, d_out: &[f64], d_v: &mut [f64]) {
    let mut o = 0;
    for (x, dx) in v.iter().zip(d_v.iter_mut()) {
        let mut w = PI;
        for _ in 0..freqs {
            let (s, c) = (w * x).sin_cos();
            *dx += w * (c * d_out[o] - s * d_out[o + 1]);
            o += 2;
            w *= 2.0;
        }
    }
}

/// Encode each row of `rows` into a column of the returned
/// `(2·freqs·dim) × rows.len()` matrix.
pub fn positional_encoding_batch<const D: usize>(rows: &[[f64; D]], freqs: usize) -> DMatrix<f64> {
    let width = 2 * freqs * D;
    let mut data = Vec::with_capacity(width * rows.len());
    for r in rows {
        data.extend(positional_encoding(r, freqs));
    }
    DMatrix::from_vec(width, rows.len(), data)
}
