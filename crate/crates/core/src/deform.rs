//! Deformation field `f_def` and residual application.
//!
//! Timestamps are normalized as `t = index / (K − 1)`.

use nalgebra::DMatrix;
use rand::RngCore;

use crate::cloud::CloudParams;
use crate::error::{Error, Result};
use crate::geometry::{normalize_backward, Quaternion};
use crate::nets::{
    positional_encoding, positional_encoding_backward, positional_encoding_batch, Activation, Mlp, MlpContext, MlpSpec,
    Mode,
};
use crate::stdr::SepFeatures;

/// Residual update for one Gaussian. Disabled channels stay exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformationOutput {
    pub dx: [f64; 3],
    pub dr: [f64; 4],
    pub ds: [f64; 3],
    pub dc: [f64; 3],
    pub dalpha: f64,
}

impl DeformationOutput {
    fn write(&self, out: &mut [f64], color: bool, opacity: bool) {
        out[0..3].copy_from_slice(&self.dx);
        out[3..7].copy_from_slice(&self.dr);
        out[7..10].copy_from_slice(&self.ds);
        let mut o = 10;
        if color {
            out[o..o + 3].copy_from_slice(&self.dc);
            o += 3;
        }
        if opacity {
            out[o] = self.dalpha;
        }
    }

    fn read(v: &[f64], color: bool, opacity: bool) -> Self {
        let mut d = DeformationOutput {
            dx: [v[0], v[1], v[2]],
            dr: [v[3], v[4], v[5], v[6]],
            ds: [v[7], v[8], v[9]],
            ..Default::default()
        };
        let mut o = 10;
        if color {
            d.dc = [v[o], v[o + 1], v[o + 2]];
            o += 3;
        }
        if opacity {
            d.dalpha = v[o];
        }
        d
    }
}

/// Shape and wiring of the deformation network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformShape {
    pub position_frequencies: usize,
    pub time_frequencies: usize,
    pub hidden_width: usize,
    /// Number of affine layers.
    pub depth: usize,
    /// Feature widths; ignored when `use_features` is off.
    pub spatial_width: usize,
    pub temporal_width: usize,
    /// Feed `(z_s, z_t)` from the feature network; off for the baseline.
    pub use_features: bool,
    /// Scale residuals by the dynamic probability.
    pub gating: bool,
    pub deform_color: bool,
    pub deform_opacity: bool,
}

impl DeformShape {
    pub fn input_width(&self) -> usize {
        let features = if self.use_features {
            self.spatial_width + self.temporal_width
        } else {
            0
        };
        6 * self.position_frequencies + features + 2 * self.time_frequencies
    }

    pub fn output_width(&self) -> usize {
        10 + 3 * usize::from(self.deform_color) + usize::from(self.deform_opacity)
    }
}

#[derive(Clone, Debug)]
pub struct DeformField {
    shape: DeformShape,
    pub net: Mlp,
}

#[derive(Clone, Debug)]
pub struct DeformContext {
    positions: Vec<[f64; 3]>,
    t: f64,
    /// Ungated network output, one column per Gaussian.
    raw: DMatrix<f64>,
    /// Gate per Gaussian when gating applied.
    gate: Option<Vec<f64>>,
    net: MlpContext,
}

/// Gradients from [`DeformField::backward`].
#[derive(Clone, Debug)]
pub struct DeformGrads {
    pub net: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    /// Present when features were fed in.
    pub spatial: Option<DMatrix<f64>>,
    pub temporal: Option<DMatrix<f64>>,
    /// Present when gating was applied.
    pub dynamic: Option<Vec<f64>>,
    pub t: f64,
}

impl DeformField {
    pub fn new(shape: DeformShape, rng: &mut dyn RngCore) -> Result<Self> {
        if shape.depth < 2 {
            return Err(Error::InvalidParameter(
                "deformation network needs at least 2 layers".into(),
            ));
        }
        let mut spec = MlpSpec::uniform(
            shape.input_width(),
            shape.hidden_width,
            shape.depth,
            shape.output_width(),
            Activation::Relu,
            Activation::Identity,
        );
        spec.zero_init_output = true;
        Ok(Self {
            shape,
            net: Mlp::new(spec, rng)?,
        })
    }

    pub fn shape(&self) -> &DeformShape {
        &self.shape
    }

    pub fn forward(
        &self,
        positions: &[[f64; 3]],
        features: Option<&SepFeatures>,
        t: f64,
        mode: Mode,
    ) -> Result<(Vec<DeformationOutput>, DeformContext)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("timestamp {t} outside [0, 1]")));
        }
        let s = &self.shape;
        let n = positions.len();
        let features = match (s.use_features, features) {
            (true, Some(f)) => {
                if f.spatial.shape() != (s.spatial_width, n)
                    || f.temporal.shape() != (s.temporal_width, n)
                    || f.dynamic.len() != n
                {
                    return Err(Error::Contract("feature batch does not match deformation input".into()));
                }
                Some(f)
            }
            (true, None) => return Err(Error::Contract("deformation network expects features".into())),
            (false, _) => None,
        };
        let enc = positional_encoding_batch(positions, s.position_frequencies);
        let time = positional_encoding(&[t], s.time_frequencies);
        let mut input = DMatrix::zeros(s.input_width(), n);
        let mut row = enc.nrows();
        input.rows_mut(0, row).copy_from(&enc);
        if let Some(f) = features {
            input.rows_mut(row, s.spatial_width).copy_from(&f.spatial);
            row += s.spatial_width;
            input.rows_mut(row, s.temporal_width).copy_from(&f.temporal);
            row += s.temporal_width;
        }
        for (j, v) in time.iter().enumerate() {
            input.row_mut(row + j).fill(*v);
        }
        // No dropout in this network, so no randomness is needed.
        let (raw, net) = self.net.forward(&input, mode, None)?;
        let gate = match features {
            Some(f) if s.gating => Some(f.dynamic.clone()),
            _ => None,
        };
        let outputs = (0..n)
            .map(|i| {
                let mut d = DeformationOutput::read(raw.column(i).as_slice(), s.deform_color, s.deform_opacity);
                if let Some(g) = &gate {
                    scale(&mut d, g[i]);
                }
                d
            })
            .collect();
        Ok((
            outputs,
            DeformContext {
                positions: positions.to_vec(),
                t,
                raw,
                gate,
                net,
            },
        ))
    }

    pub fn backward(&self, ctx: &DeformContext, d_out: &[DeformationOutput]) -> Result<DeformGrads> {
        let s = &self.shape;
        let n = ctx.positions.len();
        if d_out.len() != n {
            return Err(Error::Contract(format!(
                "{} residual gradients for {n} Gaussians",
                d_out.len()
            )));
        }
        let width = s.output_width();
        let mut d_raw = DMatrix::zeros(width, n);
        let mut d_gate = ctx.gate.as_ref().map(|_| vec![0.0; n]);
        let mut buf = vec![0.0; width];
        for i in 0..n {
            d_out[i].write(&mut buf, s.deform_color, s.deform_opacity);
            if let (Some(g), Some(dg)) = (&ctx.gate, d_gate.as_mut()) {
                dg[i] = buf.iter().zip(ctx.raw.column(i).iter()).map(|(a, b)| a * b).sum();
                buf.iter_mut().for_each(|v| *v *= g[i]);
            }
            d_raw.column_mut(i).copy_from_slice(&buf);
        }
        let (net, d_input) = self.net.backward(&ctx.net, &d_raw)?;

        let enc_width = 6 * s.position_frequencies;
        let mut positions = vec![[0.0; 3]; n];
        for (i, p) in positions.iter_mut().enumerate() {
            let col = d_input.column(i);
            positional_encoding_backward(
                &ctx.positions[i],
                s.position_frequencies,
                &col.as_slice()[..enc_width],
                p,
            );
        }
        let mut row = enc_width;
        let (spatial, temporal) = if s.use_features {
            let sp = d_input.rows(row, s.spatial_width).into_owned();
            row += s.spatial_width;
            let tp = d_input.rows(row, s.temporal_width).into_owned();
            row += s.temporal_width;
            (Some(sp), Some(tp))
        } else {
            (None, None)
        };
        let tw = 2 * s.time_frequencies;
        let d_time: Vec<f64> = (0..tw).map(|j| d_input.row(row + j).sum()).collect();
        let mut t = [0.0];
        positional_encoding_backward(&[ctx.t], s.time_frequencies, &d_time, &mut t);
        Ok(DeformGrads {
            net,
            positions,
            spatial,
            temporal,
            dynamic: d_gate,
            t: t[0],
        })
    }
}

fn scale(d: &mut DeformationOutput, g: f64) {
    d.dx.iter_mut()
        .chain(&mut d.dr)
        .chain(&mut d.ds)
        .chain(&mut d.dc)
        .for_each(|v| *v *= g);
    d.dalpha *= g;
}

/// Time-specific parameters produced by [`apply_deformation`].
#[derive(Clone, Debug, PartialEq)]
pub struct TimeParams {
    pub positions: Vec<[f64; 3]>,
    /// Unit quaternions.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// Norm of `r + δr` before renormalization.
    pub rotation_norms: Vec<f64>,
}

/// Gradients w.r.t. time-specific parameters; `rotations` refers to the unit
/// quaternion on input to [`apply_deformation_backward`] and to the
/// pre-normalization sum on output.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
}

impl TimeGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            colors: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
        }
    }

    /// The same gradients viewed as residual gradients (all updates are
    /// additive, so canonical and residual gradients coincide).
    pub fn as_deltas(&self) -> Vec<DeformationOutput> {
        (0..self.positions.len())
            .map(|i| DeformationOutput {
                dx: self.positions[i],
                dr: self.rotations[i],
                ds: self.log_scales[i],
                dc: self.colors[i],
                dalpha: self.opacity_logits[i],
            })
            .collect()
    }
}

/// Add residuals to the canonical parameters; `None` means identity. The
/// quaternion sum is renormalized. The canonical parameters are not touched.
pub fn apply_deformation(params: &CloudParams, deltas: Option<&[DeformationOutput]>) -> Result<TimeParams> {
    let n = params.len();
    if let Some(d) = deltas {
        if d.len() != n {
            return Err(Error::Contract(format!("{} residuals for {n} Gaussians", d.len())));
        }
    }
    let zero = DeformationOutput::default();
    let delta = |i: usize| deltas.map_or(&zero, |d| &d[i]);
    let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let mut out = TimeParams {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        opacity_logits: Vec::with_capacity(n),
        rotation_norms: Vec::with_capacity(n),
    };
    for i in 0..n {
        let d = delta(i);
        out.positions.push(add(params.positions[i], d.dx));
        let r = params.rotations[i];
        let q = Quaternion::from_array(std::array::from_fn(|j| r[j] + d.dr[j]));
        out.rotations.push(q.normalized()?.to_array());
        out.rotation_norms.push(q.norm());
        out.log_scales.push(add(params.log_scales[i], d.ds));
        out.colors.push(add(params.colors[i], d.dc));
        out.opacity_logits.push(params.opacity_logits[i] + d.dalpha);
    }
    Ok(out)
}

/// Adjoint of [`apply_deformation`]; the result applies equally to the
/// canonical parameters and to the residuals.
pub fn apply_deformation_backward(tp: &TimeParams, d: &TimeGrads) -> TimeGrads {
    let mut out = d.clone();
    for (i, r) in out.rotations.iter_mut().enumerate() {
        *r = normalize_backward(&tp.rotations[i], tp.rotation_norms[i], &d.rotations[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape() -> DeformShape {
        DeformShape {
            position_frequencies: 2,
            time_frequencies: 2,
            hidden_width: 8,
            depth: 3,
            spatial_width: 3,
            temporal_width: 2,
            use_features: true,
            gating: true,
            deform_color: false,
            deform_opacity: false,
        }
    }

    fn features(n: usize, rng: &mut impl Rng) -> SepFeatures {
        SepFeatures {
            spatial: DMatrix::from_fn(3, n, |_, _| rng.random_range(0.0..1.0)),
            temporal: DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0)),
            dynamic: (0..n).map(|_| rng.random_range(0.1..0.9)).collect(),
        }
    }

    #[test]
    fn zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let field = DeformField::new(shape(), &mut rng).unwrap();
        let f = features(4, &mut rng);
        let pos = vec![[0.1, 0.2, 0.3]; 4];
        let (out, _) = field.forward(&pos, Some(&f), 0.5, Mode::Eval).unwrap();
        assert!(out.iter().all(|d| *d == DeformationOutput::default()));
        assert!(field.forward(&pos, Some(&f), 1.5, Mode::Eval).is_err());
        assert!(field.forward(&pos, Some(&f), -0.1, Mode::Eval).is_err());
    }

    #[test]
    fn apply_examples() {
        let mut p = CloudParams::zeros(2, 2);
        p.rotations = vec![[1.0, 0.0, 0.0, 0.0]; 2];
        p.positions = vec![[0.3, -0.2, 1.7], [2.0, 0.1, 0.5]];
        let before = p.clone();
        let tp = apply_deformation(&p, Some(&[DeformationOutput::default(); 2])).unwrap();
        assert_eq!(tp.positions, p.positions);
        assert_eq!(tp.rotations, p.rotations);
        assert_eq!(tp, apply_deformation(&p, None).unwrap());
        let mut d = [DeformationOutput::default(); 2];
        d[1].dx = [1.0, 0.0, 0.0];
        let tp = apply_deformation(&p, Some(&d)).unwrap();
        assert_eq!(tp.positions[1], [3.0, 0.1, 0.5]);
        assert_eq!(p, before);
        d[0].dr = [-1.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            apply_deformation(&p, Some(&d)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut field = DeformField::new(shape(), &mut rng).unwrap();
        let w: Vec<f64> = (0..field.net.num_params())
            .map(|_| rng.random_range(-0.8..0.8))
            .collect();
        field.net.set_params(&w).unwrap();
        let n = 3;
        let f = features(n, &mut rng);
        let pos: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let t = 0.37;
        let up: Vec<DeformationOutput> = (0..n)
            .map(|_| DeformationOutput {
                dx: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                dr: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                ds: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                ..Default::default()
            })
            .collect();
        let loss = |field: &DeformField, pos: &[[f64; 3]], f: &SepFeatures, t: f64| -> f64 {
            let (out, _) = field.forward(pos, Some(f), t, Mode::Eval).unwrap();
            let mut s = 0.0;
            for (o, u) in out.iter().zip(&up) {
                for j in 0..3 {
                    s += o.dx[j] * u.dx[j] + o.ds[j] * u.ds[j];
                }
                for j in 0..4 {
                    s += o.dr[j] * u.dr[j];
                }
            }
            s
        };
        let (_, ctx) = field.forward(&pos, Some(&f), t, Mode::Eval).unwrap();
        let g = field.backward(&ctx, &up).unwrap();
        let h = 1e-6;
        let check = |a: f64, num: f64, what: &str| {
            assert!(rel_err(a, num, 1e-8) < 1e-4, "{what}: {a} vs {num}");
        };
        let num = central_difference(|v| loss(&field, &pos, &f, v), t, h);
        check(g.t, num, "t");
        for i in 0..n {
            for a in 0..3 {
                let num = central_difference(
                    |v| {
                        let mut p = pos.clone();
                        p[i][a] = v;
                        loss(&field, &p, &f, t)
                    },
                    pos[i][a],
                    h,
                );
                check(g.positions[i][a], num, "x");
            }
            let num = central_difference(
                |v| {
                    let mut f2 = f.clone();
                    f2.dynamic[i] = v;
                    loss(&field, &pos, &f2, t)
                },
                f.dynamic[i],
                h,
            );
            check(g.dynamic.as_ref().unwrap()[i], num, "p_dyn");
            let num = central_difference(
                |v| {
                    let mut f2 = f.clone();
                    f2.temporal[(1, i)] = v;
                    loss(&field, &pos, &f2, t)
                },
                f.temporal[(1, i)],
                h,
            );
            check(g.temporal.as_ref().unwrap()[(1, i)], num, "z_t");
        }
        for k in (0..w.len()).step_by(7) {
            let num = central_difference(
                |v| {
                    let mut fd = field.clone();
                    fd.net.params_mut()[k] = v;
                    loss(&fd, &pos, &f, t)
                },
                w[k],
                h,
            );
            check(g.net[k], num, "weight");
        }
    }

    #[test]
    fn apply_backward_matches_finite_differences() {
        let mut p = CloudParams::zeros(1, 2);
        p.rotations = vec![[0.9, -0.3, 0.4, 0.2]];
        let d = [DeformationOutput {
            dr: [0.1, 0.2, -0.1, 0.05],
            ..Default::default()
        }];
        let tp = apply_deformation(&p, Some(&d)).unwrap();
        let up = [0.3, -0.7, 0.2, 0.5];
        let mut dt = TimeGrads::zeros(1);
        dt.rotations[0] = up;
        let g = apply_deformation_backward(&tp, &dt);
        for j in 0..4 {
            let num = central_difference(
                |v| {
                    let mut d2 = d;
                    d2[0].dr[j] = v;
                    let r = apply_deformation(&p, Some(&d2)).unwrap().rotations[0];
                    (0..4).map(|a| r[a] * up[a]).sum()
                },
                d[0].dr[j],
                1e-6,
            );
            assert!(rel_err(g.rotations[0][j], num, 1e-8) < 1e-6);
        }
    }
}
