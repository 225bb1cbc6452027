//! Fully connected network over column batches (`features × batch`).
//!
//! Hidden layers run `affine → batch-norm → activation → dropout`; batch-norm
//! and dropout are switched per network and never touch the output layer.

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::cloud::sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    pub batch_norm: bool,
    /// Dropout rate on hidden layers, in [0, 1).
    pub dropout: f64,
    /// Start the output layer at zero weights and bias.
    pub zero_init_output: bool,
}

impl MlpSpec {
    /// `depth` affine layers: `depth − 1` hidden layers of `hidden` units with
    /// `hidden_act`, then an output layer with `output_act`.
    pub fn uniform(
        input_width: usize,
        hidden: usize,
        depth: usize,
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Self {
        let mut layers = vec![
            LayerSpec {
                width: hidden,
                activation: hidden_act,
            };
            depth.saturating_sub(1)
        ];
        layers.push(LayerSpec {
            width: output,
            activation: output_act,
        });
        Self {
            input_width,
            layers,
            batch_norm: false,
            dropout: 0.0,
            zero_init_output: false,
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("an MLP needs at least one layer".into()));
        }
        if self.input_width == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::InvalidInput("MLP layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    inputs: usize,
    outputs: usize,
    weight: usize,
    /// Absent on batch-norm layers, where beta plays its role.
    bias: Option<usize>,
    /// gamma at `bn`, beta at `bn + outputs`.
    bn: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    offsets: Vec<LayerOffsets>,
    params: Vec<f64>,
    running: Vec<Option<RunningStats>>,
    generation: u64,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: DMatrix<f64>,
    /// Normalized pre-activations and `1/sqrt(var + eps)` when batch-norm is on.
    bn: Option<(DMatrix<f64>, DVector<f64>)>,
    /// Activation output before dropout.
    activated: DMatrix<f64>,
    dropout: Option<DMatrix<f64>>,
}

/// Saved values from [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpContext {
    generation: u64,
    mode: Mode,
    batch: usize,
    layers: Vec<LayerCache>,
    /// Batch mean/var per batch-norm layer (train mode only).
    batch_stats: Vec<Option<RunningStats>>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut dyn RngCore) -> Result<Self> {
        spec.validate()?;
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut cursor = 0;
        let mut inputs = spec.input_width;
        let n_layers = spec.layers.len();
        for (l, layer) in spec.layers.iter().enumerate() {
            let outputs = layer.width;
            let weight = cursor;
            cursor += outputs * inputs;
            let with_bn = spec.batch_norm && l + 1 < n_layers;
            let bias = (!with_bn).then(|| {
                let at = cursor;
                cursor += outputs;
                at
            });
            let bn = with_bn.then(|| {
                let at = cursor;
                cursor += 2 * outputs;
                at
            });
            offsets.push(LayerOffsets {
                inputs,
                outputs,
                weight,
                bias,
                bn,
            });
            inputs = outputs;
        }
        let mut params = vec![0.0; cursor];
        for (l, o) in offsets.iter().enumerate() {
            let last = l + 1 == n_layers;
            if !(last && spec.zero_init_output) {
                let bound = 1.0 / (o.inputs as f64).sqrt();
                let end = o.bias.map_or(o.weight + o.outputs * o.inputs, |b| b + o.outputs);
                for p in &mut params[o.weight..end] {
                    *p = rng.random_range(-bound..=bound);
                }
            }
            if let Some(bn) = o.bn {
                params[bn..bn + o.outputs].fill(1.0);
            }
        }
        let running = offsets
            .iter()
            .map(|o| {
                o.bn.map(|_| RunningStats {
                    mean: vec![0.0; o.outputs],
                    var: vec![1.0; o.outputs],
                })
            })
            .collect();
        Ok(Self {
            spec,
            offsets,
            params,
            running,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Invalidates outstanding contexts.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Batch-norm running statistics, flattened as `[mean, var]` per layer.
    pub fn running_stats(&self) -> Vec<f64> {
        self.running
            .iter()
            .flatten()
            .flat_map(|r| r.mean.iter().chain(&r.var).copied())
            .collect()
    }

    pub fn set_running_stats(&mut self, values: &[f64]) -> Result<()> {
        let expected: usize = self.running.iter().flatten().map(|r| 2 * r.mean.len()).sum();
        if values.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} running statistics, got {}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for r in self.running.iter_mut().flatten() {
            for m in &mut r.mean {
                *m = it.next().unwrap();
            }
            for v in &mut r.var {
                *v = it.next().unwrap();
            }
        }
        self.generation += 1;
        Ok(())
    }

    fn weight(&self, o: &LayerOffsets) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(
            &self.params[o.weight..o.weight + o.outputs * o.inputs],
            o.outputs,
            o.inputs,
        )
    }

    fn vector(&self, at: usize, len: usize) -> DVectorView<'_, f64> {
        DVectorView::from_slice(&self.params[at..at + len], len)
    }

    /// Evaluate the network on the columns of `input`.
    ///
    /// Pure: train-mode batch statistics are returned in the context and only
    /// folded into the running averages by [`Mlp::commit_batch_stats`].
    pub fn forward(
        &self,
        input: &DMatrix<f64>,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(DMatrix<f64>, MlpContext)> {
        if input.nrows() != self.spec.input_width {
            return Err(Error::Contract(format!(
                "MLP expects {} input features, got {}",
                self.spec.input_width,
                input.nrows()
            )));
        }
        let batch = input.ncols();
        let n_layers = self.offsets.len();
        let dropout = self.spec.dropout;
        if mode == Mode::Train && dropout > 0.0 && n_layers > 1 && rng.is_none() {
            return Err(Error::Contract("train-mode dropout needs an rng".into()));
        }
        let mut caches = Vec::with_capacity(n_layers);
        let mut batch_stats = Vec::with_capacity(n_layers);
        let mut x = input.clone();
        for (l, o) in self.offsets.iter().enumerate() {
            let hidden = l + 1 < n_layers;
            let mut z = self.weight(o) * &x;
            if let Some(b) = o.bias {
                let bias = self.vector(b, o.outputs);
                for mut col in z.column_iter_mut() {
                    col += &bias;
                }
            }
            let mut bn_cache = None;
            let mut stats = None;
            if let Some(bn) = o.bn {
                let gamma = self.vector(bn, o.outputs);
                let beta = self.vector(bn + o.outputs, o.outputs);
                let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
                    Mode::Train => (0..o.outputs)
                        .map(|f| {
                            let row = z.row(f);
                            let m = row.sum() / batch as f64;
                            let v = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / batch as f64;
                            (m, v)
                        })
                        .unzip(),
                    Mode::Eval => {
                        let r = self.running[l].as_ref().expect("batch-norm layer has stats");
                        (r.mean.clone(), r.var.clone())
                    }
                };
                let inv_std = DVector::from_iterator(o.outputs, var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()));
                let mut xhat = z.clone();
                for f in 0..o.outputs {
                    for b in 0..batch {
                        let h = (z[(f, b)] - mean[f]) * inv_std[f];
                        xhat[(f, b)] = h;
                        z[(f, b)] = gamma[f] * h + beta[f];
                    }
                }
                bn_cache = Some((xhat, inv_std));
                if mode == Mode::Train {
                    stats = Some(RunningStats { mean, var });
                }
            }
            let act = self.spec.layers[l].activation;
            z.apply(|v| *v = act.apply(*v));
            let mut out = z.clone();
            let mut mask = None;
            if hidden && mode == Mode::Train && dropout > 0.0 {
                let rng = rng.as_mut().expect("checked above");
                let keep = 1.0 / (1.0 - dropout);
                let m = DMatrix::from_fn(
                    o.outputs,
                    batch,
                    |_, _| {
                        if rng.random::<f64>() < dropout {
                            0.0
                        } else {
                            keep
                        }
                    },
                );
                out.component_mul_assign(&m);
                mask = Some(m);
            }
            caches.push(LayerCache {
                input: x,
                bn: bn_cache,
                activated: z,
                dropout: mask,
            });
            batch_stats.push(stats);
            x = out;
        }
        Ok((
            x,
            MlpContext {
                generation: self.generation,
                mode,
                batch,
                layers: caches,
                batch_stats,
            },
        ))
    }

    /// Reverse pass. Returns `(dL/dparams, dL/dinput)`.
    pub fn backward(&self, ctx: &MlpContext, d_output: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if ctx.generation != self.generation || ctx.layers.len() != self.offsets.len() {
            return Err(Error::Contract(
                "MLP context is stale (parameters changed since forward)".into(),
            ));
        }
        if d_output.nrows() != self.spec.output_width() || d_output.ncols() != ctx.batch {
            return Err(Error::Contract(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                d_output.nrows(),
                d_output.ncols(),
                self.spec.output_width(),
                ctx.batch
            )));
        }
        let batch = ctx.batch as f64;
        let mut grads = vec![0.0; self.params.len()];
        let mut dx = d_output.clone();
        for (l, o) in self.offsets.iter().enumerate().rev() {
            let cache = &ctx.layers[l];
            if let Some(mask) = &cache.dropout {
                dx.component_mul_assign(mask);
            }
            let act = self.spec.layers[l].activation;
            let mut dz = dx;
            dz.zip_apply(&cache.activated, |d, y| *d *= act.derivative_from_output(y));
            if let (Some(bn), Some((xhat, inv_std))) = (o.bn, &cache.bn) {
                let gamma = self.vector(bn, o.outputs);
                for f in 0..o.outputs {
                    let row = dz.row(f);
                    let xrow = xhat.row(f);
                    grads[bn + f] = row.dot(&xrow);
                    grads[bn + o.outputs + f] = row.sum();
                }
                for f in 0..o.outputs {
                    let g = gamma[f];
                    match ctx.mode {
                        Mode::Train => {
                            let sum_d: f64 = dz.row(f).sum() * g;
                            let sum_dx: f64 = dz.row(f).dot(&xhat.row(f)) * g;
                            for b in 0..ctx.batch {
                                let dh = dz[(f, b)] * g;
                                dz[(f, b)] = inv_std[f] / batch * (batch * dh - sum_d - xhat[(f, b)] * sum_dx);
                            }
                        }
                        Mode::Eval => {
                            for b in 0..ctx.batch {
                                dz[(f, b)] *= g * inv_std[f];
                            }
                        }
                    }
                }
            }
            let dw = &dz * cache.input.transpose();
            grads[o.weight..o.weight + o.outputs * o.inputs].copy_from_slice(dw.as_slice());
            if let Some(b) = o.bias {
                for f in 0..o.outputs {
                    grads[b + f] = dz.row(f).sum();
                }
            }
            dx = self.weight(o).tr_mul(&dz);
        }
        Ok((grads, dx))
    }

    /// Fold a train-mode forward's batch statistics into the running averages.
    pub fn commit_batch_stats(&mut self, ctx: &MlpContext) {
        for (running, stats) in self.running.iter_mut().zip(&ctx.batch_stats) {
            let (Some(r), Some(s)) = (running.as_mut(), stats) else {
                continue;
            };
            let unbias = if ctx.batch > 1 {
                ctx.batch as f64 / (ctx.batch as f64 - 1.0)
            } else {
                1.0
            };
            for f in 0..r.mean.len() {
                r.mean[f] = (1.0 - BN_MOMENTUM) * r.mean[f] + BN_MOMENTUM * s.mean[f];
                r.var[f] = (1.0 - BN_MOMENTUM) * r.var[f] + BN_MOMENTUM * s.var[f] * unbias;
            }
        }
        self.generation += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::uniform(3, 4, 2, 2, Activation::Relu, Activation::Relu);
        let mut net = Mlp::new(spec, &mut rng()).unwrap();
        net.params_mut().fill(0.0);
        let x = DMatrix::from_fn(3, 5, |r, c| (r + c) as f64);
        let (y, _) = net.forward(&x, Mode::Eval, None).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let spec = MlpSpec::uniform(3, 0, 1, 3, Activation::Identity, Activation::Identity);
        let mut net = Mlp::new(spec, &mut rng()).unwrap();
        let p = net.params_mut();
        p.fill(0.0);
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = DMatrix::from_fn(3, 4, |r, c| r as f64 - c as f64 * 0.5);
        let (y, _) = net.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn width_mismatch_is_contract_violation() {
        let net = Mlp::new(
            MlpSpec::uniform(3, 4, 2, 1, Activation::Relu, Activation::Identity),
            &mut rng(),
        )
        .unwrap();
        assert!(matches!(
            net.forward(&DMatrix::zeros(2, 1), Mode::Eval, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_upstream_zero_gradients_and_stale_context() {
        let mut spec = MlpSpec::uniform(3, 5, 3, 2, Activation::Tanh, Activation::Sigmoid);
        spec.batch_norm = true;
        let mut net = Mlp::new(spec, &mut rng()).unwrap();
        let x = DMatrix::from_fn(3, 6, |r, c| ((r * 5 + c * 3) % 7) as f64 / 7.0);
        let (_, ctx) = net.forward(&x, Mode::Train, None).unwrap();
        let (g, dx) = net.backward(&ctx, &DMatrix::zeros(2, 6)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0) && dx.iter().all(|v| *v == 0.0));
        net.params_mut()[0] += 1.0;
        assert!(matches!(
            net.backward(&ctx, &DMatrix::zeros(2, 6)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dropout_rate_zero_equals_eval() {
        let spec = MlpSpec::uniform(4, 8, 3, 2, Activation::Relu, Activation::Identity);
        let net = Mlp::new(spec, &mut rng()).unwrap();
        let x = DMatrix::from_fn(4, 7, |r, c| (r as f64 - 1.5) * (c as f64 - 3.0) * 0.1);
        let (a, _) = net.forward(&x, Mode::Train, Some(&mut rng())).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_needs_rng_and_scales_survivors() {
        let mut spec = MlpSpec::uniform(2, 64, 2, 64, Activation::Identity, Activation::Identity);
        spec.dropout = 0.5;
        let net = Mlp::new(spec, &mut rng()).unwrap();
        let x = DMatrix::from_element(2, 3, 1.0);
        assert!(net.forward(&x, Mode::Train, None).is_err());
        let (_, ctx) = net.forward(&x, Mode::Train, Some(&mut rng())).unwrap();
        let mask = ctx.layers[0].dropout.as_ref().unwrap();
        assert!(mask.iter().all(|m| *m == 0.0 || *m == 2.0));
        assert!(mask.iter().any(|m| *m == 0.0) && mask.iter().any(|m| *m == 2.0));
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut spec = MlpSpec::uniform(3, 4, 3, 1, Activation::Relu, Activation::Identity);
        spec.batch_norm = true;
        let mut net = Mlp::new(spec, &mut rng()).unwrap();
        let x = DMatrix::from_fn(3, 5, |r, c| (r * c) as f64 * 0.3 - 0.4);
        let (_, ctx) = net.forward(&x, Mode::Train, None).unwrap();
        net.commit_batch_stats(&ctx);
        let before = net.running_stats();
        let (a, _) = net.forward(&x, Mode::Eval, None).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, net.running_stats());
        assert_ne!(
            before,
            Mlp::new(net.spec().clone(), &mut rng()).unwrap().running_stats()
        );
    }

    #[test]
    fn zero_init_output_layer() {
        let mut spec = MlpSpec::uniform(3, 4, 3, 2, Activation::Relu, Activation::Identity);
        spec.zero_init_output = true;
        let net = Mlp::new(spec, &mut rng()).unwrap();
        let (y, _) = net
            .forward(&DMatrix::from_element(3, 2, 0.7), Mode::Eval, None)
            .unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }
}
