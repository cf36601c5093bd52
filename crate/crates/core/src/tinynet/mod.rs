//! Small from-scratch classifier used to measure candidate fitness.
//!
//! Supports same-padded 2D convolution, 2×2 max-pool, batch norm, dropout,
//! dense layers, the four gene activations and a softmax cross-entropy
//! head trained with plain SGD. Data layout is row-major `[n, c, h, w]`
//! for images and `[n, features]` after flattening.

mod layers;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{Activation, ContinuousParams, Genome};
use layers::{BnForward, ConvGeom, BN_EPS};

pub use train::{
    accuracy, grad_check, grad_check_with, train_with_early_stop, EarlyStopper, GradCheckReport,
    TrainConfig, TrainOutcome,
};

pub const BN_MOMENTUM: f64 = 0.9;

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape {
                expected: shape,
                got: vec![values.len()],
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Leading (batch) dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.row_len();
        &self.values[i * l..(i + 1) * l]
    }

    /// Gathers the given rows into a new batch.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let l = self.row_len();
        let mut values = Vec::with_capacity(idx.len() * l);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
    BatchNorm {
        channels: usize,
        spatial: usize,
    },
    Activation(Activation),
    MaxPool {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flatten {
        features: usize,
    },
    Dense {
        inputs: usize,
        units: usize,
    },
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    fn out_len(&self, in_len: usize) -> usize {
        match *self {
            LayerSpec::Conv {
                filters,
                height,
                width,
                ..
            } => filters * height * width,
            LayerSpec::MaxPool {
                channels,
                height,
                width,
            } => channels * (height / 2) * (width / 2),
            LayerSpec::Dense { units, .. } => units,
            _ => in_len,
        }
    }

    fn short(&self) -> String {
        match self {
            LayerSpec::Conv { filters, kernel, .. } => format!("conv {filters}@{kernel}"),
            LayerSpec::BatchNorm { .. } => "batch_norm".into(),
            LayerSpec::Activation(a) => a.name().into(),
            LayerSpec::MaxPool { .. } => "max_pool".into(),
            LayerSpec::Flatten { .. } => "flatten".into(),
            LayerSpec::Dense { units, .. } => format!("dense {units}"),
            LayerSpec::Dropout { .. } => "dropout".into(),
        }
    }
}

/// Ordered layer list plus bookkeeping about what the builder dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// 1-based positions (among active conv blocks) whose max-pool was
    /// skipped because it would shrink a spatial dimension below 1.
    pub skipped_pools: Vec<usize>,
}

impl NetworkSpec {
    /// Coarse description: weight layers and flatten only, final dense
    /// marked `+softmax`.
    pub fn summary(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Flatten { .. } | LayerSpec::Dense { .. }))
            .map(LayerSpec::short)
            .collect();
        if let Some(last) = out.last_mut() {
            last.push_str("+softmax");
        }
        out
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv {
                    in_channels,
                    filters,
                    kernel,
                    ..
                } => filters * in_channels * kernel * kernel + filters,
                LayerSpec::Dense { inputs, units } => inputs * units + units,
                LayerSpec::BatchNorm { channels, .. } => 2 * channels,
                _ => 0,
            })
            .sum()
    }
}

/// Incremental construction of a [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct SpecBuilder {
    spec: NetworkSpec,
    /// `(channels, h, w)` while still spatial, `None` once flattened.
    spatial: Option<(usize, usize, usize)>,
    features: usize,
    conv_blocks: usize,
    dropout_rate: f64,
    /// Network input size; every kernel must fit inside it. Deeper maps
    /// may be smaller than the kernel since convolutions are zero padded.
    input_hw: (usize, usize),
}

impl SpecBuilder {
    pub fn new(input_shape: &[usize], n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Build(format!("need at least 2 classes, got {n_classes}")));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Build(format!("invalid input shape {input_shape:?}")));
        }
        let spatial = match *input_shape {
            [c, h, w] => Some((c, h, w)),
            [h, w] => Some((1, h, w)),
            _ => None,
        };
        Ok(Self {
            spec: NetworkSpec {
                input_shape: input_shape.to_vec(),
                n_classes,
                layers: Vec::new(),
                skipped_pools: Vec::new(),
            },
            spatial,
            features: input_shape.iter().product(),
            conv_blocks: 0,
            dropout_rate: 0.5,
            input_hw: spatial.map_or((0, 0), |(_, h, w)| (h, w)),
        })
    }

    pub fn dropout_rate(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    /// conv → [batch norm] → activation → [2×2 max-pool]
    pub fn conv(&mut self, filters: usize, kernel: usize, act: Activation, bn: bool, pool: bool) -> Result<&mut Self> {
        self.conv_blocks += 1;
        let block = self.conv_blocks;
        let Some((c, h, w)) = self.spatial else {
            return Err(Error::Build(format!("conv layer {block}: input is not an image")));
        };
        if filters == 0 {
            return Err(Error::Build(format!("conv layer {block}: zero filters")));
        }
        let (ih, iw) = self.input_hw;
        if ih < kernel || iw < kernel {
            return Err(Error::Build(format!(
                "conv layer {block}: {ih}x{iw} input smaller than kernel {kernel}"
            )));
        }
        self.spec.layers.push(LayerSpec::Conv {
            in_channels: c,
            filters,
            kernel,
            height: h,
            width: w,
        });
        if bn {
            self.spec.layers.push(LayerSpec::BatchNorm {
                channels: filters,
                spatial: h * w,
            });
        }
        self.spec.layers.push(LayerSpec::Activation(act));
        let (mut h, mut w) = (h, w);
        if pool {
            if h / 2 >= 1 && w / 2 >= 1 {
                self.spec.layers.push(LayerSpec::MaxPool {
                    channels: filters,
                    height: h,
                    width: w,
                });
                h /= 2;
                w /= 2;
            } else {
                self.spec.skipped_pools.push(block);
            }
        }
        self.spatial = Some((filters, h, w));
        self.features = filters * h * w;
        Ok(self)
    }

    fn flatten(&mut self) {
        if self.spatial.take().is_some() {
            self.spec.layers.push(LayerSpec::Flatten {
                features: self.features,
            });
        }
    }

    /// dense → [batch norm] → activation → [dropout]
    pub fn dense(&mut self, units: usize, act: Activation, bn: bool, dropout: bool) -> Result<&mut Self> {
        if units == 0 {
            return Err(Error::Build("dense layer with zero units".into()));
        }
        self.flatten();
        self.spec.layers.push(LayerSpec::Dense {
            inputs: self.features,
            units,
        });
        if bn {
            self.spec.layers.push(LayerSpec::BatchNorm {
                channels: units,
                spatial: 1,
            });
        }
        self.spec.layers.push(LayerSpec::Activation(act));
        if dropout {
            self.spec.layers.push(LayerSpec::Dropout {
                rate: self.dropout_rate,
            });
        }
        self.features = units;
        Ok(self)
    }

    /// Appends the classifier head.
    pub fn finish(mut self) -> NetworkSpec {
        self.flatten();
        self.spec.layers.push(LayerSpec::Dense {
            inputs: self.features,
            units: self.spec.n_classes,
        });
        self.spec
    }
}

/// Lays out the active genes of `genome` in order, taking widths from `params`.
pub fn network_spec(
    genome: &Genome,
    params: &ContinuousParams,
    input_shape: &[usize],
    n_classes: usize,
    dropout_rate: f64,
) -> Result<NetworkSpec> {
    let mut b = SpecBuilder::new(input_shape, n_classes)?.dropout_rate(dropout_rate);
    for (i, g) in genome.active_conv() {
        let filters = *params
            .filters
            .get(i)
            .ok_or_else(|| Error::Build(format!("missing filter count for conv layer {}", i + 1)))?;
        b.conv(filters as usize, g.kernel_size, g.activation, g.batch_norm, g.max_pool)?;
    }
    for (i, g) in genome.active_dense() {
        let units = *params
            .neurons
            .get(i)
            .ok_or_else(|| Error::Build(format!("missing neuron count for dense layer {}", i + 1)))?;
        b.dense(units as usize, g.activation, g.batch_norm, g.dropout)?;
    }
    Ok(b.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Weights {
    None,
    Affine {
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Norm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
}

/// How a forward pass treats batch norm and dropout. Training mode draws
/// dropout masks from `seed`, so a pass is reproducible given the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training { seed: u64 },
}

/// Gradients of every trainable tensor, in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn len(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().copied()
    }
}

enum Cache {
    Conv { cols: Vec<f64> },
    Dense { input: Vec<f64> },
    NormTrain(BnForward),
    NormInfer { xhat: Vec<f64>, inv_std: Vec<f64> },
    Act { pre: Vec<f64>, post: Vec<f64> },
    Pool { arg: Vec<usize>, in_len: usize },
    Dropout { mask: Option<Vec<f64>> },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    weights: Vec<Weights>,
}

impl Network {
    /// Fan-in scaled uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases, unit batch-norm scale.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let weights = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv {
                    in_channels,
                    filters,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    Weights::Affine {
                        w: uniform(rng, filters * fan_in, fan_in),
                        b: vec![0.0; filters],
                    }
                }
                LayerSpec::Dense { inputs, units } => Weights::Affine {
                    w: uniform(rng, inputs * units, inputs),
                    b: vec![0.0; units],
                },
                LayerSpec::BatchNorm { channels, .. } => Weights::Norm {
                    gamma: vec![1.0; channels],
                    beta: vec![0.0; channels],
                    running_mean: vec![0.0; channels],
                    running_var: vec![1.0; channels],
                },
                _ => Weights::None,
            })
            .collect();
        Self { spec, weights }
    }

    /// Same layout as [`init`](Self::init) with every trainable weight zero.
    pub fn zeroed(spec: NetworkSpec) -> Self {
        let mut net = Self::init(spec, &mut ChaCha8Rng::seed_from_u64(0));
        for p in net.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        net
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for w in &self.weights {
            match w {
                Weights::Affine { w, b } => {
                    out.push(w.as_slice());
                    out.push(b.as_slice());
                }
                Weights::Norm { gamma, beta, .. } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
                Weights::None => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for w in &mut self.weights {
            match w {
                Weights::Affine { w, b } => {
                    out.push(w);
                    out.push(b);
                }
                Weights::Norm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                Weights::None => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let ok = batch.shape.len() == self.spec.input_shape.len() + 1
            && batch.shape[1..] == self.spec.input_shape[..]
            && batch.rows() > 0;
        if ok {
            Ok(())
        } else {
            let mut expected = vec![batch.rows().max(1)];
            expected.extend(&self.spec.input_shape);
            Err(Error::Shape {
                expected,
                got: batch.shape.clone(),
            })
        }
    }

    fn run(&self, batch: &Tensor, mode: Mode) -> Result<(Vec<f64>, Vec<Cache>)> {
        self.check_batch(batch)?;
        let n = batch.rows();
        let mut x = batch.values.clone();
        let mut in_len = self.spec.input_len();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        for (li, (layer, weights)) in self.spec.layers.iter().zip(&self.weights).enumerate() {
            let out_len = layer.out_len(in_len);
            let mut y = vec![0.0; n * out_len];
            let cache = match (layer, weights) {
                (
                    &LayerSpec::Conv {
                        in_channels,
                        filters,
                        kernel,
                        height,
                        width,
                    },
                    Weights::Affine { w, b },
                ) => {
                    let g = ConvGeom {
                        in_c: in_channels,
                        k: kernel,
                        h: height,
                        w: width,
                    };
                    let per = g.col_rows() * g.hw();
                    let mut cols = vec![0.0; n * per];
                    for s in 0..n {
                        let col = &mut cols[s * per..(s + 1) * per];
                        g.im2col(&x[s * in_len..(s + 1) * in_len], col);
                        let dst = &mut y[s * out_len..(s + 1) * out_len];
                        for (c, plane) in dst.chunks_mut(g.hw()).enumerate() {
                            plane.iter_mut().for_each(|v| *v = b[c]);
                        }
                        layers::gemm(filters, g.col_rows(), g.hw(), w, false, col, false, dst, 1.0);
                    }
                    Cache::Conv { cols }
                }
                (&LayerSpec::Dense { inputs, units }, Weights::Affine { w, b }) => {
                    for row in y.chunks_mut(units) {
                        row.copy_from_slice(b);
                    }
                    layers::gemm(n, inputs, units, &x, false, w, true, &mut y, 1.0);
                    Cache::Dense { input: x }
                }
                (
                    &LayerSpec::BatchNorm { channels, spatial },
                    Weights::Norm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => match mode {
                    Mode::Training { .. } => {
                        Cache::NormTrain(layers::bn_train_forward(&x, n, channels, spatial, gamma, beta, &mut y))
                    }
                    Mode::Inference => {
                        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        let mut xhat = vec![0.0; x.len()];
                        for (i, (xh, out)) in xhat.iter_mut().zip(y.iter_mut()).enumerate() {
                            let c = (i / spatial) % channels;
                            *xh = (x[i] - running_mean[c]) * inv_std[c];
                            *out = gamma[c] * *xh + beta[c];
                        }
                        Cache::NormInfer { xhat, inv_std }
                    }
                },
                (&LayerSpec::Activation(a), _) => {
                    for (o, &v) in y.iter_mut().zip(&x) {
                        *o = layers::activate(a, v);
                    }
                    Cache::Act {
                        pre: x,
                        post: y.clone(),
                    }
                }
                (
                    &LayerSpec::MaxPool {
                        channels,
                        height,
                        width,
                    },
                    _,
                ) => {
                    let arg = layers::maxpool_forward(&x, n * channels, height, width, &mut y);
                    Cache::Pool {
                        arg,
                        in_len: x.len(),
                    }
                }
                (&LayerSpec::Dropout { rate }, _) => match mode {
                    Mode::Training { seed } => {
                        let mut rng = crate::seed::rng_for(seed, &[li as u64]);
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        for ((o, &v), &m) in y.iter_mut().zip(&x).zip(&mask) {
                            *o = v * m;
                        }
                        Cache::Dropout { mask: Some(mask) }
                    }
                    Mode::Inference => {
                        y.copy_from_slice(&x);
                        Cache::Dropout { mask: None }
                    }
                },
                (LayerSpec::Flatten { .. }, _) => {
                    y.copy_from_slice(&x);
                    Cache::Flatten
                }
                _ => unreachable!("weights built from the same spec"),
            };
            caches.push(cache);
            x = y;
            in_len = out_len;
        }
        Ok((x, caches))
    }

    /// Class probabilities, shape `[n, n_classes]`.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let (logits, _) = self.run(batch, mode)?;
        let k = self.spec.n_classes;
        Ok(Tensor {
            shape: vec![batch.rows(), k],
            values: layers::softmax_rows(&logits, k),
        })
    }

    /// Which side of every break in a piecewise-linear layer the pass lands
    /// on: rectifier input signs and max-pool winners. Central differences
    /// are only valid while this stays fixed.
    pub fn branch_pattern(&self, batch: &Tensor, mode: Mode) -> Result<Vec<usize>> {
        let (_, caches) = self.run(batch, mode)?;
        let mut out = Vec::new();
        for (layer, cache) in self.spec.layers.iter().zip(&caches) {
            match (layer, cache) {
                (LayerSpec::Activation(Activation::Relu | Activation::LeakyRelu), Cache::Act { pre, .. }) => {
                    out.extend(pre.iter().map(|&v| usize::from(v > 0.0)));
                }
                (LayerSpec::MaxPool { .. }, Cache::Pool { arg, .. }) => out.extend(arg),
                _ => {}
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
        let (logits, _) = self.run(batch, mode)?;
        self.cross_entropy(&logits, labels)
    }

    fn cross_entropy(&self, logits: &[f64], labels: &[usize]) -> Result<f64> {
        let k = self.spec.n_classes;
        if labels.len() * k != logits.len() {
            return Err(Error::Shape {
                expected: vec![logits.len() / k],
                got: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (row, &label) in logits.chunks(k).zip(labels) {
            if label >= k {
                return Err(Error::InvalidLabel { label, n_classes: k });
            }
            total += layers::log_sum_exp(row) - row[label];
        }
        Ok(total / labels.len() as f64)
    }

    /// Mean cross-entropy and its gradient for every trainable weight.
    pub fn loss_and_gradients(&self, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Gradients)> {
        let (loss, grads, _) = self.backprop(batch, labels, mode)?;
        Ok((loss, grads))
    }

    fn backprop(&self, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Gradients, Vec<Cache>)> {
        let (logits, caches) = self.run(batch, mode)?;
        let loss = self.cross_entropy(&logits, labels)?;
        let n = batch.rows();
        let k = self.spec.n_classes;
        let mut dx = layers::softmax_rows(&logits, k);
        for (row, &label) in dx.chunks_mut(k).zip(labels) {
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }

        // layer_grads[i] holds the gradient tensors of layer i (0 or 2 entries).
        let mut layer_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.spec.layers.len()];
        let mut in_lens = Vec::with_capacity(self.spec.layers.len());
        let mut len = self.spec.input_len();
        for l in &self.spec.layers {
            in_lens.push(len);
            len = l.out_len(len);
        }

        for li in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[li];
            let in_len = in_lens[li];
            let out_len = layer.out_len(in_len);
            dx = match (layer, &self.weights[li], &caches[li]) {
                (
                    &LayerSpec::Conv {
                        in_channels,
                        filters,
                        kernel,
                        height,
                        width,
                    },
                    Weights::Affine { w, .. },
                    Cache::Conv { cols },
                ) => {
                    let g = ConvGeom {
                        in_c: in_channels,
                        k: kernel,
                        h: height,
                        w: width,
                    };
                    let per = g.col_rows() * g.hw();
                    let mut dw = vec![0.0; w.len()];
                    let mut db = vec![0.0; filters];
                    let mut din = vec![0.0; n * in_len];
                    let mut dcols = vec![0.0; per];
                    for s in 0..n {
                        let dout = &dx[s * out_len..(s + 1) * out_len];
                        let col = &cols[s * per..(s + 1) * per];
                        layers::gemm(filters, g.hw(), g.col_rows(), dout, false, col, true, &mut dw, 1.0);
                        for (c, plane) in dout.chunks(g.hw()).enumerate() {
                            db[c] += plane.iter().sum::<f64>();
                        }
                        layers::gemm(g.col_rows(), filters, g.hw(), w, true, dout, false, &mut dcols, 0.0);
                        g.col2im(&dcols, &mut din[s * in_len..(s + 1) * in_len]);
                    }
                    layer_grads[li] = vec![dw, db];
                    din
                }
                (&LayerSpec::Dense { inputs, units }, Weights::Affine { w, .. }, Cache::Dense { input }) => {
                    let mut dw = vec![0.0; w.len()];
                    layers::gemm(units, n, inputs, &dx, true, input, false, &mut dw, 0.0);
                    let mut db = vec![0.0; units];
                    for row in dx.chunks(units) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let mut din = vec![0.0; n * inputs];
                    layers::gemm(n, units, inputs, &dx, false, w, false, &mut din, 0.0);
                    layer_grads[li] = vec![dw, db];
                    din
                }
                (&LayerSpec::BatchNorm { channels, spatial }, Weights::Norm { gamma, .. }, cache) => {
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    let din = match cache {
                        Cache::NormTrain(fwd) => {
                            layers::bn_train_backward(fwd, &dx, n, channels, spatial, gamma, &mut dgamma, &mut dbeta)
                        }
                        Cache::NormInfer { xhat, inv_std } => {
                            let mut din = vec![0.0; dx.len()];
                            for i in 0..dx.len() {
                                let c = (i / spatial) % channels;
                                dgamma[c] += dx[i] * xhat[i];
                                dbeta[c] += dx[i];
                                din[i] = dx[i] * gamma[c] * inv_std[c];
                            }
                            din
                        }
                        _ => unreachable!(),
                    };
                    layer_grads[li] = vec![dgamma, dbeta];
                    din
                }
                (&LayerSpec::Activation(a), _, Cache::Act { pre, post }) => dx
                    .iter()
                    .zip(pre.iter().zip(post))
                    .map(|(d, (&x, &y))| d * layers::activate_grad(a, x, y))
                    .collect(),
                (LayerSpec::MaxPool { .. }, _, Cache::Pool { arg, in_len }) => {
                    let mut din = vec![0.0; *in_len];
                    for (d, &a) in dx.iter().zip(arg) {
                        din[a] += d;
                    }
                    din
                }
                (LayerSpec::Dropout { .. }, _, Cache::Dropout { mask }) => match mask {
                    Some(m) => dx.iter().zip(m).map(|(d, m)| d * m).collect(),
                    None => dx,
                },
                (LayerSpec::Flatten { .. }, _, Cache::Flatten) => dx,
                _ => unreachable!("cache built from the same spec"),
            };
        }
        Ok((loss, Gradients(layer_grads.into_iter().flatten().collect()), caches))
    }

    /// One SGD step on a batch in training mode; also folds the batch
    /// statistics into the batch-norm running averages. Returns the loss
    /// before the step.
    pub fn sgd_step(&mut self, batch: &Tensor, labels: &[usize], lr: f64, seed: u64) -> Result<f64> {
        let (loss, grads, caches) = self.backprop(batch, labels, Mode::Training { seed })?;
        self.apply_gradients(&grads, lr);
        for (w, cache) in self.weights.iter_mut().zip(&caches) {
            if let (
                Weights::Norm {
                    running_mean,
                    running_var,
                    ..
                },
                Cache::NormTrain(fwd),
            ) = (w, cache)
            {
                let m = (fwd.xhat.len() / fwd.mean.len().max(1)) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for c in 0..running_mean.len() {
                    running_mean[c] = BN_MOMENTUM * running_mean[c] + (1.0 - BN_MOMENTUM) * fwd.mean[c];
                    running_var[c] = BN_MOMENTUM * running_var[c] + (1.0 - BN_MOMENTUM) * fwd.var[c] * unbias;
                }
            }
        }
        Ok(loss)
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(&grads.0) {
            for (v, d) in p.iter_mut().zip(g) {
                *v -= lr * d;
            }
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Builds and initializes the evaluator network for a candidate.
pub fn build_network<R: Rng + ?Sized>(
    genome: &Genome,
    params: &ContinuousParams,
    input_shape: &[usize],
    n_classes: usize,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<Network> {
    let spec = network_spec(genome, params, input_shape, n_classes, dropout_rate)?;
    Ok(Network::init(spec, rng))
}
