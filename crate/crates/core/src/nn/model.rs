use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{self, BnCache};
use crate::nn::real::Real;
use crate::nn::spec::{LayerKind, ModelSpec};
use crate::nn::tensor::Tensor;
use crate::par::Exec;
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slots {
    None,
    Conv { weight: usize, bias: usize },
    Norm { gamma: usize, beta: usize, buffer: usize },
}

enum Cache<T> {
    None,
    Norm(BnCache<T>),
    Pool(Vec<u32>),
}

/// Per-layer outputs and caches of the most recent taped forward pass.
struct Tape<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

/// Gradients from [`Model::backward`], parallel to [`Model::params`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: Vec<Vec<T>>,
    pub input: Tensor<T>,
}

impl<T: Real> Gradients<T> {
    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite()) && self.input.all_finite()
    }
}

pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    init_seed: u64,
    params: Vec<Param<T>>,
    /// Running (mean, variance) per batchnorm layer.
    buffers: Vec<(Vec<T>, Vec<T>)>,
    slots: Vec<Slots>,
    trainable: Vec<bool>,
    mode: Mode,
    exec: Exec,
    nan_check: bool,
    tape: Option<Tape<T>>,
}

impl<T: Real> Clone for Model<T> {
    /// Clones parameters and settings; the tape is not carried over.
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            slots: self.slots.clone(),
            trainable: self.trainable.clone(),
            mode: self.mode,
            exec: self.exec,
            nan_check: self.nan_check,
            tape: None,
        }
    }
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec.name)
            .field("params", &self.param_count())
            .field("mode", &self.mode)
            .finish()
    }
}

impl<T: Real> Model<T> {
    pub fn build(name: &str, seed: u64) -> Result<Self> {
        Self::from_spec(ModelSpec::by_name(name)?, seed)
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`; batchnorm scale 1,
    /// shift 0, running mean 0, running variance 1.
    pub fn from_spec(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut slots = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let slot = match l.kind {
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                    let k = l.kernel().unwrap();
                    let fan_in = l.in_channels * k * k;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut draw = |n: usize| -> Vec<T> {
                        (0..n)
                            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                            .collect()
                    };
                    let w = draw(l.out_channels * fan_in);
                    let b = draw(l.out_channels);
                    params.push(Param {
                        name: format!("{}.weight", l.name),
                        shape: vec![l.out_channels, l.in_channels, k, k],
                        data: w,
                    });
                    params.push(Param {
                        name: format!("{}.bias", l.name),
                        shape: vec![l.out_channels],
                        data: b,
                    });
                    Slots::Conv {
                        weight: params.len() - 2,
                        bias: params.len() - 1,
                    }
                }
                LayerKind::Batchnorm => {
                    let c = l.out_channels;
                    params.push(Param {
                        name: format!("{}.gamma", l.name),
                        shape: vec![c],
                        data: vec![T::one(); c],
                    });
                    params.push(Param {
                        name: format!("{}.beta", l.name),
                        shape: vec![c],
                        data: vec![T::zero(); c],
                    });
                    buffers.push((vec![T::zero(); c], vec![T::one(); c]));
                    Slots::Norm {
                        gamma: params.len() - 2,
                        beta: params.len() - 1,
                        buffer: buffers.len() - 1,
                    }
                }
                _ => Slots::None,
            };
            slots.push(slot);
        }
        let trainable = vec![true; params.len()];
        Ok(Self {
            spec,
            init_seed: seed,
            params,
            buffers,
            slots,
            trainable,
            mode: Mode::Train,
            exec: Exec::default(),
            nan_check: false,
            tape: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(Vec<T>, Vec<T>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(Vec<T>, Vec<T>)] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    /// When set, every layer output is checked for NaN/inf.
    pub fn set_nan_check(&mut self, on: bool) {
        self.nan_check = on;
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.params.len() {
            return Err(Error::dims(self.params.len().to_string(), mask.len().to_string()));
        }
        self.trainable = mask;
        Ok(())
    }

    /// Freezes everything except the final 1x1 convolution.
    pub fn freeze_all_but_output(&mut self) {
        let out = self.spec.output_layer();
        let keep = match self.slots[out] {
            Slots::Conv { weight, bias } => [weight, bias],
            _ => unreachable!("validated spec ends with a convolution"),
        };
        self.trainable = (0..self.params.len()).map(|i| keep.contains(&i)).collect();
    }

    /// Parameter indices of a layer (`weight,bias` or `gamma,beta`).
    pub fn layer_params(&self, layer: usize) -> Option<(usize, usize)> {
        match self.slots.get(layer)? {
            Slots::Conv { weight, bias } => Some((*weight, *bias)),
            Slots::Norm { gamma, beta, .. } => Some((*gamma, *beta)),
            Slots::None => None,
        }
    }

    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.data.fill(T::zero());
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [b, c, h, w] = x.shape();
        let m = self.spec.size_multiple();
        if c != 1 || b == 0 {
            return Err(Error::dims("(b>=1, 1, h, w)", format!("{:?}", x.shape())));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "spatial size {h}x{w} must be a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Whether a batchnorm layer uses batch statistics in this pass. Layers
    /// whose affine parameters are frozen always use running statistics.
    fn batch_stats(&self, gamma: usize, beta: usize, mode: Mode) -> bool {
        mode == Mode::Train && (self.trainable[gamma] || self.trainable[beta])
    }

    /// Runs the layer list. With `tape`, every output is kept; otherwise only
    /// skip sources are retained. `stats` receives running-statistic updates
    /// and must be present whenever a batchnorm layer uses batch statistics.
    fn run(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        tape: bool,
        mut stats: Option<&mut [(Vec<T>, Vec<T>)]>,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        self.check_input(x)?;
        let n = self.spec.layers.len();
        let mut keep = vec![tape; n];
        for l in &self.spec.layers {
            if let Some(s) = l.skip {
                keep[s] = true;
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        let mut caches: Vec<Cache<T>> = Vec::with_capacity(n);
        let mut cur = x.clone();
        for i in 0..n {
            let layer = &self.spec.layers[i];
            let (y, cache) = match (layer.kind, self.slots[i]) {
                (LayerKind::Conv3x3 | LayerKind::Conv1x1, Slots::Conv { weight, bias }) => {
                    let y = ops::conv2d_forward(
                        &cur,
                        &self.params[weight].data,
                        &self.params[bias].data,
                        layer.out_channels,
                        layer.kernel().unwrap(),
                        self.exec,
                    )?;
                    (y, Cache::None)
                }
                (LayerKind::Batchnorm, Slots::Norm { gamma, beta, buffer }) => {
                    let (y, c) = if self.batch_stats(gamma, beta, mode) {
                        let stats = stats.as_deref_mut().ok_or_else(|| {
                            Error::State("batch statistics requested without buffers".into())
                        })?;
                        let (rm, rv) = &mut stats[buffer];
                        ops::batchnorm_train_forward(
                            &cur,
                            &self.params[gamma].data,
                            &self.params[beta].data,
                            rm,
                            rv,
                            self.exec,
                        )
                    } else {
                        let (rm, rv) = match stats.as_deref() {
                            Some(s) => &s[buffer],
                            None => &self.buffers[buffer],
                        };
                        ops::batchnorm_eval_forward(
                            &cur,
                            &self.params[gamma].data,
                            &self.params[beta].data,
                            rm,
                            rv,
                            self.exec,
                        )
                    };
                    (y, if tape { Cache::Norm(c) } else { Cache::None })
                }
                (LayerKind::Relu, _) => (ops::relu_forward(&cur), Cache::None),
                (LayerKind::Maxpool2, _) => {
                    let (y, arg) = ops::maxpool2_forward(&cur, self.exec)?;
                    (y, if tape { Cache::Pool(arg) } else { Cache::None })
                }
                (LayerKind::Upsample2Bilinear, _) => (ops::upsample2_forward(&cur, self.exec), Cache::None),
                (LayerKind::Concat, _) => {
                    let src = layer.skip.expect("validated concat");
                    let skip = outputs[src].as_ref().expect("skip source retained");
                    (ops::concat_forward(&cur, skip)?, Cache::None)
                }
                (kind, _) => unreachable!("layer {kind:?} without parameter slots"),
            };
            if self.nan_check && !y.all_finite() {
                return Err(Error::NonFinite(format!("output of {}", layer.name)));
            }
            let prev = std::mem::replace(&mut cur, y);
            if i > 0 {
                outputs.push(if keep[i - 1] { Some(prev) } else { None });
            }
            caches.push(cache);
        }
        outputs.push(if keep[n - 1] { Some(cur.clone()) } else { None });
        let tape = tape.then(|| Tape {
            input: x.clone(),
            outputs: outputs.into_iter().map(|o| o.expect("taped")).collect(),
            caches,
        });
        Ok((cur, tape))
    }

    /// Forward pass in the current mode, recording a tape for
    /// [`Model::backward`]. In train mode batchnorm running statistics are
    /// updated.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.tape = None;
        let mut buffers = std::mem::take(&mut self.buffers);
        let result = self.run(x, self.mode, true, Some(&mut buffers));
        self.buffers = buffers;
        let (y, tape) = result?;
        self.tape = tape;
        Ok(y)
    }

    /// Eval-mode forward without a tape; never mutates the model.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, Mode::Eval, false, None)?.0)
    }

    /// Consumes the tape of the last [`Model::forward`] and returns gradients
    /// of every parameter (zero for frozen ones) and of the input.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Gradients<T>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a taped forward pass".into()))?;
        let n = self.spec.layers.len();
        grad.check_shape(tape.outputs[n - 1].shape())?;
        let mut pgrads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        let mut ograds: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        ograds[n - 1] = Some(grad.clone());
        let mut input_grad = None;
        for i in (0..n).rev() {
            let Some(g) = ograds[i].take() else {
                continue;
            };
            let layer = &self.spec.layers[i];
            let x = if i == 0 { &tape.input } else { &tape.outputs[i - 1] };
            let dx = match (layer.kind, self.slots[i]) {
                (LayerKind::Conv3x3 | LayerKind::Conv1x1, Slots::Conv { weight, bias }) => {
                    let r = ops::conv2d_backward(x, &self.params[weight].data, &g, layer.kernel().unwrap(), self.exec);
                    if self.trainable[weight] {
                        pgrads[weight] = r.dweight;
                    }
                    if self.trainable[bias] {
                        pgrads[bias] = r.dbias;
                    }
                    r.dx
                }
                (LayerKind::Batchnorm, Slots::Norm { gamma, beta, .. }) => {
                    let Cache::Norm(cache) = &tape.caches[i] else {
                        unreachable!("batchnorm cache recorded")
                    };
                    let r = ops::batchnorm_backward(x, &self.params[gamma].data, cache, &g, self.exec);
                    if self.trainable[gamma] {
                        pgrads[gamma] = r.dgamma;
                    }
                    if self.trainable[beta] {
                        pgrads[beta] = r.dbeta;
                    }
                    r.dx
                }
                (LayerKind::Relu, _) => ops::relu_backward(&tape.outputs[i], &g),
                (LayerKind::Maxpool2, _) => {
                    let Cache::Pool(arg) = &tape.caches[i] else {
                        unreachable!("pool cache recorded")
                    };
                    ops::maxpool2_backward(x.shape(), arg, &g)
                }
                (LayerKind::Upsample2Bilinear, _) => ops::upsample2_backward(x.shape(), &g, self.exec),
                (LayerKind::Concat, _) => {
                    let (da, db) = ops::concat_backward(&g, layer.in_channels);
                    let src = layer.skip.expect("validated concat");
                    accumulate(&mut ograds[src], db);
                    da
                }
                (kind, _) => unreachable!("layer {kind:?} without parameter slots"),
            };
            if i == 0 {
                input_grad = Some(dx);
            } else {
                accumulate(&mut ograds[i - 1], dx);
            }
        }
        Ok(Gradients {
            params: pgrads,
            input: input_grad.expect("input gradient reached"),
        })
    }

    /// Flattened copy of every parameter in declared order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}
