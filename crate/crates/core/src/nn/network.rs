use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchDescriptor, LayerSpec};
use super::ops;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-layer state saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Argmax(Vec<u32>),
}

/// A layer kind compiled for element type `T`. Tensors carry a leading
/// batch dimension.
pub trait Layer<T: Scalar>: Send + Sync {
    fn spec(&self) -> LayerSpec;

    fn forward(&self, params: &[Tensor<T>], input: &Tensor<T>) -> Result<(Tensor<T>, Cache)>;

    /// Returns the input gradient and writes parameter gradients into `grads`.
    fn backward(
        &self,
        params: &[Tensor<T>],
        input: &Tensor<T>,
        cache: &Cache,
        grad_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>>;
}

struct Conv2d {
    spec: LayerSpec,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> Layer<T> for Conv2d {
    fn spec(&self) -> LayerSpec {
        self.spec
    }

    fn forward(&self, params: &[Tensor<T>], input: &Tensor<T>) -> Result<(Tensor<T>, Cache)> {
        let y = ops::conv2d(input, &params[0], &params[1], self.stride, self.padding)?;
        Ok((y, Cache::None))
    }

    fn backward(
        &self,
        params: &[Tensor<T>],
        input: &Tensor<T>,
        _cache: &Cache,
        grad_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        let (dx, dw, db) = ops::conv2d_backward(input, &params[0], self.stride, self.padding, grad_out)?;
        grads[0] = dw;
        grads[1] = db;
        Ok(dx)
    }
}

struct MaxPool;

impl<T: Scalar> Layer<T> for MaxPool {
    fn spec(&self) -> LayerSpec {
        LayerSpec::MaxPool2x2
    }

    fn forward(&self, _params: &[Tensor<T>], input: &Tensor<T>) -> Result<(Tensor<T>, Cache)> {
        let (y, arg) = ops::maxpool2x2_with_argmax(input)?;
        Ok((y, Cache::Argmax(arg)))
    }

    fn backward(
        &self,
        _params: &[Tensor<T>],
        input: &Tensor<T>,
        cache: &Cache,
        grad_out: &Tensor<T>,
        _grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        let Cache::Argmax(arg) = cache else {
            return Err(Error::Invalid("maxpool backward without argmax cache".into()));
        };
        ops::maxpool2x2_backward(input.shape(), arg, grad_out)
    }
}

struct Relu;

impl<T: Scalar> Layer<T> for Relu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }

    fn forward(&self, _params: &[Tensor<T>], input: &Tensor<T>) -> Result<(Tensor<T>, Cache)> {
        Ok((ops::relu(input), Cache::None))
    }

    fn backward(
        &self,
        _params: &[Tensor<T>],
        input: &Tensor<T>,
        _cache: &Cache,
        grad_out: &Tensor<T>,
        _grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        ops::relu_backward(input, grad_out)
    }
}

struct Flatten;

impl<T: Scalar> Layer<T> for Flatten {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten
    }

    fn forward(&self, _params: &[Tensor<T>], input: &Tensor<T>) -> Result<(Tensor<T>, Cache)> {
        let n = input.shape()[0];
        let f = input.shape()[1..].iter().product::<usize>();
        Ok((input.clone().reshape(&[n, f])?, Cache::None))
    }

    fn backward(
        &self,
        _params: &[Tensor<T>],
        input: &Tensor<T>,
        _cache: &Cache,
        grad_out: &Tensor<T>,
        _grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        grad_out.clone().reshape(input.shape())
    }
}

struct Dense {
    spec: LayerSpec,
}

impl<T: Scalar> Layer<T> for Dense {
    fn spec(&self) -> LayerSpec {
        self.spec
    }

    fn forward(&self, params: &[Tensor<T>], input: &Tensor<T>) -> Result<(Tensor<T>, Cache)> {
        Ok((ops::dense(input, &params[0], &params[1])?, Cache::None))
    }

    fn backward(
        &self,
        params: &[Tensor<T>],
        input: &Tensor<T>,
        _cache: &Cache,
        grad_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        let (dx, dw, db) = ops::dense_backward(input, &params[0], grad_out)?;
        grads[0] = dw;
        grads[1] = db;
        Ok(dx)
    }
}

/// Instantiates the kernel object for one descriptor layer.
pub fn build_layer<T: Scalar>(spec: &LayerSpec) -> Box<dyn Layer<T>> {
    match *spec {
        LayerSpec::Conv2d { stride, padding, .. } => Box::new(Conv2d {
            spec: *spec,
            stride,
            padding,
        }),
        LayerSpec::MaxPool2x2 => Box::new(MaxPool),
        LayerSpec::Relu => Box::new(Relu),
        LayerSpec::Flatten => Box::new(Flatten),
        LayerSpec::Dense { .. } => Box::new(Dense { spec: *spec }),
    }
}

/// Activations and caches recorded by [`Network::forward_tape`].
pub struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    caches: Vec<Cache>,
}

/// A descriptor compiled into layer objects. Parameters live outside the
/// network so the same compiled graph serves any checkpoint of its arch.
pub struct Network<T: Scalar> {
    arch: ArchDescriptor,
    layers: Vec<Box<dyn Layer<T>>>,
    slots: Vec<Range<usize>>,
    param_shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(arch: &ArchDescriptor) -> Result<Self> {
        arch.validate_classifier()?;
        let mut slots = Vec::new();
        let mut next = 0;
        for l in arch.layers() {
            let n = if l.has_params() { 2 } else { 0 };
            slots.push(next..next + n);
            next += n;
        }
        Ok(Network {
            arch: arch.clone(),
            layers: arch.layers().iter().map(build_layer).collect(),
            slots,
            param_shapes: arch.param_shapes(),
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    /// He-uniform weights (limit √(6/fan_in)), zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.param_shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i % 2 == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
                    .collect();
                Tensor::from_vec(shape, data).expect("shape product")
            })
            .collect()
    }

    pub fn check_params(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.param_shapes.len() {
            return Err(Error::Shape(format!(
                "architecture has {} parameter tensors, got {}",
                self.param_shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&self.param_shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {i} must be {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let want = self.arch.input().chw();
        if batch.shape().len() != 4 || batch.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "network input must be (N, {}, {}, {}), got {:?}",
                want[0],
                want[1],
                want[2],
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Logits for a `(N, C, H, W)` batch.
    pub fn forward(&self, params: &[Tensor<T>], batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        self.check_input(batch)?;
        let mut x = batch.clone();
        for (layer, slot) in self.layers.iter().zip(&self.slots) {
            x = layer.forward(&params[slot.clone()], &x)?.0;
        }
        Ok(x)
    }

    /// Posterior rows for a `(N, C, H, W)` batch.
    pub fn posteriors(&self, params: &[Tensor<T>], batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::softmax_rows(&self.forward(params, batch)?))
    }

    pub fn forward_tape(&self, params: &[Tensor<T>], batch: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_params(params)?;
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (layer, slot) in self.layers.iter().zip(&self.slots) {
            let (y, cache) = layer.forward(&params[slot.clone()], &x)?;
            inputs.push(x);
            caches.push(cache);
            x = y;
        }
        Ok((x, Tape { inputs, caches }))
    }

    pub fn backward(&self, params: &[Tensor<T>], tape: &Tape<T>, grad_logits: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads: Vec<Tensor<T>> = self.param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let mut g = grad_logits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let slot = self.slots[i].clone();
            g = layer.backward(
                &params[slot.clone()],
                &tape.inputs[i],
                &tape.caches[i],
                &g,
                &mut grads[slot],
            )?;
        }
        Ok(grads)
    }

    /// Mean softmax cross-entropy over the batch and its gradients.
    pub fn loss_and_grads(
        &self,
        params: &[Tensor<T>],
        batch: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let (logits, tape) = self.forward_tape(params, batch)?;
        let n = labels.len();
        if logits.shape()[0] != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                n,
                logits.shape()[0]
            )));
        }
        let k = logits.shape()[1];
        let scale = T::one() / T::from_usize(n).expect("batch size");
        let mut loss = T::zero();
        let mut grad = Vec::with_capacity(n * k);
        for (row, &label) in logits.data().chunks(k).zip(labels) {
            let out = ops::softmax_cross_entropy(row, label)?;
            loss = loss + out.loss;
            grad.extend(out.grad_logits.into_iter().map(|g| g * scale));
        }
        let grads = self.backward(params, &tape, Tensor::from_vec(logits.shape(), grad)?)?;
        Ok((loss * scale, grads))
    }

    /// ReLU on/off bits and pooling winners for every layer, used to detect
    /// when a perturbation crosses a kink or a tie.
    pub fn activation_pattern(&self, params: &[Tensor<T>], batch: &Tensor<T>) -> Result<Vec<u32>> {
        let (_, tape) = self.forward_tape(params, batch)?;
        let mut pattern = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match (layer.spec(), &tape.caches[i]) {
                (LayerSpec::Relu, _) => pattern.extend(
                    tape.inputs[i]
                        .data()
                        .iter()
                        .map(|v| u32::from(*v > T::zero())),
                ),
                (_, Cache::Argmax(arg)) => pattern.extend_from_slice(arg),
                _ => {}
            }
        }
        Ok(pattern)
    }
}
