//! Parameter storage, the layers the three networks are built from, and Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Scalar, Tensor};

/// Standard deviation of the zero-mean Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named tensors of one network: trainable parameters and running-statistic buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Replaces every tensor, keeping names and shapes.
    pub fn load(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (entry, (name, t)) in self.entries.iter_mut().zip(tensors) {
            if entry.name != name || entry.tensor.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.tensor.shape()
                )));
            }
            entry.tensor = t;
        }
        Ok(())
    }

    /// Starts a forward pass. Trainable entries become gradient leaves when
    /// `requires_grad`, otherwise constants.
    pub fn bind(&self, requires_grad: bool, train: bool) -> Pass<T> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable && requires_grad {
                    Var::leaf(e.tensor.clone())
                } else {
                    Var::constant(e.tensor.clone())
                }
            })
            .collect();
        Pass {
            vars,
            train,
            requires_grad,
            updates: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Applies running-statistic updates recorded during a pass.
    pub fn commit(&mut self, pass: Pass<T>) {
        for (id, t) in pass.updates {
            self.entries[id.0].tensor = t;
        }
    }

    fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| &mut e.tensor)
    }
}

/// State of one forward pass over a [`ParamStore`].
pub struct Pass<T> {
    vars: Vec<Var<T>>,
    pub train: bool,
    requires_grad: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Pass<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    /// Buffer value including updates already recorded in this pass, so
    /// repeated forwards chain their running-statistic updates.
    fn current(&self, id: ParamId) -> Tensor<T> {
        self.updates
            .iter()
            .rev()
            .find(|(u, _)| *u == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.vars[id.0].value().clone())
    }

    /// Enables dropout for this pass (train mode only).
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    /// Gradient leaves in the order Adam expects.
    pub fn trainable(&self, store: &ParamStore<T>) -> Vec<Var<T>> {
        assert!(self.requires_grad, "pass was bound without gradients");
        store
            .entries
            .iter()
            .zip(&self.vars)
            .filter(|(e, _)| e.trainable)
            .map(|(_, v)| v.clone())
            .collect()
    }
}

pub fn normal_tensor<T: Scalar>(
    shape: &[usize],
    mean: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let dist = Normal::new(mean, std).expect("valid normal");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

fn add_channel_bias<T: Scalar>(x: Var<T>, bias: &Var<T>) -> Var<T> {
    let c = bias.shape()[0];
    let shape = x.shape().to_vec();
    x.add(&bias.reshape(&[1, c, 1, 1]).broadcast_to(&shape))
}

fn expect_channels<T: Scalar>(x: &Var<T>, channels: usize, layer: &str) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != channels {
        return Err(Error::Shape(format!(
            "{layer} expects (N, {channels}, H, W), got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            normal_tensor(&[out_channels, in_channels, kernel, kernel], 0.0, INIT_STD, rng),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeom> {
        ConvGeom::forward(h, w, self.kernel, self.stride, self.pad)
    }

    pub fn forward<T: Scalar>(&self, pass: &Pass<T>, x: &Var<T>) -> Result<Var<T>> {
        expect_channels(x, self.in_channels, "conv2d")?;
        let geom = self.geometry(x.shape()[2], x.shape()[3])?;
        let y = x.conv2d(pass.var(self.weight), geom);
        Ok(match self.bias {
            Some(b) => add_channel_bias(y, pass.var(b)),
            None => y,
        })
    }
}

/// Fractionally strided convolution; weight layout `(in, out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            normal_tensor(&[in_channels, out_channels, kernel, kernel], 0.0, INIT_STD, rng),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, pass: &Pass<T>, x: &Var<T>) -> Result<Var<T>> {
        expect_channels(x, self.in_channels, "conv_transpose2d")?;
        let geom = ConvGeom::transposed(
            x.shape()[2],
            x.shape()[3],
            self.kernel,
            self.stride,
            self.pad,
            self.output_pad,
        )?;
        let y = x.conv_transpose2d(pass.var(self.weight), geom);
        Ok(match self.bias {
            Some(b) => add_channel_bias(y, pass.var(b)),
            None => y,
        })
    }
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and records running-average updates on the pass.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gamma = store.add_param(
            format!("{name}.gamma"),
            normal_tensor(&[channels], 1.0, INIT_STD, rng),
        );
        let beta = store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]));
        BatchNorm2d {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<T>, x: &Var<T>) -> Result<Var<T>> {
        expect_channels(x, self.channels, "batch_norm")?;
        let shape = x.shape().to_vec();
        let c = self.channels;
        let per_channel = [1, c, 1, 1];
        let count = (shape[0] * shape[2] * shape[3]) as f64;
        let (mean, var) = if pass.train {
            let mean = x.sum_to(&per_channel).mul_scalar(T::from_f64(1.0 / count));
            let centered = x.sub(&mean.broadcast_to(&shape));
            let var = centered
                .square()
                .sum_to(&per_channel)
                .mul_scalar(T::from_f64(1.0 / count));
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let blend = |old: &Tensor<T>, new: &Tensor<T>, scale: f64| {
                old.zip_map(&new.reshape(&[c]).expect("channels"), |o, n| {
                    T::from_f64((1.0 - BN_MOMENTUM) * o.to_f64() + BN_MOMENTUM * scale * n.to_f64())
                })
            };
            let rm = blend(&pass.current(self.running_mean), mean.value(), 1.0);
            let rv = blend(&pass.current(self.running_var), var.value(), unbiased);
            pass.updates.push((self.running_mean, rm));
            pass.updates.push((self.running_var, rv));
            (mean, var)
        } else {
            (
                pass.var(self.running_mean).reshape(&per_channel),
                pass.var(self.running_var).reshape(&per_channel),
            )
        };
        let std = var.add_scalar(T::from_f64(BN_EPS)).sqrt();
        let normalized = x
            .sub(&mean.broadcast_to(&shape))
            .div(&std.broadcast_to(&shape));
        let gamma = pass.var(self.gamma).reshape(&per_channel).broadcast_to(&shape);
        let beta = pass.var(self.beta).reshape(&per_channel).broadcast_to(&shape);
        Ok(normalized.mul(&gamma).add(&beta))
    }
}

/// Inverted dropout: zeroes elements with probability `p` and rescales the rest.
pub fn dropout<T: Scalar>(pass: &mut Pass<T>, x: &Var<T>, p: f64) -> Var<T> {
    if !pass.train || p <= 0.0 {
        return x.clone();
    }
    let Some(rng) = pass.dropout_rng.as_mut() else {
        return x.clone();
    };
    let keep = T::from_f64(1.0 / (1.0 - p));
    let data: Vec<T> = (0..x.value().numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mask = Tensor::from_vec(x.shape().to_vec(), data).expect("shape");
    x.mask_mul(&mask)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        Adam {
            config,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Var<T>]) {
        assert_eq!(grads.len(), self.first.len(), "one gradient per parameter");
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (((param, g), m), v) in store
            .trainable_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let (p, m, v) = (param.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.value().data()[i].to_f64();
                let mi = beta1 * m[i].to_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = T::from_f64(p[i].to_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use rand::SeedableRng;

    #[test]
    fn batch_norm_train_mode_standardizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3, &mut rng);
        let x = normal_tensor::<f64>(&[4, 3, 5, 5], 2.0, 3.0, &mut rng);
        let mut pass = store.bind(false, true);
        let y = bn.forward(&mut pass, &Var::constant(x)).unwrap();
        let sums = y.value().sum_to(&[1, 3, 1, 1]);
        for s in sums.data() {
            assert!(s.abs() / 100.0 < 0.05, "channel mean {s}");
        }
        store.commit(pass);
        let rm = store.entries()[2].tensor.data()[0];
        assert!((rm - 0.2).abs() < 0.1, "running mean moved toward 2.0: {rm}");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add_param("w", Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..400 {
            let pass = store.bind(true, true);
            let w = pass.trainable(&store);
            let loss = w[0].square().sum_all();
            let g = grad(&loss, &[&w[0]], false);
            adam.step(&mut store, &g);
        }
        for v in store.entries()[0].tensor.data() {
            assert!(v.abs() < 0.05, "{v}");
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::<f32>::new();
        let mut pass = store.bind(false, false).with_dropout(ChaCha8Rng::seed_from_u64(3));
        let x = Var::constant(Tensor::ones(&[2, 2]));
        assert_eq!(dropout(&mut pass, &x, 0.5).value(), x.value());
    }
}
