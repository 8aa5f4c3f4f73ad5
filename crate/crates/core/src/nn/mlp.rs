use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, softplus};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Softplus => sigmoid(pre),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    /// Drop probability; `0` disables dropout for the layer.
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// Hidden blocks use batch norm, leaky ReLU and dropout; the output layer is a
    /// plain dense layer followed by `output_activation`.
    pub fn new(input: usize, hidden: &[usize], output: usize, output_activation: Activation, dropout: f64) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec { width, activation: Activation::LeakyRelu, batch_norm: true, dropout })
            .collect();
        layers.push(LayerSpec { width: output, activation: output_activation, batch_norm: false, dropout: 0.0 });
        Self { input, layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::Config("network input width must be >= 1".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.width == 0 {
                return Err(Error::Config(format!("layer {i} has zero width")));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Config(format!("layer {i} dropout {} outside [0, 1)", l.dropout)));
            }
        }
        Ok(())
    }

    fn uses_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization, dropout active, running statistics updated.
    Train,
    /// Running statistics for normalization, dropout disabled.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// One dense block. `weight` is `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub scale: Option<Array1<f64>>,
    pub shift: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerGrads {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.len()),
                scale: l.norm.as_ref().map(|n| Array1::zeros(n.scale.len())),
                shift: l.norm.as_ref().map(|n| Array1::zeros(n.shift.len())),
            })
            .collect();
        Self { layers }
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|&v| v == 0.0)
                && l.bias.iter().all(|&v| v == 0.0)
                && l.scale.iter().flatten().all(|&v| v == 0.0)
                && l.shift.iter().flatten().all(|&v| v == 0.0)
        })
    }
}

struct LayerCache {
    input: Array2<f64>,
    /// Normalized pre-activations and the inverse standard deviation used.
    norm: Option<(Array2<f64>, Array1<f64>, bool)>,
    pre: Array2<f64>,
    out: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Everything the reverse pass needs from one forward pass.
pub struct ForwardCache {
    version: u64,
    layers: Vec<LayerCache>,
}

/// Multilayer perceptron with exclusively owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    version: u64,
}

impl Mlp {
    /// Uniform fan-in initialization: weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut fan_in = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((fan_in, l.width), |_| rng.gen_range(-bound..bound));
            let bias = Array1::from_shape_fn(l.width, |_| rng.gen_range(-bound..bound));
            layers.push(Layer { weight, bias, norm: l.batch_norm.then(|| BatchNorm::new(l.width)) });
            fan_in = l.width;
        }
        Ok(Self { spec, layers, version: 0 })
    }

    /// Build from explicit layers; shapes must agree with `spec`.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::Shape(format!("{} layers for a spec with {}", layers.len(), spec.layers.len())));
        }
        let mut fan_in = spec.input;
        for (i, (l, ls)) in layers.iter().zip(&spec.layers).enumerate() {
            if l.weight.dim() != (fan_in, ls.width) || l.bias.len() != ls.width {
                return Err(Error::Shape(format!(
                    "layer {i}: weight {:?} bias {} for expected {}x{}",
                    l.weight.dim(),
                    l.bias.len(),
                    fan_in,
                    ls.width
                )));
            }
            if l.norm.is_some() != ls.batch_norm {
                return Err(Error::Shape(format!("layer {i}: batch-norm presence disagrees with spec")));
            }
            if let Some(n) = &l.norm {
                if n.running_var.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Domain(format!("layer {i}: running variance must be positive")));
                }
            }
            fan_in = ls.width;
        }
        Ok(Self { spec, layers, version: 0 })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to one layer. Invalidates outstanding forward caches.
    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        self.version += 1;
        &mut self.layers[index]
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + l.norm.as_ref().map_or(0, |n| 2 * n.scale.len()))
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input {
            return Err(Error::Shape(format!("network expects {} input columns, got {}", self.spec.input, x.ncols())));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass recording a cache for [`Mlp::backward`].
    ///
    /// In [`Mode::Train`] batch-norm layers normalize with batch statistics
    /// (which requires at least two rows) and update their running statistics.
    pub fn forward(&mut self, x: ArrayView2<f64>, mode: Mode, rng: &mut impl Rng) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let batch = x.nrows();
        if mode == Mode::Train && batch < 2 && self.spec.uses_batch_norm() {
            return Err(Error::Shape("train-mode batch normalization needs at least 2 rows".into()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (layer, ls) in self.layers.iter_mut().zip(&self.spec.layers) {
            let input = h;
            let mut z = input.dot(&layer.weight) + &layer.bias;
            let norm = match layer.norm.as_mut() {
                None => None,
                Some(bn) => {
                    let (mean, var, train) = match mode {
                        Mode::Train => {
                            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                            let var = z.var_axis(Axis(0), 0.0);
                            let unbiased = &var * (batch as f64 / (batch as f64 - 1.0));
                            bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
                            bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
                            (mean, var, true)
                        }
                        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), false),
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let xhat = (&z - &mean) * &inv_std;
                    z = &xhat * &bn.scale + &bn.shift;
                    Some((xhat, inv_std, train))
                }
            };
            let pre = z;
            let out = pre.mapv(|v| ls.activation.apply(v));
            let mask = if mode == Mode::Train && ls.dropout > 0.0 {
                // inverted dropout: survivors are rescaled so eval needs no correction
                let keep = 1.0 - ls.dropout;
                let m = Array2::from_shape_fn(out.raw_dim(), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                h = &out * &m;
                Some(m)
            } else {
                h = out.clone();
                None
            };
            caches.push(LayerCache { input, norm, pre, out, mask });
        }
        Ok((h, ForwardCache { version: self.version, layers: caches }))
    }

    /// Eval-mode forward pass without a cache. Read-only.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for (layer, ls) in self.layers.iter().zip(&self.spec.layers) {
            let mut z = h.dot(&layer.weight) + &layer.bias;
            if let Some(bn) = &layer.norm {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                z = (&z - &bn.running_mean) * &inv_std * &bn.scale + &bn.shift;
            }
            z.mapv_inplace(|v| ls.activation.apply(v));
            h = z;
        }
        Ok(h)
    }

    /// Reverse pass: parameter gradients and gradients with respect to the input.
    pub fn backward(&self, cache: ForwardCache, upstream: ArrayView2<f64>) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let last = cache.layers.last().expect("at least one layer");
        if upstream.dim() != last.out.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                last.out.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for ((layer, ls), lc) in self.layers.iter().zip(&self.spec.layers).zip(cache.layers).rev() {
            if let Some(mask) = &lc.mask {
                g *= mask;
            }
            let act = ls.activation;
            Zip::from(&mut g).and(&lc.pre).and(&lc.out).for_each(|g, &p, &o| *g *= act.derivative(p, o));
            let (dz, scale_grad, shift_grad) = match (&layer.norm, &lc.norm) {
                (Some(bn), Some((xhat, inv_std, train))) => {
                    let dscale = (&g * xhat).sum_axis(Axis(0));
                    let dshift = g.sum_axis(Axis(0));
                    let dxhat = &g * &bn.scale;
                    let dz = if *train {
                        let n = g.nrows() as f64;
                        let sum_dxhat = dxhat.sum_axis(Axis(0));
                        let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                        let mut dz = &dxhat * n - &sum_dxhat - &(xhat * &sum_dxhat_xhat);
                        dz *= &(inv_std / n);
                        dz
                    } else {
                        &dxhat * inv_std
                    };
                    (dz, Some(dscale), Some(dshift))
                }
                _ => (g, None, None),
            };
            let dw = lc.input.t().dot(&dz).as_standard_layout().into_owned();
            let db = dz.sum_axis(Axis(0));
            g = dz.dot(&layer.weight.t());
            grads.push(LayerGrads { weight: dw, bias: db, scale: scale_grad, shift: shift_grad });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g.as_standard_layout().into_owned()))
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn layers_mut_unversioned(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_difference, max_relative_error};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(input: usize, output: usize) -> MlpSpec {
        MlpSpec {
            input,
            layers: vec![LayerSpec { width: output, activation: Activation::Identity, batch_norm: false, dropout: 0.0 }],
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer { weight: Array2::eye(3), bias: Array1::zeros(3), norm: None };
        let mut net = Mlp::from_layers(linear(3, 3), vec![layer]).unwrap();
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.5]];
        let (y, _) = net.forward(x.view(), Mode::Train, &mut rng()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let layer = Layer { weight: Array2::zeros((4, 2)), bias: Array1::zeros(2), norm: None };
        let net = Mlp::from_layers(linear(4, 2), vec![layer]).unwrap();
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        assert!(net.predict(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut net = Mlp::new(MlpSpec::new(5, &[8, 6], 3, Activation::Identity, 0.2), &mut rng()).unwrap();
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        let (a, _) = net.forward(x.view(), Mode::Eval, &mut rng()).unwrap();
        let (b, _) = net.forward(x.view(), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(x.view()).unwrap());
    }

    #[test]
    fn shape_errors() {
        let mut net = Mlp::new(MlpSpec::new(5, &[8], 3, Activation::Identity, 0.0), &mut rng()).unwrap();
        let x = Array2::zeros((4, 6));
        assert!(matches!(net.forward(x.view(), Mode::Train, &mut rng()), Err(Error::Shape(_))));
        let single = Array2::zeros((1, 5));
        assert!(matches!(net.forward(single.view(), Mode::Train, &mut rng()), Err(Error::Shape(_))));
        assert!(net.forward(single.view(), Mode::Eval, &mut rng()).is_ok());
    }

    #[test]
    fn sum_loss_weight_grad_is_column_sums() {
        let mut net = Mlp::new(linear(3, 2), &mut rng()).unwrap();
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [-1.0, 0.5, 2.0]];
        let (y, cache) = net.forward(x.view(), Mode::Train, &mut rng()).unwrap();
        let (grads, _) = net.backward(cache, Array2::ones(y.raw_dim()).view()).unwrap();
        let col_sums = x.sum_axis(Axis(0));
        for j in 0..2 {
            for i in 0..3 {
                assert!((grads.layers[0].weight[[i, j]] - col_sums[i]).abs() < 1e-12);
            }
            assert_eq!(grads.layers[0].bias[j], 3.0);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut net = Mlp::new(MlpSpec::new(4, &[6, 5], 2, Activation::Sigmoid, 0.3), &mut rng()).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64).sin());
        let (y, cache) = net.forward(x.view(), Mode::Train, &mut rng()).unwrap();
        let (grads, dx) = net.backward(cache, Array2::zeros(y.raw_dim()).view()).unwrap();
        assert!(grads.is_all_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = Mlp::new(MlpSpec::new(3, &[4], 2, Activation::Identity, 0.0), &mut rng()).unwrap();
        let x = Array2::from_shape_fn((3, 3), |(i, j)| (i + j) as f64);
        let (y, cache) = net.forward(x.view(), Mode::Train, &mut rng()).unwrap();
        net.layer_mut(0).bias[0] += 1.0;
        assert!(matches!(net.backward(cache, y.view()), Err(Error::StaleCache)));
    }

    /// Loss `sum(w .* f(x))` with fixed random weights `w`, so every output matters.
    fn weighted_loss(net: &mut Mlp, x: &Array2<f64>, w: &Array2<f64>, mode: Mode) -> f64 {
        let (y, _) = net.forward(x.view(), mode, &mut rng()).unwrap();
        (&y * w).sum()
    }

    fn check_network(spec: MlpSpec, batch: usize, mode: Mode, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(spec.clone(), &mut r).unwrap();
        // Perturb normalization parameters away from the identity.
        for i in 0..net.layers.len() {
            if let Some(bn) = net.layer_mut(i).norm.as_mut() {
                bn.scale.mapv_inplace(|_| r.gen_range(0.5..1.5));
                bn.shift.mapv_inplace(|_| r.gen_range(-0.5..0.5));
                bn.running_mean.mapv_inplace(|_| r.gen_range(-0.5..0.5));
                bn.running_var.mapv_inplace(|_| r.gen_range(0.5..2.0));
            }
        }
        let x = Array2::from_shape_fn((batch, spec.input), |_| r.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((batch, spec.output_width()), |_| r.gen_range(-1.0..1.0));
        let (_, cache) = net.forward(x.view(), mode, &mut rng()).unwrap();
        let (grads, dx) = net.backward(cache, w.view()).unwrap();

        for (li, lg) in grads.layers.iter().enumerate() {
            let base = net.clone();
            let analytic: Vec<f64> = lg.weight.iter().copied().collect();
            let fd = central_difference(
                |p| {
                    let mut n = base.clone();
                    n.layer_mut(li).weight.as_slice_mut().unwrap().copy_from_slice(p);
                    weighted_loss(&mut n, &x, &w, mode)
                },
                base.layers[li].weight.as_slice().unwrap(),
                1e-5,
            );
            assert!(max_relative_error(&analytic, &fd) < 1e-4, "layer {li} weights");
            let fd = central_difference(
                |p| {
                    let mut n = base.clone();
                    n.layer_mut(li).bias.as_slice_mut().unwrap().copy_from_slice(p);
                    weighted_loss(&mut n, &x, &w, mode)
                },
                base.layers[li].bias.as_slice().unwrap(),
                1e-5,
            );
            assert!(max_relative_error(lg.bias.as_slice().unwrap(), &fd) < 1e-4, "layer {li} bias");
            if let Some(bn) = &base.layers[li].norm {
                let fd = central_difference(
                    |p| {
                        let mut n = base.clone();
                        n.layer_mut(li).norm.as_mut().unwrap().scale.as_slice_mut().unwrap().copy_from_slice(p);
                        weighted_loss(&mut n, &x, &w, mode)
                    },
                    bn.scale.as_slice().unwrap(),
                    1e-5,
                );
                assert!(max_relative_error(lg.scale.as_ref().unwrap().as_slice().unwrap(), &fd) < 1e-4);
                let fd = central_difference(
                    |p| {
                        let mut n = base.clone();
                        n.layer_mut(li).norm.as_mut().unwrap().shift.as_slice_mut().unwrap().copy_from_slice(p);
                        weighted_loss(&mut n, &x, &w, mode)
                    },
                    bn.shift.as_slice().unwrap(),
                    1e-5,
                );
                assert!(max_relative_error(lg.shift.as_ref().unwrap().as_slice().unwrap(), &fd) < 1e-4);
            }
        }
        let base = net.clone();
        let fd = central_difference(
            |p| {
                let mut n = base.clone();
                let xp = Array2::from_shape_vec(x.raw_dim(), p.to_vec()).unwrap();
                weighted_loss(&mut n, &xp, &w, mode)
            },
            x.as_slice().unwrap(),
            1e-5,
        );
        assert!(max_relative_error(dx.as_slice().unwrap(), &fd) < 1e-4, "input grads");
    }

    #[test]
    fn gradients_match_finite_differences_for_each_layer_type() {
        let acts = [Activation::Identity, Activation::LeakyRelu, Activation::Sigmoid, Activation::Softplus];
        for (k, act) in acts.into_iter().enumerate() {
            let plain = MlpSpec {
                input: 4,
                layers: vec![
                    LayerSpec { width: 6, activation: act, batch_norm: false, dropout: 0.0 },
                    LayerSpec { width: 3, activation: Activation::Identity, batch_norm: false, dropout: 0.0 },
                ],
            };
            check_network(plain, 4, Mode::Train, 100 + k as u64);
        }
        let normed = MlpSpec::new(5, &[8, 7], 3, Activation::Sigmoid, 0.0);
        check_network(normed.clone(), 4, Mode::Train, 200);
        check_network(normed, 3, Mode::Eval, 201);
    }

    #[test]
    fn random_small_networks_pass_gradient_check() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for case in 0..10 {
            let input = r.gen_range(1..=8);
            let hidden: Vec<usize> = (0..r.gen_range(0..3)).map(|_| r.gen_range(1..=8)).collect();
            let out = r.gen_range(1..=8);
            let spec = MlpSpec::new(input, &hidden, out, Activation::Softplus, 0.0);
            check_network(spec, r.gen_range(2..=4), Mode::Train, 300 + case);
        }
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode() {
        let spec = MlpSpec {
            input: 3,
            layers: vec![LayerSpec { width: 4, activation: Activation::Identity, batch_norm: true, dropout: 0.0 }],
        };
        let mut net = Mlp::new(spec, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((64, 3), |_| r.gen_range(-3.0..5.0));
        let (y, _) = net.forward(x.view(), Mode::Train, &mut rng()).unwrap();
        let mean = y.mean_axis(Axis(0)).unwrap();
        let var = y.var_axis(Axis(0), 0.0);
        for j in 0..4 {
            assert!(mean[j].abs() < 1e-5);
            // eps in the denominator shrinks the variance by var / (var + eps)
            assert!((var[j] - 1.0).abs() < 1e-5);
        }
        let bn = net.layers[0].norm.as_ref().unwrap();
        assert!(bn.running_var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        let spec = MlpSpec {
            input: 3,
            layers: vec![LayerSpec { width: 5, activation: Activation::Softplus, batch_norm: false, dropout: 0.3 }],
        };
        let mut net = Mlp::new(spec, &mut rng()).unwrap();
        let x = array![[0.3, -1.0, 2.0], [1.0, 0.5, -0.5]];
        let eval = net.predict(x.view()).unwrap();
        let n = 10_000;
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let mut sum = Array2::<f64>::zeros(eval.raw_dim());
        let mut sq = Array2::<f64>::zeros(eval.raw_dim());
        for _ in 0..n {
            let (y, _) = net.forward(x.view(), Mode::Train, &mut r).unwrap();
            sq += &(&y * &y);
            sum += &y;
        }
        let mean = &sum / n as f64;
        let var = &sq / n as f64 - &mean * &mean;
        Zip::from(&mean).and(&var).and(&eval).for_each(|&m, &v, &e| {
            let se = (v / n as f64).sqrt();
            assert!((m - e).abs() <= 3.0 * se + 1e-12, "mean {m} eval {e} se {se}");
        });
    }

    #[test]
    fn seeded_cycle_is_bit_reproducible() {
        use crate::nn::{AdamConfig, AdamState};
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(21);
            let mut net = Mlp::new(MlpSpec::new(4, &[6], 2, Activation::Identity, 0.2), &mut r).unwrap();
            let mut adam = AdamState::new(AdamConfig::default());
            let x = Array2::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
            for _ in 0..5 {
                let (y, cache) = net.forward(x.view(), Mode::Train, &mut r).unwrap();
                let (g, _) = net.backward(cache, y.view()).unwrap();
                adam.step(&mut net, &g, 1e-2).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }
}
