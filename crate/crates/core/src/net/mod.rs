//! Tiny fully-convolutional segmentation network with a mean head and a
//! log-variance head, exact reverse-mode gradients, Adam, and checkpoints.
//!
//! Layout: conv3x3(in -> 16) + ReLU, conv3x3(16 -> 16) + ReLU,
//! conv3x3(16 -> 2C). The first `C` output channels are logit means, the
//! last `C` are log-variances.

pub mod adam;
pub mod checkpoint;
mod conv;
pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::GaussianLogitMap;
use crate::scalar::Scalar;
use crate::tensor::TensorBuf;

use conv::TAPS;

pub use adam::AdamState;
pub use gradcheck::finite_diff_check;

/// Hidden width of both intermediate layers.
pub const HIDDEN_CHANNELS: usize = 16;
/// Initial bias of the log-variance head (sigma^2 = e^-2).
pub const LOG_VAR_BIAS_INIT: f64 = -2.0;

/// A named collection of parameter tensors.
pub trait ParamSet<T> {
    fn tensors(&self) -> Vec<&TensorBuf<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>>;
    fn names(&self) -> Vec<String>;
}

impl<T> ParamSet<T> for Vec<TensorBuf<T>> {
    fn tensors(&self) -> Vec<&TensorBuf<T>> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>> {
        self.iter_mut().collect()
    }

    fn names(&self) -> Vec<String> {
        (0..self.len()).map(|i| format!("param{i}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvLayer<T> {
    /// (out, in, 9)
    pub(crate) weight: TensorBuf<T>,
    /// (out, 1, 1)
    pub(crate) bias: TensorBuf<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn in_channels(&self) -> usize {
        self.weight.height()
    }

    fn out_channels(&self) -> usize {
        self.weight.channels()
    }

    /// Narrow layers past the first skip the column matrix.
    fn is_direct(&self, index: usize) -> bool {
        index > 0 && self.out_channels() <= conv::SMALL_OUT
    }

    fn col_len(&self, index: usize, hw: usize) -> usize {
        if self.is_direct(index) {
            0
        } else {
            self.in_channels() * TAPS * hw
        }
    }
}

/// Network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<ConvLayer<T>>,
    classes: usize,
}

/// Activations kept from the forward pass for the backward pass. Reusing one
/// cache across calls avoids reallocating the large column buffers.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache<T> {
    height: usize,
    width: usize,
    /// im2col of each layer's input (empty for direct-form layers).
    cols: Vec<Vec<T>>,
    /// Post-ReLU output of each hidden layer.
    hidden: Vec<Vec<T>>,
    head: Vec<T>,
    d_out: Vec<T>,
    /// Input gradient of a direct-form layer, kept apart from `d_col` so the
    /// column buffer never shrinks.
    d_in: Vec<T>,
    d_col: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn new() -> Self {
        Self {
            height: 0,
            width: 0,
            cols: Vec::new(),
            hidden: Vec::new(),
            head: Vec::new(),
            d_out: Vec::new(),
            d_in: Vec::new(),
            d_col: Vec::new(),
        }
    }
}

/// Parameter gradients, in the same order as [`ParamSet::tensors`].
pub type Gradients<T> = Vec<TensorBuf<T>>;

impl<T: Scalar> Network<T> {
    /// Glorot-uniform weights, zero biases, log-variance bias at -2.
    pub fn new(in_channels: usize, classes: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || classes == 0 {
            return Err(Error::InvalidParameter(
                "network needs at least one input channel and one class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [
            (in_channels, HIDDEN_CHANNELS),
            (HIDDEN_CHANNELS, HIDDEN_CHANNELS),
            (HIDDEN_CHANNELS, 2 * classes),
        ];
        let layers = dims
            .iter()
            .map(|&(cin, cout)| {
                let bound = (6.0 / ((cin + cout) * TAPS) as f64).sqrt();
                let data = (0..cout * cin * TAPS)
                    .map(|_| T::of(rng.gen_range(-bound..bound)))
                    .collect();
                ConvLayer {
                    weight: TensorBuf::from_vec([cout, cin, TAPS], data).expect("sized"),
                    bias: TensorBuf::zeros(cout, 1, 1),
                }
            })
            .collect::<Vec<_>>();
        let mut net = Self { layers, classes };
        let head = net.layers.last_mut().expect("three layers");
        for b in &mut head.bias.data_mut()[classes..] {
            *b = T::of(LOG_VAR_BIAS_INIT);
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeros(in_channels: usize, classes: usize) -> Self {
        let mut net = Self::new(in_channels, classes, 0).expect("valid dims");
        for t in net.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        net
    }

    pub(crate) fn from_layers(layers: Vec<ConvLayer<T>>) -> Result<Self> {
        if layers.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 conv layers, got {}",
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.width() != TAPS || l.bias.shape() != [l.out_channels(), 1, 1] {
                return Err(Error::ShapeMismatch(format!("layer {i} has malformed tensors")));
            }
            if i > 0 && layers[i - 1].out_channels() != l.in_channels() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs but previous layer emits {}",
                    l.in_channels(),
                    layers[i - 1].out_channels()
                )));
            }
        }
        let out = layers[2].out_channels();
        if out == 0 || !out.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "head must emit an even number of channels, got {out}"
            )));
        }
        Ok(Self {
            layers,
            classes: out / 2,
        })
    }

    /// Number of logit classes C (the head emits 2C channels).
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            classes: self.classes,
        }
    }

    /// Mean and log-variance maps for one image, plus the cache for
    /// [`Network::backward`].
    pub fn forward(&self, image: &TensorBuf<T>) -> Result<(GaussianLogitMap<T>, ForwardCache<T>)> {
        let mut cache = ForwardCache::new();
        let out = self.forward_with(image, &mut cache)?;
        Ok((out, cache))
    }

    /// [`Network::forward`] writing its activations into an existing cache.
    pub fn forward_with(&self, image: &TensorBuf<T>, cache: &mut ForwardCache<T>) -> Result<GaussianLogitMap<T>> {
        let [c, h, w] = image.shape();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "image has {c} channels, network expects {}",
                self.in_channels()
            )));
        }
        if h < 3 || w < 3 {
            return Err(Error::ShapeMismatch(format!("image {h}x{w} is smaller than 3x3")));
        }
        let hw = h * w;
        let n = self.layers.len();
        cache.height = h;
        cache.width = w;
        cache.cols.resize_with(n, Vec::new);
        cache.hidden.resize_with(n - 1, Vec::new);
        for (i, layer) in self.layers.iter().enumerate() {
            let cin = layer.in_channels();
            let cout = layer.out_channels();
            let (done, rest) = cache.hidden.split_at_mut(i.min(n - 1));
            let input = if i == 0 { image.data() } else { &done[i - 1] };
            let out = if i + 1 < n { &mut rest[0] } else { &mut cache.head };
            if layer.is_direct(i) {
                cache.cols[i].clear();
                conv::direct_forward_into(layer.weight.data(), layer.bias.data(), input, cin, cout, (h, w), out);
            } else {
                conv::im2col_into(input, cin, h, w, &mut cache.cols[i]);
                conv::conv_forward_into(layer.weight.data(), layer.bias.data(), &cache.cols[i], cin, cout, hw, out);
            }
            if i + 1 < n {
                out.iter_mut().for_each(|v| {
                    if *v <= T::zero() {
                        *v = T::zero();
                    }
                });
            }
        }
        let split = self.classes * hw;
        let mu = TensorBuf::from_vec([self.classes, h, w], cache.head[..split].to_vec())?;
        let log_var = TensorBuf::from_vec([self.classes, h, w], cache.head[split..].to_vec())?;
        GaussianLogitMap::new(mu, log_var)
    }

    /// Parameter gradients of a scalar loss given its gradients with respect
    /// to the mean and log-variance maps.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_mu: &TensorBuf<T>,
        d_log_var: &TensorBuf<T>,
    ) -> Result<Gradients<T>> {
        let mut grads = zeros_like(self);
        let mut cache = cache.clone();
        self.backward_acc(&mut cache, d_mu, d_log_var, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients onto `grads`, using the scratch space of
    /// `cache`.
    pub fn backward_acc(
        &self,
        cache: &mut ForwardCache<T>,
        d_mu: &TensorBuf<T>,
        d_log_var: &TensorBuf<T>,
        grads: &mut [TensorBuf<T>],
    ) -> Result<()> {
        let expected = [self.classes, cache.height, cache.width];
        if d_mu.shape() != expected || d_log_var.shape() != expected {
            return Err(Error::ShapeMismatch(format!(
                "output gradients {:?}/{:?} do not match forward output {expected:?}",
                d_mu.shape(),
                d_log_var.shape()
            )));
        }
        let n = self.layers.len();
        let (h, w) = (cache.height, cache.width);
        let hw = h * w;
        let layout_ok = cache.cols.len() == n
            && cache.hidden.len() + 1 == n
            && self
                .layers
                .iter()
                .enumerate()
                .zip(&cache.cols)
                .all(|((i, l), c)| c.len() == l.col_len(i, hw))
            && self
                .layers
                .iter()
                .zip(&cache.hidden)
                .all(|(l, a)| a.len() == l.out_channels() * hw);
        if !layout_ok {
            return Err(Error::ShapeMismatch("forward cache belongs to another network".into()));
        }
        if grads.len() != 2 * n
            || grads.iter().zip(self.tensors()).any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::ShapeMismatch("gradient buffers do not match the network".into()));
        }
        let ForwardCache {
            cols,
            hidden,
            d_out,
            d_in,
            d_col,
            ..
        } = cache;
        d_out.clear();
        d_out.extend_from_slice(d_mu.data());
        d_out.extend_from_slice(d_log_var.data());
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let cin = layer.in_channels();
            let cout = layer.out_channels();
            if i + 1 < n {
                // ReLU, with derivative 0 at 0.
                for (g, &a) in d_out.iter_mut().zip(&hidden[i]) {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            let (gw, gb) = (gw[0].data_mut(), gb[0].data_mut());
            if layer.is_direct(i) {
                conv::direct_param_grads_acc(d_out, &hidden[i - 1], cin, cout, (h, w), gw, gb);
                if i > 0 {
                    conv::direct_input_grad_into(layer.weight.data(), d_out, cin, cout, (h, w), d_in);
                    std::mem::swap(d_out, d_in);
                }
            } else {
                conv::conv_param_grads_acc(d_out, &cols[i], cin, cout, hw, gw, gb);
                if i > 0 {
                    conv::conv_input_grad_cols_into(layer.weight.data(), d_out, cin, cout, hw, d_col);
                    conv::col2im_into(d_col, cin, h, w, d_out);
                }
            }
        }
        Ok(())
    }
}

impl<T> ParamSet<T> for Network<T> {
    fn tensors(&self) -> Vec<&TensorBuf<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("conv{}.weight", i + 1), format!("conv{}.bias", i + 1)])
            .collect()
    }
}

/// `acc += scale * g`, element-wise over matching tensor lists.
pub fn accumulate<T: Scalar>(acc: &mut [TensorBuf<T>], g: &[TensorBuf<T>], scale: T) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += scale * y;
        }
    }
}

/// Zero tensors shaped like the parameters of `params`.
pub fn zeros_like<T: Scalar, P: ParamSet<T>>(params: &P) -> Vec<TensorBuf<T>> {
    params.tensors().iter().map(|t| t.zeros_like()).collect()
}
