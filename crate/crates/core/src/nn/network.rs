//! The deeply-supervised 3D encoder-decoder segmentation network.
//!
//! The encoder runs `levels` stages of two 3x3x3 convolutions (each
//! followed by batch-norm and ReLU) and a 2x2x2 max pool, doubling the
//! channel count per stage. A two-convolution bottleneck sits at the
//! lowest resolution. The decoder mirrors the encoder with 4x4x4
//! stride-2 deconvolutions, additive skips from the matching encoder
//! stage, and two convolutions per stage. Prediction heads attach to
//! decoder outputs: each up-samples to full resolution via
//! deconvolution(s) and projects to class logits with a 1x1x1
//! convolution. Losses from the heads combine under fixed weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    batchnorm3d_backward, batchnorm3d_eval, batchnorm3d_train, conv1x1_backward, conv1x1_forward,
    conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_forward, BnCache, RunningStats,
};
use super::tensor::{Scalar, Tensor5};
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
/// Standard deviation of the head projection weights; kept small so a
/// fresh network emits near-uniform class probabilities.
const HEAD_INIT_STD: f64 = 0.01;

/// Topology and input-normalization parameters of one network scale.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    /// Cube side of the input patch (64, 32 or 16 in the standard setup).
    pub input_size: usize,
    /// Channels of the first encoder stage; doubles per level.
    pub base_channels: usize,
    /// Number of pooling stages.
    pub levels: usize,
    /// Auxiliary heads: 2 for the 64-cube scale, 1 for the smaller ones.
    pub num_aux: usize,
    /// Per-head loss weights, `[aux_1, .., aux_k, main]`, normalized to
    /// sum to one.
    pub loss_weights: Vec<f32>,
    pub classes: usize,
    /// Intensity window mapped linearly to [0, 1] (values clipped).
    pub hu_window: (f32, f32),
}

impl NetworkConfig {
    /// Standard configuration for one scale: the 64-cube network carries
    /// two auxiliary heads with loss ratio 1:2:5, the smaller ones a
    /// single auxiliary head with ratio 1:3.
    pub fn for_scale(input_size: usize) -> Self {
        let (num_aux, raw): (usize, Vec<f32>) = if input_size >= 64 {
            (2, vec![1.0, 2.0, 5.0])
        } else {
            (1, vec![1.0, 3.0])
        };
        let sum: f32 = raw.iter().sum();
        NetworkConfig {
            input_size,
            base_channels: 8,
            levels: 3,
            num_aux,
            loss_weights: raw.iter().map(|w| w / sum).collect(),
            classes: 3,
            hu_window: (-125.0, 275.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config("levels and base_channels must be >= 1".into()));
        }
        let stride = 1usize << self.levels;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^levels = {stride}",
                self.input_size
            )));
        }
        if self.num_aux + 1 > self.levels {
            return Err(Error::Config(format!(
                "num_aux {} exceeds levels - 1 = {}",
                self.num_aux,
                self.levels - 1
            )));
        }
        if self.loss_weights.len() != self.num_aux + 1 {
            return Err(Error::Config(format!(
                "{} loss weights for {} heads",
                self.loss_weights.len(),
                self.num_aux + 1
            )));
        }
        if self.loss_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(self.hu_window.0 < self.hu_window.1) {
            return Err(Error::Config("hu_window must be an increasing interval".into()));
        }
        Ok(())
    }

    /// Map a raw intensity into [0, 1] through the configured window.
    #[inline]
    pub fn normalize_hu(&self, hu: i16) -> f32 {
        let (lo, hi) = self.hu_window;
        ((hu as f32 - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

fn draw_tensor<T: Scalar>(shape: [usize; 5], std: f64, rng: &mut ChaCha8Rng) -> Tensor5<T> {
    let dist = Normal::new(0.0, std).expect("std is non-negative");
    let n: usize = shape.iter().product();
    Tensor5::new(shape, (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
}

struct ConvBnRelu<T> {
    weight: Tensor5<T>,
    grad_weight: Tensor5<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    running: RunningStats<T>,
    cache_x: Option<Tensor5<T>>,
    cache_bn: Option<BnCache<T>>,
    cache_y: Option<Tensor5<T>>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new(ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = ci * 27;
        let weight = draw_tensor([co, ci, 3, 3, 3], (2.0 / fan_in as f64).sqrt(), rng);
        ConvBnRelu {
            grad_weight: Tensor5::zeros(weight.shape()),
            weight,
            gamma: vec![T::one(); co],
            beta: vec![T::zero(); co],
            grad_gamma: vec![T::zero(); co],
            grad_beta: vec![T::zero(); co],
            running: RunningStats::new(co),
            cache_x: None,
            cache_bn: None,
            cache_y: None,
        }
    }

    fn forward_train(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let z = conv3d_forward(x, &self.weight)?;
        let (bn, cache) = batchnorm3d_train(
            &z,
            &self.gamma,
            &self.beta,
            T::from_f64(BN_EPS),
            T::from_f64(BN_MOMENTUM),
            &mut self.running,
        );
        let y = relu_forward(&bn);
        self.cache_x = Some(x.clone());
        self.cache_bn = Some(cache);
        self.cache_y = Some(y.clone());
        Ok(y)
    }

    fn forward_eval(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let z = conv3d_forward(x, &self.weight)?;
        let bn = batchnorm3d_eval(&z, &self.gamma, &self.beta, T::from_f64(BN_EPS), &self.running)?;
        Ok(relu_forward(&bn))
    }

    fn backward(&mut self, gy: &Tensor5<T>) -> Result<Tensor5<T>> {
        let y = self.cache_y.take().expect("backward without forward");
        // y > 0 exactly where the pre-activation was > 0
        let g = relu_backward(&y, gy);
        let cache = self.cache_bn.take().expect("backward without forward");
        let (gz, dgamma, dbeta) = batchnorm3d_backward(&cache, &self.gamma, &g);
        for (a, b) in self.grad_gamma.iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in self.grad_beta.iter_mut().zip(dbeta) {
            *a += b;
        }
        let x = self.cache_x.take().expect("backward without forward");
        let (gx, gw) = conv3d_backward(&x, &self.weight, &gz)?;
        self.grad_weight.add_assign(&gw);
        Ok(gx)
    }
}

struct DeconvBnRelu<T> {
    weight: Tensor5<T>,
    grad_weight: Tensor5<T>,
    gamma: Vec<T>,
    beta: Vec<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    running: RunningStats<T>,
    cache_x: Option<Tensor5<T>>,
    cache_bn: Option<BnCache<T>>,
    cache_y: Option<Tensor5<T>>,
}

impl<T: Scalar> DeconvBnRelu<T> {
    fn new(ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Self {
        // each output voxel receives ci * (4/2)^3 kernel taps
        let fan_in = ci * 8;
        let weight = draw_tensor([ci, co, 4, 4, 4], (2.0 / fan_in as f64).sqrt(), rng);
        DeconvBnRelu {
            grad_weight: Tensor5::zeros(weight.shape()),
            weight,
            gamma: vec![T::one(); co],
            beta: vec![T::zero(); co],
            grad_gamma: vec![T::zero(); co],
            grad_beta: vec![T::zero(); co],
            running: RunningStats::new(co),
            cache_x: None,
            cache_bn: None,
            cache_y: None,
        }
    }

    fn forward_train(&mut self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let z = deconv3d_forward(x, &self.weight)?;
        let (bn, cache) = batchnorm3d_train(
            &z,
            &self.gamma,
            &self.beta,
            T::from_f64(BN_EPS),
            T::from_f64(BN_MOMENTUM),
            &mut self.running,
        );
        let y = relu_forward(&bn);
        self.cache_x = Some(x.clone());
        self.cache_bn = Some(cache);
        self.cache_y = Some(y.clone());
        Ok(y)
    }

    fn forward_eval(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let z = deconv3d_forward(x, &self.weight)?;
        let bn = batchnorm3d_eval(&z, &self.gamma, &self.beta, T::from_f64(BN_EPS), &self.running)?;
        Ok(relu_forward(&bn))
    }

    fn backward(&mut self, gy: &Tensor5<T>) -> Result<Tensor5<T>> {
        let y = self.cache_y.take().expect("backward without forward");
        let g = relu_backward(&y, gy);
        let cache = self.cache_bn.take().expect("backward without forward");
        let (gz, dgamma, dbeta) = batchnorm3d_backward(&cache, &self.gamma, &g);
        for (a, b) in self.grad_gamma.iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in self.grad_beta.iter_mut().zip(dbeta) {
            *a += b;
        }
        let x = self.cache_x.take().expect("backward without forward");
        let (gx, gw) = deconv3d_backward(&x, &self.weight, &gz)?;
        self.grad_weight.add_assign(&gw);
        Ok(gx)
    }
}

struct Conv1x1<T> {
    weight: Tensor5<T>,
    bias: Vec<T>,
    grad_weight: Tensor5<T>,
    grad_bias: Vec<T>,
    cache_x: Option<Tensor5<T>>,
}

impl<T: Scalar> Conv1x1<T> {
    fn new(ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = draw_tensor([co, ci, 1, 1, 1], HEAD_INIT_STD, rng);
        Conv1x1 {
            grad_weight: Tensor5::zeros(weight.shape()),
            weight,
            bias: vec![T::zero(); co],
            grad_bias: vec![T::zero(); co],
            cache_x: None,
        }
    }

    fn forward_train(&mut self, x: &Tensor5<T>) -> Tensor5<T> {
        self.cache_x = Some(x.clone());
        conv1x1_forward(x, &self.weight, &self.bias)
    }

    fn forward_eval(&self, x: &Tensor5<T>) -> Tensor5<T> {
        conv1x1_forward(x, &self.weight, &self.bias)
    }

    fn backward(&mut self, gy: &Tensor5<T>) -> Tensor5<T> {
        let x = self.cache_x.take().expect("backward without forward");
        let (gx, gw, gb) = conv1x1_backward(&x, &self.weight, gy);
        self.grad_weight.add_assign(&gw);
        for (a, b) in self.grad_bias.iter_mut().zip(gb) {
            *a += b;
        }
        gx
    }
}

struct EncoderStage<T> {
    conv1: ConvBnRelu<T>,
    conv2: ConvBnRelu<T>,
    pool_argmax: Option<Vec<u32>>,
    pool_in_shape: [usize; 5],
}

struct DecoderStage<T> {
    up: DeconvBnRelu<T>,
    conv1: ConvBnRelu<T>,
    conv2: ConvBnRelu<T>,
}

struct AuxHead<T> {
    ups: Vec<DeconvBnRelu<T>>,
    proj: Conv1x1<T>,
}

/// Logits returned by a forward pass; every tensor has full input
/// resolution and `classes` channels. `aux[0]` is the deepest head.
pub struct NetworkOutputs<T> {
    pub main: Tensor5<T>,
    pub aux: Vec<Tensor5<T>>,
}

/// A deeply-supervised encoder-decoder with its parameters, batch-norm
/// state, and (during training) per-layer caches.
pub struct Network<T: Scalar> {
    pub config: NetworkConfig,
    encoder: Vec<EncoderStage<T>>,
    bot1: ConvBnRelu<T>,
    bot2: ConvBnRelu<T>,
    decoder: Vec<DecoderStage<T>>,
    aux_heads: Vec<AuxHead<T>>,
    main_head: Conv1x1<T>,
}

/// Build a network with weights drawn deterministically from `seed`:
/// fan-in-scaled Gaussians for kernels, scale 1 / shift 0 for batch
/// norm, and small Gaussians for the head projections.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = config.base_channels;
    let levels = config.levels;

    let mut encoder = Vec::with_capacity(levels);
    for k in 0..levels {
        let ci = if k == 0 { 1 } else { base << (k - 1) };
        let co = base << k;
        encoder.push(EncoderStage {
            conv1: ConvBnRelu::new(ci, co, &mut rng),
            conv2: ConvBnRelu::new(co, co, &mut rng),
            pool_argmax: None,
            pool_in_shape: [0; 5],
        });
    }
    let cb = base << levels;
    let bot1 = ConvBnRelu::new(base << (levels - 1), cb, &mut rng);
    let bot2 = ConvBnRelu::new(cb, cb, &mut rng);

    let mut decoder = Vec::with_capacity(levels);
    for i in 0..levels {
        let up_in = base << (levels - i);
        let up_out = base << (levels - 1 - i);
        decoder.push(DecoderStage {
            up: DeconvBnRelu::new(up_in, up_out, &mut rng),
            conv1: ConvBnRelu::new(up_out, up_out, &mut rng),
            conv2: ConvBnRelu::new(up_out, up_out, &mut rng),
        });
    }

    let mut aux_heads = Vec::with_capacity(config.num_aux);
    for j in 0..config.num_aux {
        let hops = levels - 1 - j;
        let mut ups = Vec::with_capacity(hops);
        let mut c = base << hops;
        for _ in 0..hops {
            ups.push(DeconvBnRelu::new(c, c / 2, &mut rng));
            c /= 2;
        }
        aux_heads.push(AuxHead {
            ups,
            proj: Conv1x1::new(base, config.classes, &mut rng),
        });
    }
    let main_head = Conv1x1::new(base, config.classes, &mut rng);

    Ok(Network {
        config: config.clone(),
        encoder,
        bot1,
        bot2,
        decoder,
        aux_heads,
        main_head,
    })
}

impl<T: Scalar> Network<T> {
    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        let [_, c, d, h, w] = x.shape();
        let s = self.config.input_size;
        if c != 1 || d != s || h != s || w != s {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match 1 x {s}^3",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass; caches activations for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor5<T>) -> Result<NetworkOutputs<T>> {
        self.check_input(x)?;
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for stage in &mut self.encoder {
            let y = stage.conv2.forward_train(&stage.conv1.forward_train(&cur)?)?;
            stage.pool_in_shape = y.shape();
            let (pooled, argmax) = maxpool3d_forward(&y)?;
            stage.pool_argmax = Some(argmax);
            skips.push(y);
            cur = pooled;
        }
        cur = self.bot2.forward_train(&self.bot1.forward_train(&cur)?)?;

        let mut aux = Vec::with_capacity(self.aux_heads.len());
        for i in 0..levels {
            let mut u = self.decoder[i].up.forward_train(&cur)?;
            u.add_assign(&skips[levels - 1 - i]);
            cur = self.decoder[i]
                .conv2
                .forward_train(&self.decoder[i].conv1.forward_train(&u)?)?;
            if i < self.aux_heads.len() {
                let head = &mut self.aux_heads[i];
                let mut t = cur.clone();
                for up in &mut head.ups {
                    t = up.forward_train(&t)?;
                }
                aux.push(head.proj.forward_train(&t));
            }
        }
        let main = self.main_head.forward_train(&cur);
        Ok(NetworkOutputs { main, aux })
    }

    /// Pure eval-mode forward pass over immutable weights; requires
    /// batch-norm statistics (trained or loaded).
    pub fn forward_eval(&self, x: &Tensor5<T>) -> Result<NetworkOutputs<T>> {
        let (main, aux) = self.eval_impl(x, true)?;
        Ok(NetworkOutputs { main, aux })
    }

    /// Eval-mode forward computing only the main head; the sliding-window
    /// scanner uses this to skip auxiliary-head work.
    pub fn forward_eval_main(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        Ok(self.eval_impl(x, false)?.0)
    }

    fn eval_impl(&self, x: &Tensor5<T>, with_aux: bool) -> Result<(Tensor5<T>, Vec<Tensor5<T>>)> {
        self.check_input(x)?;
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for stage in &self.encoder {
            let y = stage.conv2.forward_eval(&stage.conv1.forward_eval(&cur)?)?;
            let (pooled, _) = maxpool3d_forward(&y)?;
            skips.push(y);
            cur = pooled;
        }
        cur = self.bot2.forward_eval(&self.bot1.forward_eval(&cur)?)?;
        let mut aux = Vec::new();
        for i in 0..levels {
            let mut u = self.decoder[i].up.forward_eval(&cur)?;
            u.add_assign(&skips[levels - 1 - i]);
            cur = self.decoder[i]
                .conv2
                .forward_eval(&self.decoder[i].conv1.forward_eval(&u)?)?;
            if with_aux && i < self.aux_heads.len() {
                let head = &self.aux_heads[i];
                let mut t = cur.clone();
                for up in &head.ups {
                    t = up.forward_eval(&t)?;
                }
                aux.push(head.proj.forward_eval(&t));
            }
        }
        Ok((self.main_head.forward_eval(&cur), aux))
    }

    /// Backward pass from per-head logit gradients (already scaled by the
    /// loss weights); accumulates parameter gradients.
    pub fn backward(&mut self, grad_main: &Tensor5<T>, grad_aux: &[Tensor5<T>]) -> Result<()> {
        if grad_aux.len() != self.aux_heads.len() {
            return Err(Error::Shape(format!(
                "{} aux gradients for {} aux heads",
                grad_aux.len(),
                self.aux_heads.len()
            )));
        }
        let levels = self.config.levels;
        let mut g = self.main_head.backward(grad_main);
        let mut skip_grads: Vec<Option<Tensor5<T>>> = (0..levels).map(|_| None).collect();
        for i in (0..levels).rev() {
            if i < self.aux_heads.len() {
                let head = &mut self.aux_heads[i];
                let mut hg = head.proj.backward(&grad_aux[i]);
                for up in head.ups.iter_mut().rev() {
                    hg = up.backward(&hg)?;
                }
                g.add_assign(&hg);
            }
            let stage = &mut self.decoder[i];
            g = stage.conv1.backward(&stage.conv2.backward(&g)?)?;
            skip_grads[levels - 1 - i] = Some(g.clone());
            g = stage.up.backward(&g)?;
        }
        g = self.bot1.backward(&self.bot2.backward(&g)?)?;
        for k in (0..levels).rev() {
            let stage = &mut self.encoder[k];
            let argmax = stage.pool_argmax.take().expect("backward without forward");
            g = maxpool3d_backward(stage.pool_in_shape, &argmax, &g);
            g.add_assign(skip_grads[k].as_ref().expect("skip gradient missing"));
            g = stage.conv1.backward(&stage.conv2.backward(&g)?)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, _, grad, _| {
            for g in grad {
                *g = T::zero();
            }
        });
    }

    /// Visit `(name, values, grads, decays)` for every trainable
    /// parameter in a fixed order. Batch-norm scale/shift report
    /// `decays = false`.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut [T], &mut [T], bool)) {
        fn conv<T: Scalar>(
            l: &mut ConvBnRelu<T>,
            prefix: &str,
            f: &mut impl FnMut(&str, &mut [T], &mut [T], bool),
        ) {
            f(&format!("{prefix}.weight"), l.weight.data_mut(), l.grad_weight.data_mut(), true);
            f(&format!("{prefix}.bn.gamma"), &mut l.gamma, &mut l.grad_gamma, false);
            f(&format!("{prefix}.bn.beta"), &mut l.beta, &mut l.grad_beta, false);
        }
        fn deconv<T: Scalar>(
            l: &mut DeconvBnRelu<T>,
            prefix: &str,
            f: &mut impl FnMut(&str, &mut [T], &mut [T], bool),
        ) {
            f(&format!("{prefix}.weight"), l.weight.data_mut(), l.grad_weight.data_mut(), true);
            f(&format!("{prefix}.bn.gamma"), &mut l.gamma, &mut l.grad_gamma, false);
            f(&format!("{prefix}.bn.beta"), &mut l.beta, &mut l.grad_beta, false);
        }
        fn proj<T: Scalar>(
            l: &mut Conv1x1<T>,
            prefix: &str,
            f: &mut impl FnMut(&str, &mut [T], &mut [T], bool),
        ) {
            f(&format!("{prefix}.weight"), l.weight.data_mut(), l.grad_weight.data_mut(), true);
            f(&format!("{prefix}.bias"), &mut l.bias, &mut l.grad_bias, true);
        }
        for (k, stage) in self.encoder.iter_mut().enumerate() {
            conv(&mut stage.conv1, &format!("enc{k}.conv1"), f);
            conv(&mut stage.conv2, &format!("enc{k}.conv2"), f);
        }
        conv(&mut self.bot1, "bottleneck.conv1", f);
        conv(&mut self.bot2, "bottleneck.conv2", f);
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            deconv(&mut stage.up, &format!("dec{i}.up"), f);
            conv(&mut stage.conv1, &format!("dec{i}.conv1"), f);
            conv(&mut stage.conv2, &format!("dec{i}.conv2"), f);
        }
        for (j, head) in self.aux_heads.iter_mut().enumerate() {
            for (u, up) in head.ups.iter_mut().enumerate() {
                deconv(up, &format!("aux{j}.up{u}"), f);
            }
            proj(&mut head.proj, &format!("aux{j}.proj"), f);
        }
        proj(&mut self.main_head, "main.proj", f);
    }

    /// Visit every serialized tensor — parameters plus batch-norm running
    /// stats — in a fixed order.
    fn visit_state(&self, f: &mut impl FnMut(&str, &[T])) {
        fn conv<T: Scalar>(l: &ConvBnRelu<T>, prefix: &str, f: &mut impl FnMut(&str, &[T])) {
            f(&format!("{prefix}.weight"), l.weight.data());
            f(&format!("{prefix}.bn.gamma"), &l.gamma);
            f(&format!("{prefix}.bn.beta"), &l.beta);
            f(&format!("{prefix}.bn.running_mean"), &l.running.mean);
            f(&format!("{prefix}.bn.running_var"), &l.running.var);
        }
        fn deconv<T: Scalar>(l: &DeconvBnRelu<T>, prefix: &str, f: &mut impl FnMut(&str, &[T])) {
            f(&format!("{prefix}.weight"), l.weight.data());
            f(&format!("{prefix}.bn.gamma"), &l.gamma);
            f(&format!("{prefix}.bn.beta"), &l.beta);
            f(&format!("{prefix}.bn.running_mean"), &l.running.mean);
            f(&format!("{prefix}.bn.running_var"), &l.running.var);
        }
        fn proj<T: Scalar>(l: &Conv1x1<T>, prefix: &str, f: &mut impl FnMut(&str, &[T])) {
            f(&format!("{prefix}.weight"), l.weight.data());
            f(&format!("{prefix}.bias"), &l.bias);
        }
        for (k, stage) in self.encoder.iter().enumerate() {
            conv(&stage.conv1, &format!("enc{k}.conv1"), f);
            conv(&stage.conv2, &format!("enc{k}.conv2"), f);
        }
        conv(&self.bot1, "bottleneck.conv1", f);
        conv(&self.bot2, "bottleneck.conv2", f);
        for (i, stage) in self.decoder.iter().enumerate() {
            deconv(&stage.up, &format!("dec{i}.up"), f);
            conv(&stage.conv1, &format!("dec{i}.conv1"), f);
            conv(&stage.conv2, &format!("dec{i}.conv2"), f);
        }
        for (j, head) in self.aux_heads.iter().enumerate() {
            for (u, up) in head.ups.iter().enumerate() {
                deconv(up, &format!("aux{j}.up{u}"), f);
            }
            proj(&head.proj, &format!("aux{j}.proj"), f);
        }
        proj(&self.main_head, "main.proj", f);
    }

    fn visit_state_mut(&mut self, f: &mut impl FnMut(&str, &mut [T])) {
        fn conv<T: Scalar>(l: &mut ConvBnRelu<T>, prefix: &str, f: &mut impl FnMut(&str, &mut [T])) {
            f(&format!("{prefix}.weight"), l.weight.data_mut());
            f(&format!("{prefix}.bn.gamma"), &mut l.gamma);
            f(&format!("{prefix}.bn.beta"), &mut l.beta);
            f(&format!("{prefix}.bn.running_mean"), &mut l.running.mean);
            f(&format!("{prefix}.bn.running_var"), &mut l.running.var);
        }
        fn deconv<T: Scalar>(
            l: &mut DeconvBnRelu<T>,
            prefix: &str,
            f: &mut impl FnMut(&str, &mut [T]),
        ) {
            f(&format!("{prefix}.weight"), l.weight.data_mut());
            f(&format!("{prefix}.bn.gamma"), &mut l.gamma);
            f(&format!("{prefix}.bn.beta"), &mut l.beta);
            f(&format!("{prefix}.bn.running_mean"), &mut l.running.mean);
            f(&format!("{prefix}.bn.running_var"), &mut l.running.var);
        }
        fn proj<T: Scalar>(l: &mut Conv1x1<T>, prefix: &str, f: &mut impl FnMut(&str, &mut [T])) {
            f(&format!("{prefix}.weight"), l.weight.data_mut());
            f(&format!("{prefix}.bias"), &mut l.bias);
        }
        for (k, stage) in self.encoder.iter_mut().enumerate() {
            conv(&mut stage.conv1, &format!("enc{k}.conv1"), f);
            conv(&mut stage.conv2, &format!("enc{k}.conv2"), f);
        }
        conv(&mut self.bot1, "bottleneck.conv1", f);
        conv(&mut self.bot2, "bottleneck.conv2", f);
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            deconv(&mut stage.up, &format!("dec{i}.up"), f);
            conv(&mut stage.conv1, &format!("dec{i}.conv1"), f);
            conv(&mut stage.conv2, &format!("dec{i}.conv2"), f);
        }
        for (j, head) in self.aux_heads.iter_mut().enumerate() {
            for (u, up) in head.ups.iter_mut().enumerate() {
                deconv(up, &format!("aux{j}.up{u}"), f);
            }
            proj(&mut head.proj, &format!("aux{j}.proj"), f);
        }
        proj(&mut self.main_head, "main.proj", f);
    }

    fn set_bn_ready(&mut self, ready: bool) {
        for stage in &mut self.encoder {
            stage.conv1.running.ready = ready;
            stage.conv2.running.ready = ready;
        }
        self.bot1.running.ready = ready;
        self.bot2.running.ready = ready;
        for stage in &mut self.decoder {
            stage.up.running.ready = ready;
            stage.conv1.running.ready = ready;
            stage.conv2.running.ready = ready;
        }
        for head in &mut self.aux_heads {
            for up in &mut head.ups {
                up.running.ready = ready;
            }
        }
    }

    fn bn_ready(&self) -> bool {
        self.bot1.running.ready
    }
}

const WEIGHTS_MAGIC: &[u8; 12] = b"S4CWEIGHTS\0\0";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    config: NetworkConfig,
    stats_ready: bool,
}

/// Serialize config, parameters, and batch-norm state; 32-bit
/// little-endian payloads, bit-exact round trip.
pub fn save_weights(net: &Network<f32>, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&WeightsHeader {
        config: net.config.clone(),
        stats_ready: net.bn_ready(),
    })
    .expect("config serialization cannot fail");
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    net.visit_state(&mut |name: &str, values: &[f32]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    fs::write(path, out)?;
    Ok(())
}

/// Rebuild a network from a weight file; the stored config reconstructs
/// the topology, then every tensor is matched by name and length.
pub fn load_weights(path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..12] != WEIGHTS_MAGIC {
        return Err(fail("not a weights file"));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + hlen {
        return Err(fail("truncated header"));
    }
    let header: WeightsHeader = serde_json::from_slice(&bytes[20..20 + hlen])
        .map_err(|e| fail(&format!("bad header JSON: {e}")))?;

    let mut tensors: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut pos = 20 + hlen;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(fail("truncated tensor record"));
        }
        let nlen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + nlen + 8 > bytes.len() {
            return Err(fail("truncated tensor record"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + nlen])
            .map_err(|_| fail("tensor name is not UTF-8"))?
            .to_string();
        pos += nlen;
        let count = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if pos + count * 4 > bytes.len() {
            return Err(fail(&format!("tensor {name} payload truncated")));
        }
        let values = bytes[pos..pos + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos += count * 4;
        if tensors.insert(name.clone(), values).is_some() {
            return Err(fail(&format!("duplicate tensor {name}")));
        }
    }

    let mut net: Network<f32> = build_network(&header.config, 0)?;
    let mut missing = Vec::new();
    net.visit_state_mut(&mut |name: &str, slot: &mut [f32]| {
        match tensors.remove(name) {
            Some(values) if values.len() == slot.len() => slot.copy_from_slice(&values),
            Some(values) => missing.push(format!(
                "{name}: file holds {} values, topology needs {}",
                values.len(),
                slot.len()
            )),
            None => missing.push(format!("{name}: absent from file")),
        }
    });
    if !missing.is_empty() {
        return Err(fail(&format!("topology mismatch: {}", missing.join("; "))));
    }
    if let Some((name, _)) = tensors.into_iter().next() {
        return Err(fail(&format!("unexpected tensor {name}")));
    }
    net.set_bn_ready(header.stats_ready);
    Ok(net)
}

/// Load weights and verify the stored scale matches the expected one.
pub fn load_weights_expect(path: &Path, input_size: usize) -> Result<Network<f32>> {
    let net = load_weights(path)?;
    if net.config.input_size != input_size {
        return Err(Error::Config(format!(
            "{}: weights are for input size {}, expected {input_size}",
            path.display(),
            net.config.input_size
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::softmax_cross_entropy;
    use crate::nn::reference::grad_close;
    use rand::{Rng, SeedableRng};

    fn toy_config(input_size: usize, base: usize) -> NetworkConfig {
        NetworkConfig {
            base_channels: base,
            ..NetworkConfig::for_scale(input_size)
        }
    }

    fn random_input<T: Scalar>(size: usize, seed: u64) -> Tensor5<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = size * size * size;
        Tensor5::new(
            [1, 1, size, size, size],
            (0..n).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect(),
        )
    }

    #[test]
    fn head_shapes_and_counts_per_scale() {
        let mut net: Network<f32> = build_network(&toy_config(64, 2), 1).unwrap();
        let out = net.forward_train(&random_input(64, 5)).unwrap();
        assert_eq!(out.main.shape(), [1, 3, 64, 64, 64]);
        assert_eq!(out.aux.len(), 2);
        for a in &out.aux {
            assert_eq!(a.shape(), [1, 3, 64, 64, 64]);
        }

        let mut net32: Network<f32> = build_network(&toy_config(32, 2), 1).unwrap();
        let out32 = net32.forward_train(&random_input(32, 6)).unwrap();
        assert_eq!(out32.aux.len(), 1);
        assert_eq!(out32.main.shape(), [1, 3, 32, 32, 32]);
    }

    #[test]
    fn sixteen_cube_reaches_two_cube_bottleneck() {
        let mut net: Network<f32> = build_network(&toy_config(16, 2), 1).unwrap();
        net.forward_train(&random_input(16, 7)).unwrap();
        // deepest encoder stage pools 4^3 feature maps down to 2^3
        assert_eq!(net.encoder[2].pool_in_shape[2..], [4, 4, 4]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Network<f32> = build_network(&toy_config(16, 4), 9).unwrap();
        let b: Network<f32> = build_network(&toy_config(16, 4), 9).unwrap();
        let mut wa = Vec::new();
        a.visit_state(&mut |_, v: &[f32]| wa.extend_from_slice(v));
        let mut wb = Vec::new();
        b.visit_state(&mut |_, v: &[f32]| wb.extend_from_slice(v));
        assert_eq!(wa, wb);
    }

    #[test]
    fn eval_is_deterministic() {
        let mut net: Network<f32> = build_network(&toy_config(16, 4), 2).unwrap();
        net.forward_train(&random_input(16, 1)).unwrap();
        let x = random_input(16, 2);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a.main.data(), b.main.data());
        assert_eq!(a.aux.len(), b.aux.len());
    }

    #[test]
    fn eval_before_training_errors() {
        let net: Network<f32> = build_network(&toy_config(16, 2), 3).unwrap();
        assert!(net.forward_eval(&random_input(16, 4)).is_err());
    }

    #[test]
    fn input_size_mismatch_errors() {
        let mut net: Network<f32> = build_network(&toy_config(32, 2), 3).unwrap();
        assert!(net.forward_train(&random_input(16, 4)).is_err());
    }

    #[test]
    fn weights_round_trip_bit_exact_and_forward_equivalent() {
        let dir = tempfile::tempdir().unwrap();
        let mut net: Network<f32> = build_network(&toy_config(16, 4), 11).unwrap();
        net.forward_train(&random_input(16, 12)).unwrap(); // populate BN stats
        let path = dir.path().join("net.s4cw");
        save_weights(&net, &path).unwrap();

        let loaded = load_weights(&path).unwrap();
        let mut orig_state = Vec::new();
        net.visit_state(&mut |_, v: &[f32]| orig_state.extend_from_slice(v));
        let mut loaded_state = Vec::new();
        loaded.visit_state(&mut |_, v: &[f32]| loaded_state.extend_from_slice(v));
        assert_eq!(orig_state, loaded_state);

        let x = random_input(16, 13);
        assert_eq!(
            net.forward_eval(&x).unwrap().main.data(),
            loaded.forward_eval(&x).unwrap().main.data()
        );

        // saving the reloaded network reproduces the file bit-exactly
        let path2 = dir.path().join("net2.s4cw");
        save_weights(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_into_wrong_scale_errors() {
        let dir = tempfile::tempdir().unwrap();
        let net: Network<f32> = build_network(&toy_config(16, 2), 1).unwrap();
        let path = dir.path().join("net16.s4cw");
        save_weights(&net, &path).unwrap();
        assert!(load_weights_expect(&path, 64).is_err());
        assert!(load_weights_expect(&path, 16).is_ok());
    }

    #[test]
    fn corrupt_weight_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let net: Network<f32> = build_network(&toy_config(16, 2), 1).unwrap();
        let path = dir.path().join("net.s4cw");
        save_weights(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_weights(&path).is_err());
    }

    // Total-loss gradient of a toy network against central finite
    // differences, 64-bit.
    #[test]
    fn full_network_gradient_check() {
        let config = toy_config(16, 2);
        let mut net: Network<f64> = build_network(&config, 21).unwrap();
        let x = random_input::<f64>(16, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let targets: Vec<u8> = (0..16 * 16 * 16).map(|_| rng.random_range(0..3)).collect();

        let loss_of = |net: &mut Network<f64>| -> f64 {
            let out = net.forward_train(&x).unwrap();
            let mut total = 0.0;
            let weights = &net.config.loss_weights;
            for (k, logits) in out.aux.iter().chain([&out.main]).enumerate() {
                let (l, _) = softmax_cross_entropy(logits, &targets).unwrap();
                total += weights[k] as f64 * l;
            }
            total
        };

        // analytic gradients
        net.zero_grads();
        let out = net.forward_train(&x).unwrap();
        let weights = net.config.loss_weights.clone();
        let mut gaux = Vec::new();
        let mut gmain = None;
        for (k, logits) in out.aux.iter().chain([&out.main]).enumerate() {
            let (_, mut g) = softmax_cross_entropy(logits, &targets).unwrap();
            for v in g.data_mut() {
                *v *= weights[k] as f64;
            }
            if k < out.aux.len() {
                gaux.push(g);
            } else {
                gmain = Some(g);
            }
        }
        net.backward(&gmain.unwrap(), &gaux).unwrap();

        let mut names = Vec::new();
        net.visit_params_mut(&mut |name, vals, grads, _| {
            names.push((name.to_string(), vals.len(), grads.to_vec()));
        });

        // probe a spread of parameters across every layer kind
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut checked = 0;
        for (name, len, grads) in names.iter().take(12) {
            let i = rng.random_range(0..*len);
            let analytic = grads[i];
            let mut probe = |delta: f64| -> f64 {
                net.visit_params_mut(&mut |n, vals, _, _| {
                    if n == name {
                        vals[i] += delta;
                    }
                });
                let l = loss_of(&mut net);
                net.visit_params_mut(&mut |n, vals, _, _| {
                    if n == name {
                        vals[i] -= delta;
                    }
                });
                l
            };
            let h = 1e-5;
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(
                grad_close(analytic, numeric, 1e-4, 1e-3),
                "{name}[{i}]: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= 10);
    }
}
