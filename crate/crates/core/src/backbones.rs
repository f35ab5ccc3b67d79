//! Feature extractors: ConvNet4, ResNet12, ResNetW12, and a one-hidden-layer
//! perceptron used for small exact-gradient checks.
//!
//! The last layer of activations is the transferable representation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvShape};
use crate::nn::norm::{self, BnCache};
use crate::nn::{linear, pool, relu_backward, relu_forward, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RESNET12_WIDTHS: [usize; 4] = [64, 160, 320, 640];
pub const RESNETW12_WIDTHS: [usize; 4] = [128, 320, 640, 640];
pub const CONVNET4_WIDTHS: [usize; 4] = [64, 64, 64, 64];

/// Largest batch pushed through the network at once during inference.
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "CONVNET4")]
    ConvNet4,
    #[serde(rename = "RESNET12")]
    ResNet12,
    #[serde(rename = "RESNETW12")]
    ResNetW12,
    /// Flatten → dense → ReLU; `widths[0]` is the hidden size.
    #[serde(rename = "MLP")]
    Mlp,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::ConvNet4 => "convnet4",
            Arch::ResNet12 => "resnet12",
            Arch::ResNetW12 => "resnetw12",
            Arch::Mlp => "mlp",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convnet4" => Ok(Arch::ConvNet4),
            "resnet12" => Ok(Arch::ResNet12),
            "resnetw12" => Ok(Arch::ResNetW12),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::UnsupportedArch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub input_size: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// ConvNet4 block order: conv → ReLU → BN (true) or conv → BN → ReLU.
    pub relu_before_bn: bool,
}

impl BackboneConfig {
    pub fn convnet4(input_size: usize) -> Self {
        Self {
            arch: Arch::ConvNet4,
            input_size,
            in_channels: 3,
            widths: CONVNET4_WIDTHS.to_vec(),
            relu_before_bn: true,
        }
    }

    pub fn resnet12(input_size: usize) -> Self {
        Self {
            arch: Arch::ResNet12,
            input_size,
            in_channels: 3,
            widths: RESNET12_WIDTHS.to_vec(),
            relu_before_bn: false,
        }
    }

    pub fn resnetw12(input_size: usize) -> Self {
        Self {
            widths: RESNETW12_WIDTHS.to_vec(),
            arch: Arch::ResNetW12,
            ..Self::resnet12(input_size)
        }
    }

    pub fn mlp(input_size: usize, in_channels: usize, hidden: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            input_size,
            in_channels,
            widths: vec![hidden],
            relu_before_bn: false,
        }
    }

    pub fn for_arch(arch: Arch, input_size: usize) -> Self {
        match arch {
            Arch::ConvNet4 => Self::convnet4(input_size),
            Arch::ResNet12 => Self::resnet12(input_size),
            Arch::ResNetW12 => Self::resnetw12(input_size),
            Arch::Mlp => Self::mlp(input_size, 3, 64),
        }
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.widths = widths.to_vec();
        self
    }

    /// Residual nets skip the last pool below 64px so a spatial map survives.
    pub fn pools_last_stage(&self) -> bool {
        match self.arch {
            Arch::ResNet12 | Arch::ResNetW12 => self.input_size >= 64,
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = match self.arch {
            Arch::Mlp => 1,
            _ => 4,
        };
        if self.widths.len() != stages || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "{} needs {stages} positive widths, got {:?}",
                self.arch, self.widths
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        let min = match self.arch {
            Arch::ConvNet4 => 16,
            Arch::ResNet12 | Arch::ResNetW12 => 32,
            Arch::Mlp => 1,
        };
        if self.input_size < min {
            return Err(Error::Config(format!(
                "{} needs inputs of at least {min}px, got {}",
                self.arch, self.input_size
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Arch::ConvNet4 => {
                let side = self.input_size >> 4;
                self.widths[3] * side * side
            }
            Arch::ResNet12 | Arch::ResNetW12 => self.widths[3],
            Arch::Mlp => self.widths[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Conv { w: usize, b: Option<usize>, shape: ConvShape },
    Bn { gamma: usize, beta: usize, mean: usize, var: usize },
    Relu,
    MaxPool,
    /// `relu(main(x) + shortcut(x))`.
    Residual { main: Vec<Node>, shortcut: Vec<Node> },
    GlobalAvgPool,
    Flatten,
    Dense { w: usize, b: usize },
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Conv { cols: Vec<T>, in_shape: Vec<usize> },
    Bn(BnCache<T>),
    Relu(Vec<bool>),
    MaxPool { arg: Vec<u32>, in_shape: Vec<usize> },
    Residual { main: Vec<Cache<T>>, shortcut: Vec<Cache<T>>, mask: Vec<bool> },
    Shape(Vec<usize>),
    Dense(Tensor<T>),
}

/// Everything a training-mode forward pass leaves for its reverse pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

/// Backbone parameters θ plus architecture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    config: BackboneConfig,
    params: ParamSet<T>,
    /// Batch-norm running statistics.
    buffers: ParamSet<T>,
    nodes: Vec<Node>,
}

struct Builder<'a, T, R> {
    params: ParamSet<T>,
    buffers: ParamSet<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        self.params
            .push(name, Tensor::from_vec(shape, data).expect("sized"))
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, bias: bool) -> Node {
        let w = self.kaiming(format!("{name}.weight"), &[out_c, in_c, k, k], in_c * k * k);
        let b = bias.then(|| self.params.push(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        Node::Conv {
            w,
            b,
            shape: ConvShape { in_c, out_c, k },
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Node {
        Node::Bn {
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: self.buffers.push(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: self.buffers.push(format!("{name}.running_var"), Tensor::full(&[c], T::one())),
        }
    }
}

/// Builds an initialized extractor; parameters are reproducible from `seed`.
pub fn build_backbone<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<FeatureExtractor<T>> {
    config.validate()?;
    let mut r = rng::stream(seed, &[0x6261636b]);
    let mut b = Builder {
        params: ParamSet::new(),
        buffers: ParamSet::new(),
        rng: &mut r,
    };
    let mut nodes = Vec::new();
    let mut in_c = config.in_channels;
    match config.arch {
        Arch::ConvNet4 => {
            for (i, &w) in config.widths.iter().enumerate() {
                nodes.push(b.conv(&format!("block{i}.conv"), in_c, w, 3, true));
                let bn = b.bn(&format!("block{i}.bn"), w);
                if config.relu_before_bn {
                    nodes.extend([Node::Relu, bn]);
                } else {
                    nodes.extend([bn, Node::Relu]);
                }
                nodes.push(Node::MaxPool);
                in_c = w;
            }
            nodes.push(Node::Flatten);
        }
        Arch::ResNet12 | Arch::ResNetW12 => {
            for (i, &w) in config.widths.iter().enumerate() {
                let p = format!("stage{i}");
                let mut main = Vec::new();
                for j in 0..3 {
                    main.push(b.conv(&format!("{p}.conv{j}"), if j == 0 { in_c } else { w }, w, 3, false));
                    main.push(b.bn(&format!("{p}.bn{j}"), w));
                    if j < 2 {
                        main.push(Node::Relu);
                    }
                }
                let shortcut = vec![
                    b.conv(&format!("{p}.shortcut.conv"), in_c, w, 1, false),
                    b.bn(&format!("{p}.shortcut.bn"), w),
                ];
                nodes.push(Node::Residual { main, shortcut });
                if i < 3 || config.pools_last_stage() {
                    nodes.push(Node::MaxPool);
                }
                in_c = w;
            }
            nodes.push(Node::GlobalAvgPool);
        }
        Arch::Mlp => {
            let fan_in = in_c * config.input_size * config.input_size;
            let hidden = config.widths[0];
            let w = b.kaiming("dense.weight".into(), &[hidden, fan_in], fan_in);
            let bias = b.params.push("dense.bias", Tensor::zeros(&[hidden]));
            nodes.extend([Node::Flatten, Node::Dense { w, b: bias }, Node::Relu]);
        }
    }
    let Builder { params, buffers, .. } = b;
    Ok(FeatureExtractor {
        config: config.clone(),
        params,
        buffers,
        nodes,
    })
}

fn forward_nodes<T: Scalar>(
    nodes: &[Node],
    mut x: Tensor<T>,
    params: &ParamSet<T>,
    buffers: &ParamSet<T>,
    mut caches: Option<&mut Vec<Cache<T>>>,
) -> Tensor<T> {
    let train = caches.is_some();
    for node in nodes {
        let (y, cache) = match node {
            Node::Conv { w, b, shape } => {
                let (y, cols) = conv::forward(&x, params.get(*w), b.map(|b| params.get(b)), *shape, train);
                (y, cols.map(|cols| Cache::Conv { cols, in_shape: x.shape().to_vec() }))
            }
            Node::Bn { gamma, beta, mean, var } => {
                let (g, bt) = (params.get(*gamma).data(), params.get(*beta).data());
                if train {
                    let (y, c) = norm::forward_train(&x, g, bt);
                    (y, Some(Cache::Bn(c)))
                } else {
                    let y = norm::forward_eval(&x, g, bt, buffers.get(*mean).data(), buffers.get(*var).data());
                    (y, None)
                }
            }
            Node::Relu => {
                let mask = relu_forward(&mut x);
                (x, train.then_some(Cache::Relu(mask)))
            }
            Node::MaxPool => {
                let (y, arg) = pool::maxpool2_forward(&x);
                (y, train.then(|| Cache::MaxPool { arg, in_shape: x.shape().to_vec() }))
            }
            Node::Residual { main, shortcut } => {
                let mut mc = train.then(Vec::new);
                let mut sc = train.then(Vec::new);
                let mut m = forward_nodes(main, x.clone(), params, buffers, mc.as_mut());
                let s = forward_nodes(shortcut, x, params, buffers, sc.as_mut());
                m.add_assign(&s);
                let mask = relu_forward(&mut m);
                let cache = train.then(|| Cache::Residual {
                    main: mc.unwrap_or_default(),
                    shortcut: sc.unwrap_or_default(),
                    mask,
                });
                (m, cache)
            }
            Node::GlobalAvgPool => {
                let y = pool::global_avg_forward(&x);
                (y, train.then(|| Cache::Shape(x.shape().to_vec())))
            }
            Node::Flatten => {
                let shape = x.shape().to_vec();
                let b = shape[0];
                let rest = x.row_len();
                let y = x.reshape(&[b, rest]).expect("flatten");
                (y, train.then_some(Cache::Shape(shape)))
            }
            Node::Dense { w, b } => {
                let y = linear::forward(&x, params.get(*w), Some(params.get(*b)));
                (y, train.then_some(Cache::Dense(x)))
            }
        };
        if let (Some(cs), Some(c)) = (caches.as_deref_mut(), cache) {
            cs.push(c);
        }
        x = y;
    }
    x
}

/// Reverse pass over `nodes`; `need_dx` is false only for the network input.
fn backward_nodes<T: Scalar>(
    nodes: &[Node],
    caches: &[Cache<T>],
    mut dy: Tensor<T>,
    params: &ParamSet<T>,
    grads: &mut ParamSet<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        let need = need_dx || i > 0;
        dy = match (node, cache) {
            (Node::Conv { w, b, shape }, Cache::Conv { cols, in_shape }) => {
                let dx = match b {
                    Some(b) => {
                        let (dw, db) = grads.pair_mut(*w, *b);
                        conv::backward(&dy, cols, in_shape, params.get(*w), *shape, dw, Some(db), need)
                    }
                    None => conv::backward(&dy, cols, in_shape, params.get(*w), *shape, grads.get_mut(*w), None, need),
                };
                match dx {
                    Some(dx) => dx,
                    None => return None,
                }
            }
            (Node::Bn { gamma, beta, .. }, Cache::Bn(c)) => {
                let (dg, db) = grads.pair_mut(*gamma, *beta);
                norm::backward(&dy, c, params.get(*gamma).data(), dg.data_mut(), db.data_mut())
            }
            (Node::Relu, Cache::Relu(mask)) => {
                relu_backward(&mut dy, mask);
                dy
            }
            (Node::MaxPool, Cache::MaxPool { arg, in_shape }) => pool::maxpool2_backward(&dy, arg, in_shape),
            (Node::Residual { main, shortcut }, Cache::Residual { main: mc, shortcut: sc, mask }) => {
                relu_backward(&mut dy, mask);
                let dm = backward_nodes(main, mc, dy.clone(), params, grads, need);
                let ds = backward_nodes(shortcut, sc, dy, params, grads, need);
                match (dm, ds) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b);
                        a
                    }
                    _ => return None,
                }
            }
            (Node::GlobalAvgPool, Cache::Shape(s)) => pool::global_avg_backward(&dy, s),
            (Node::Flatten, Cache::Shape(s)) => dy.reshape(s).expect("unflatten"),
            (Node::Dense { w, b }, Cache::Dense(input)) => {
                let (dw, db) = grads.pair_mut(*w, *b);
                match linear::backward(&dy, input, params.get(*w), dw, Some(db), need) {
                    Some(dx) => dx,
                    None => return None,
                }
            }
            _ => unreachable!("cache does not match node"),
        };
    }
    need_dx.then_some(dy)
}

fn commit_nodes<T: Scalar>(nodes: &[Node], caches: &[Cache<T>], buffers: &mut ParamSet<T>) {
    for (node, cache) in nodes.iter().zip(caches) {
        match (node, cache) {
            (Node::Bn { mean, var, .. }, Cache::Bn(c)) => {
                norm::update_running(buffers.get_mut(*mean).data_mut(), &c.batch_mean);
                norm::update_running(buffers.get_mut(*var).data_mut(), &c.batch_var);
            }
            (Node::Residual { main, shortcut }, Cache::Residual { main: mc, shortcut: sc, .. }) => {
                commit_nodes(main, mc, buffers);
                commit_nodes(shortcut, sc, buffers);
            }
            _ => {}
        }
    }
}

fn describe_nodes(nodes: &[Node], out: &mut Vec<String>) {
    for n in nodes {
        match n {
            Node::Conv { shape, .. } => out.push(format!("conv{}x{}({}->{})", shape.k, shape.k, shape.in_c, shape.out_c)),
            Node::Bn { .. } => out.push("batchnorm".into()),
            Node::Relu => out.push("relu".into()),
            Node::MaxPool => out.push("maxpool2".into()),
            Node::Residual { main, shortcut } => {
                out.push("residual[".into());
                describe_nodes(main, out);
                out.push("|".into());
                describe_nodes(shortcut, out);
                out.push("]relu".into());
            }
            Node::GlobalAvgPool => out.push("global_avg_pool".into()),
            Node::Flatten => out.push("flatten".into()),
            Node::Dense { .. } => out.push("dense".into()),
        }
    }
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.buffers
    }

    /// Layer listing, e.g. `["conv3x3(3->64)", "relu", "batchnorm", ...]`.
    pub fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        describe_nodes(&self.nodes, &mut out);
        out
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.input_size, c.input_size];
        if batch.ndim() != 4 || batch.shape()[1..] != want {
            return Err(Error::ShapeMismatch(format!(
                "{} expects [B, {}, {}, {}], got {:?}",
                c.arch,
                want[0],
                want[1],
                want[2],
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Eval-mode features `[B, feature_dim]`, using running BN statistics.
    pub fn extract_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let b = batch.dim(0);
        let d = self.feature_dim();
        let mut out = Tensor::zeros(&[b, d]);
        for start in (0..b).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(b)).collect();
            let y = forward_nodes(&self.nodes, batch.select_rows(&idx), &self.params, &self.buffers, None);
            out.data_mut()[start * d..(start + idx.len()) * d].copy_from_slice(y.data());
        }
        Ok(out)
    }

    /// Training-mode forward with batch statistics.
    pub fn forward_train(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(batch)?;
        let mut caches = Vec::new();
        let y = forward_nodes(&self.nodes, batch.clone(), &self.params, &self.buffers, Some(&mut caches));
        Ok((y, Trace { caches }))
    }

    /// Gradient of `<features, dfeat>` w.r.t. θ.
    pub fn backward(&self, trace: &Trace<T>, dfeat: &Tensor<T>) -> ParamSet<T> {
        let mut grads = self.params.zeros_like();
        self.backward_into(trace, dfeat, &mut grads);
        grads
    }

    pub fn backward_into(&self, trace: &Trace<T>, dfeat: &Tensor<T>, grads: &mut ParamSet<T>) {
        backward_nodes(&self.nodes, &trace.caches, dfeat.clone(), &self.params, grads, false);
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn commit_batch_stats(&mut self, trace: &Trace<T>) {
        commit_nodes(&self.nodes, &trace.caches, &mut self.buffers);
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            nodes: self.nodes.clone(),
        }
    }

    /// Replaces parameters and buffers, checking names and shapes.
    pub fn load_state(&mut self, params: ParamSet<T>, buffers: ParamSet<T>) -> Result<()> {
        let same = |a: &ParamSet<T>, b: &ParamSet<T>| {
            a.len() == b.len()
                && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
        };
        if !same(&self.params, &params) || !same(&self.buffers, &buffers) {
            return Err(Error::ShapeMismatch("checkpoint does not match architecture".into()));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch<T: Scalar>(b: usize, c: usize, s: usize, seed: u64) -> Tensor<T> {
        let mut r = rng::seeded(seed);
        Tensor::from_vec(&[b, c, s, s], (0..b * c * s * s).map(|_| T::lit(r.random_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn convnet4_block_order_and_dims() {
        let fe = build_backbone::<f32>(&BackboneConfig::convnet4(84), 0).unwrap();
        let d = fe.describe();
        assert_eq!(&d[..4], &["conv3x3(3->64)", "relu", "batchnorm", "maxpool2"]);
        assert_eq!(d.iter().filter(|s| s.starts_with("conv3x3")).count(), 4);
        assert_eq!(fe.feature_dim(), 1600);
    }

    #[test]
    fn residual_variants_have_640_features() {
        for cfg in [BackboneConfig::resnet12(84), BackboneConfig::resnetw12(84)] {
            assert_eq!(cfg.feature_dim(), 640);
        }
        let small = BackboneConfig::resnetw12(32).with_widths(&[4, 4, 4, 8]);
        let fe = build_backbone::<f32>(&small, 1).unwrap();
        let out = fe.extract_features(&batch(2, 3, 32, 0)).unwrap();
        assert_eq!(out.shape(), &[2, 8]);
    }

    #[test]
    fn equal_seeds_give_equal_parameters() {
        let cfg = BackboneConfig::convnet4(32).with_widths(&[8, 8, 8, 8]);
        let a = build_backbone::<f32>(&cfg, 5).unwrap();
        let b = build_backbone::<f32>(&cfg, 5).unwrap();
        let c = build_backbone::<f32>(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let fe = build_backbone::<f32>(&BackboneConfig::convnet4(32).with_widths(&[4, 4, 4, 4]), 0).unwrap();
        assert!(matches!(fe.extract_features(&batch(1, 3, 28, 0)), Err(Error::ShapeMismatch(_))));
    }

    fn fd_check(cfg: &BackboneConfig, b: usize) {
        let fe = build_backbone::<f64>(cfg, 3).unwrap();
        let x = batch::<f64>(b, cfg.in_channels, cfg.input_size, 1);
        let (y, trace) = fe.forward_train(&x).unwrap();
        let mut r = rng::seeded(2);
        let w = Tensor::from_vec(y.shape(), (0..y.len()).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let grads = fe.backward(&trace, &w);
        let objective = |fe: &FeatureExtractor<f64>| {
            let (y, _) = fe.forward_train(&x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let flat = fe.params().flatten();
        let g = grads.flatten();
        let n = flat.len();
        for t in 0..24 {
            let j = (t * 7919 + 13) % n;
            let eps = 1e-5;
            let mut p = fe.clone();
            let mut v = flat.clone();
            v[j] += eps;
            p.params_mut().assign_flat(&v).unwrap();
            let lp = objective(&p);
            v[j] -= 2.0 * eps;
            p.params_mut().assign_flat(&v).unwrap();
            let lm = objective(&p);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - g[j]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn convnet_gradient_matches_finite_differences() {
        fd_check(&BackboneConfig::convnet4(16).with_widths(&[3, 4, 3, 2]), 3);
        let mut swapped = BackboneConfig::convnet4(16).with_widths(&[2, 3, 2, 2]);
        swapped.relu_before_bn = false;
        fd_check(&swapped, 3);
    }

    #[test]
    fn resnet_gradient_matches_finite_differences() {
        fd_check(&BackboneConfig::resnet12(32).with_widths(&[2, 3, 2, 3]), 2);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        fd_check(&BackboneConfig::mlp(2, 3, 3), 4);
    }

    #[test]
    fn unknown_arch_name() {
        assert!(matches!("wrn28".parse::<Arch>(), Err(Error::UnsupportedArch(_))));
    }
}
