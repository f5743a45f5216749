//! The three parametric maps (feature encoder, segmentation head and
//! reconstruction head) plus the kernel bank, wired into one model.
//!
//! The encoder is a UNet whose final upsampling stage and output layer are
//! dropped, so it emits features at half the input resolution. Both heads
//! share one shape: double conv, 2x transposed-conv upsample, double conv,
//! 1x1 output conv, sigmoid. Every double conv is
//! `conv3x3 -> batch norm -> ReLU -> conv3x3 -> batch norm -> ReLU`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::BatchStats;
use crate::tensor::{Scalar, Tensor};
use crate::vmf::{LikelihoodNorm, DEFAULT_KERNELS, DEFAULT_SIGMA, NORM_EPS};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of pooling stages.
    pub depth: usize,
    pub base_channels: usize,
    /// Channel count `D` of the emitted feature field.
    pub feature_dim: usize,
    /// `(H, W)` of input images.
    pub input_size: (usize, usize),
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            feature_dim: 64,
            input_size: (64, 64),
            in_channels: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.feature_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        let step = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by 2^depth = {step}"
            )));
        }
        Ok(())
    }

    /// Spatial size of the emitted feature field.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size.0 / 2, self.input_size.1 / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
}

impl HeadConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.in_channels == 0 || self.hidden_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("{name} head sizes must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    /// Foreground classes; the segmentation head adds one background channel.
    pub classes: usize,
    pub kernels: usize,
    pub sigma: f64,
    #[serde(default)]
    pub likelihood_norm: LikelihoodNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: 16,
            classes: 3,
            kernels: DEFAULT_KERNELS,
            sigma: DEFAULT_SIGMA,
            likelihood_norm: LikelihoodNorm::L1,
        }
    }
}

impl ModelConfig {
    pub fn task_head(&self) -> HeadConfig {
        HeadConfig {
            in_channels: self.kernels,
            hidden_channels: self.head_hidden,
            out_channels: self.classes + 1,
        }
    }

    pub fn recon_head(&self) -> HeadConfig {
        HeadConfig {
            in_channels: self.encoder.feature_dim,
            hidden_channels: self.head_hidden,
            out_channels: self.encoder.in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.task_head().validate("task")?;
        self.recon_head().validate("reconstruction")?;
        if self.kernels < 2 {
            return Err(Error::Config("need at least 2 kernels".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.encoder.feature_dim < self.kernels {
            log::warn!(
                "feature_dim {} is smaller than the kernel count {}",
                self.encoder.feature_dim,
                self.kernels
            );
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        layout(self).params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Task,
    Reconstructor,
    Kernels,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "enc",
            Group::Task => "task",
            Group::Reconstructor => "rec",
            Group::Kernels => "kernels",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "enc" => Some(Group::Encoder),
            "task" => Some(Group::Task),
            "rec" => Some(Group::Reconstructor),
            "kernels" => Some(Group::Kernels),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Kaiming normal with the given fan-in.
    Kaiming(usize),
    Zeros,
    Ones,
    /// Unit rows in the nonnegative orthant, where the post-ReLU features live.
    UnitRows,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Layout {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl Layout {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            init: Init::Kaiming(cin * k * k),
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) {
        self.params.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cin, cout, 2, 2],
            init: Init::Kaiming(cin),
        });
        self.params.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![c],
            init: Init::Ones,
        });
        self.params.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![c],
            init: Init::Zeros,
        });
        self.buffers.push(ParamSpec {
            name: format!("{name}.running_mean"),
            shape: vec![c],
            init: Init::Zeros,
        });
        self.buffers.push(ParamSpec {
            name: format!("{name}.running_var"),
            shape: vec![c],
            init: Init::Ones,
        });
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(&format!("{name}.conv1"), cin, cout, 3);
        self.bn(&format!("{name}.bn1"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        self.bn(&format!("{name}.bn2"), cout);
    }

    fn head(&mut self, prefix: &str, head: &HeadConfig) {
        self.double_conv(&format!("{prefix}.in"), head.in_channels, head.hidden_channels);
        self.upconv(&format!("{prefix}.up"), head.hidden_channels, head.hidden_channels);
        self.double_conv(&format!("{prefix}.mid"), head.hidden_channels, head.hidden_channels);
        self.conv(&format!("{prefix}.out"), head.hidden_channels, head.out_channels, 1);
    }
}

fn encoder_channels(cfg: &EncoderConfig, level: usize) -> usize {
    cfg.base_channels << level
}

fn layout(cfg: &ModelConfig) -> Layout {
    let mut l = Layout {
        params: Vec::new(),
        buffers: Vec::new(),
    };
    let e = &cfg.encoder;
    let last = |level: usize, c: usize| if level == 1 { e.feature_dim } else { c };
    let mut cin = e.in_channels;
    for level in 0..e.depth {
        let c = encoder_channels(e, level);
        l.double_conv(&format!("enc.down{level}"), cin, c);
        cin = c;
    }
    let bottom = encoder_channels(e, e.depth);
    l.double_conv(
        "enc.bottom",
        cin,
        if e.depth == 1 { e.feature_dim } else { bottom },
    );
    let mut cin = bottom;
    for level in (1..e.depth).rev() {
        let c = encoder_channels(e, level);
        l.upconv(&format!("enc.up{level}.upconv"), cin, c);
        l.double_conv(&format!("enc.up{level}"), 2 * c, last(level, c));
        cin = c;
    }
    l.params.push(ParamSpec {
        name: "kernels.mu".into(),
        shape: vec![cfg.kernels, e.feature_dim],
        init: Init::UnitRows,
    });
    l.head("task", &cfg.task_head());
    l.head("rec", &cfg.recon_head());
    l
}

/// A named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Named<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable parameters and batch-norm running statistics, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Named<T>>,
    pub buffers: Vec<Named<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let l = layout(cfg);
        let make = |spec: &ParamSpec, rng: &mut R| -> Tensor<T> {
            let len: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); len],
                Init::Ones => vec![T::one(); len],
                Init::Kaiming(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                }
                Init::UnitRows => {
                    let raw: Vec<T> = (0..len)
                        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal).abs()))
                        .collect();
                    crate::vmf::normalize_rows(&raw, spec.shape[1]).0
                }
            };
            Tensor::from_vec(&spec.shape, data).unwrap()
        };
        let params = l
            .params
            .iter()
            .map(|s| Named {
                name: s.name.clone(),
                value: make(s, rng),
            })
            .collect();
        let buffers = l
            .buffers
            .iter()
            .map(|s| Named {
                name: s.name.clone(),
                value: make(s, rng),
            })
            .collect();
        Ok(Self::from_parts(params, buffers))
    }

    pub fn from_parts(params: Vec<Named<T>>, buffers: Vec<Named<T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let buffer_index = buffers.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self {
            params,
            buffers,
            index,
            buffer_index,
        }
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let l = layout(cfg);
        let same = |a: &[ParamSpec], b: &[Named<T>]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(s, n)| s.name == n.name && s.shape == n.value.shape())
        };
        if !same(&l.params, &self.params) || !same(&l.buffers, &self.buffers) {
            return Err(Error::CorruptCheckpoint(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index[name]].value
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn buffer(&self, name: &str) -> &Tensor<T> {
        &self.buffers[self.buffer_index[name]].value
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.buffer_index[name];
        &mut self.buffers[i].value
    }

    pub fn group(&self, index: usize) -> Group {
        Group::from_name(&self.params[index].name).expect("parameter names carry a group prefix")
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (name, s) in stats {
            let mean = self.buffer_mut(&format!("{name}.running_mean"));
            for (r, &v) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * v;
            }
            let var = self.buffer_mut(&format!("{name}.running_var"));
            for (r, &v) in var.data_mut().iter_mut().zip(&s.unbiased_var) {
                *r = keep * *r + m * v;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[Named<T>]| {
            v.iter()
                .map(|n| Named {
                    name: n.name.clone(),
                    value: n.value.cast(),
                })
                .collect()
        };
        ParamStore::from_parts(conv(&self.params), conv(&self.buffers))
    }
}

/// Normalization-layer mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Which parameter groups receive gradients in a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub task: bool,
    pub reconstructor: bool,
    pub kernels: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        encoder: true,
        task: true,
        reconstructor: true,
        kernels: true,
    };
    pub const NONE: Self = Self {
        encoder: false,
        task: false,
        reconstructor: false,
        kernels: false,
    };

    pub fn includes(&self, group: Group) -> bool {
        match group {
            Group::Encoder => self.encoder,
            Group::Task => self.task,
            Group::Reconstructor => self.reconstructor,
            Group::Kernels => self.kernels,
        }
    }
}

/// Graph variables for every parameter plus collected normalization statistics.
pub struct Bound<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub vars: Vec<Var>,
    store: &'a ParamStore<T>,
    mode: Mode,
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: Trainable, mode: Mode) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable.includes(store.group(i)) {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        Self {
            graph,
            vars,
            store,
            mode,
            stats: Vec::new(),
        }
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.store.index[name]]
    }

    fn conv(&mut self, x: Var, name: &str, pad: usize) -> Var {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.graph.conv2d(x, w, b, pad)
    }

    fn bn(&mut self, x: Var, name: &str) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batch_norm(x, gamma, beta, None);
                self.stats.push((name.to_string(), stats.expect("training mode reports statistics")));
                y
            }
            Mode::Eval => {
                let rm = self.store.buffer(&format!("{name}.running_mean")).data();
                let rv = self.store.buffer(&format!("{name}.running_var")).data();
                self.graph.batch_norm(x, gamma, beta, Some((rm, rv))).0
            }
        }
    }

    fn double_conv(&mut self, x: Var, name: &str) -> Var {
        let h = self.conv(x, &format!("{name}.conv1"), 1);
        let h = self.bn(h, &format!("{name}.bn1"));
        let h = self.graph.relu(h);
        let h = self.conv(h, &format!("{name}.conv2"), 1);
        let h = self.bn(h, &format!("{name}.bn2"));
        self.graph.relu(h)
    }

    fn upconv(&mut self, x: Var, name: &str) -> Var {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.graph.conv_transpose2x2(x, w, b)
    }

    /// Raw (unnormalized) features `[N, D, H/2, W/2]`.
    pub fn encode(&mut self, x: Var, cfg: &EncoderConfig) -> Var {
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = x;
        for level in 0..cfg.depth {
            h = self.double_conv(h, &format!("enc.down{level}"));
            skips.push(h);
            h = self.graph.max_pool2(h);
        }
        h = self.double_conv(h, "enc.bottom");
        for level in (1..cfg.depth).rev() {
            let up = self.upconv(h, &format!("enc.up{level}.upconv"));
            let cat = self.graph.concat(skips[level], up);
            h = self.double_conv(cat, &format!("enc.up{level}"));
        }
        h
    }

    fn head(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.double_conv(x, &format!("{prefix}.in"));
        let h = self.upconv(h, &format!("{prefix}.up"));
        let h = self.double_conv(h, &format!("{prefix}.mid"));
        let h = self.conv(h, &format!("{prefix}.out"), 0);
        self.graph.sigmoid(h)
    }

    /// Mask probabilities `[N, K+1, H, W]` from likelihoods `[N, J, h, w]`.
    pub fn segment(&mut self, l: Var) -> Var {
        self.head(l, "task")
    }

    /// Image `[N, C, H, W]` from recomposed features `[N, D, h, w]`.
    pub fn reconstruct(&mut self, zt: Var) -> Var {
        self.head(zt, "rec")
    }

    /// Unit-normalized kernel bank `[J, D]`.
    pub fn kernels(&mut self) -> Var {
        let mu = self.p("kernels.mu");
        self.graph.normalize_rows(mu)
    }
}

/// Graph variables produced by a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub raw_features: Var,
    /// Unit feature rows `[N*h*w, D]`.
    pub features: Var,
    /// Unit kernels `[J, D]`.
    pub kernels: Var,
    /// Likelihood rows `[N*h*w, J]`.
    pub likelihood_rows: Var,
    /// Likelihoods `[N, J, h, w]`.
    pub likelihoods: Var,
    /// Recomposed features `[N, D, h, w]`.
    pub recomposed: Var,
    pub masks: Var,
    pub reconstruction: Var,
}

/// Fails when any raw kernel row has collapsed to (near) zero.
pub fn check_kernels<T: Scalar>(store: &ParamStore<T>) -> Result<()> {
    let mu = store.get("kernels.mu");
    let d = mu.shape()[1];
    for (index, row) in mu.data().chunks_exact(d).enumerate() {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            return Err(Error::DegenerateKernel { index, norm });
        }
    }
    Ok(())
}

/// The full decomposition pipeline on an `[N, C, H, W]` batch.
pub fn forward<T: Scalar>(bound: &mut Bound<'_, T>, cfg: &ModelConfig, images: &Tensor<T>) -> Result<ForwardVars> {
    let (n, c, h, w) = match *images.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(Error::Shape(format!("expected an NCHW batch, got {s:?}"))),
    };
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if (h, w) != cfg.encoder.input_size || c != cfg.encoder.in_channels {
        return Err(Error::Shape(format!(
            "image batch {c}x{h}x{w} does not match configured {}x{}x{}",
            cfg.encoder.in_channels, cfg.encoder.input_size.0, cfg.encoder.input_size.1
        )));
    }
    if !images.all_finite() {
        return Err(Error::InvalidInput("image batch contains non-finite values".into()));
    }
    check_kernels(bound.store)?;
    let x = bound.graph.constant(images.clone());
    let raw = bound.encode(x, &cfg.encoder);
    let (fh, fw) = cfg.encoder.feature_size();
    let rows = bound.graph.to_rows(raw);
    let features = bound.graph.normalize_rows(rows);
    let kernels = bound.kernels();
    let likelihood_rows = bound
        .graph
        .likelihood(features, kernels, T::from_f64(cfg.sigma), cfg.likelihood_norm);
    let likelihoods = bound.graph.from_rows(likelihood_rows, n, fh, fw);
    let recomposed_rows = bound.graph.recompose(likelihood_rows, kernels);
    let recomposed = bound.graph.from_rows(recomposed_rows, n, fh, fw);
    let masks = bound.segment(likelihoods);
    let reconstruction = bound.reconstruct(recomposed);
    Ok(ForwardVars {
        raw_features: raw,
        features,
        kernels,
        likelihood_rows,
        likelihoods,
        recomposed,
        masks,
        reconstruction,
    })
}

/// Eval-mode outputs of the whole pipeline.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    /// `[N, D, h, w]`, unnormalized.
    pub raw_features: Tensor<T>,
    /// `[N, J, h, w]`.
    pub likelihoods: Tensor<T>,
    /// `[N, D, h, w]`.
    pub recomposed: Tensor<T>,
    /// `[N, K+1, H, W]` sigmoid probabilities.
    pub masks: Tensor<T>,
    /// `[N, C, H, W]`.
    pub reconstruction: Tensor<T>,
}

pub fn infer<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, images: &Tensor<T>) -> Result<Inference<T>> {
    let mut bound = Bound::new(store, Trainable::NONE, Mode::Eval);
    let v = forward(&mut bound, cfg, images)?;
    let g = &bound.graph;
    Ok(Inference {
        raw_features: g.value(v.raw_features).clone(),
        likelihoods: g.value(v.likelihoods).clone(),
        recomposed: g.value(v.recomposed).clone(),
        masks: g.value(v.masks).clone(),
        reconstruction: g.value(v.reconstruction).clone(),
    })
}

/// Hard labels `[N, H, W]` by argmax over mask channels (lowest index on ties).
pub fn predict_labels<T: Scalar>(masks: &Tensor<T>) -> Vec<Vec<u8>> {
    let (n, c, h, w) = masks.dims4();
    let plane = h * w;
    (0..n)
        .map(|i| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if masks.data()[(i * c + ch) * plane + p] > masks.data()[(i * c + best) * plane + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                depth: 2,
                base_channels: 4,
                feature_dim: 8,
                input_size: (16, 16),
                in_channels: 1,
            },
            head_hidden: 4,
            classes: 3,
            kernels: 5,
            sigma: 30.0,
            likelihood_norm: LikelihoodNorm::L1,
        }
    }

    fn batch(n: usize, h: usize, w: usize) -> Tensor<f64> {
        let data = (0..n * h * w).map(|i| ((i as f64) * 0.37).sin() * 0.5 + 0.5).collect();
        Tensor::from_vec(&[n, 1, h, w], data).unwrap()
    }

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [small(), ModelConfig::default()] {
            let store = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.count(), cfg.parameter_count());
            store.check_layout(&cfg).unwrap();
        }
    }

    #[test]
    fn default_parameter_count_is_pinned() {
        // Hand count: encoder 520 336 (down 2 544 + 14 016 + 55 680, bottom
        // 221 952, up 143 808 + 82 336), kernels 12 x 64 = 768, task head
        // 9 940, reconstruction head 17 377.
        assert_eq!(ModelConfig::default().parameter_count(), 548_421);
    }

    #[test]
    fn kernels_start_as_nonnegative_unit_rows() {
        let cfg = small();
        let store = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mu = store.get("kernels.mu");
        for row in mu.data().chunks(cfg.encoder.feature_dim) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = small();
        let store = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = infer(&store, &cfg, &batch(2, 16, 16)).unwrap();
        assert_eq!(out.raw_features.shape(), &[2, 8, 8, 8]);
        assert_eq!(out.likelihoods.shape(), &[2, 5, 8, 8]);
        assert_eq!(out.recomposed.shape(), &[2, 8, 8, 8]);
        assert_eq!(out.masks.shape(), &[2, 4, 16, 16]);
        assert_eq!(out.reconstruction.shape(), &[2, 1, 16, 16]);
        assert!(out.masks.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let cfg = small();
        let store = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x: Tensor<f32> = batch(3, 16, 16).cast();
        let a = infer(&store, &cfg, &x).unwrap();
        let b = infer(&store, &cfg, &x).unwrap();
        assert_eq!(a.masks.data(), b.masks.data());
        assert_eq!(a.reconstruction.data(), b.reconstruction.data());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = small();
        let store = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(infer(&store, &cfg, &batch(1, 8, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let mut cfg = small();
        cfg.encoder.input_size = (18, 16);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn collapsed_kernel_is_reported() {
        let cfg = small();
        let mut store = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let i = store.position("kernels.mu").unwrap();
        store.params[i].value.data_mut()[..8].fill(0.0);
        assert!(matches!(
            infer(&store, &cfg, &batch(1, 16, 16)),
            Err(Error::DegenerateKernel { index: 0, .. })
        ));
    }
}
