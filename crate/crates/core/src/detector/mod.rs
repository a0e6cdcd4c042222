//! The online/target model pair: backbone and feature pyramid (`f`), region
//! proposal layers (`rpn`), detector head (`g`), projector (`p`) and the
//! online-only predictor (`q`).
//!
//! Parameters live in one [`ParamStore`] under the prefixes `online.f`,
//! `online.g`, `online.p`, `online.q`, `online.rpn`, `target.f`, `target.g`
//! and `target.p`. Graph-side access goes through a [`Binding`], which decides
//! per prefix whether a parameter enters the graph as a trainable leaf or as a
//! constant. Target parameters are always bound as constants, so they can
//! never receive a gradient.

mod backbone;
mod head;
mod roi;
mod rpn;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::AnchorConfig;
use crate::numerics::{Gradients, Graph, ParamStore, Tensor, Var};

pub use backbone::{extract, image_input, FeaturePyramid};
pub use head::head_embed;
pub use roi::{roi_align, roi_align_pyramid, roi_level};
pub use rpn::{propose_from_outputs, propose_image, rpn_forward, rpn_propose, ProposeOptions, RpnOutput};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channel width of each backbone stage; stage `s` feeds level `p{s+1}`.
    pub widths: Vec<usize>,
    /// Pyramid channel width `D`.
    pub fpn_dim: usize,
    pub head_hidden: usize,
    pub proj_hidden: usize,
    /// Embedding width `E`.
    pub embed_dim: usize,
    pub roi_size: usize,
    /// Bilinear samples per bin side.
    pub roi_samples: usize,
    pub anchors: AnchorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
            fpn_dim: 32,
            head_hidden: 256,
            proj_hidden: 128,
            embed_dim: 64,
            roi_size: 7,
            roi_samples: 2,
            anchors: AnchorConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A very small network for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            widths: vec![3, 4, 4, 5],
            fpn_dim: 3,
            head_hidden: 6,
            proj_hidden: 5,
            embed_dim: 4,
            roi_size: 2,
            roi_samples: 2,
            anchors: AnchorConfig::default(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn anchors_per_position(&self) -> usize {
        self.anchors.anchors_per_position()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n == 0 || self.anchors.strides.len() < n || self.anchors.sizes.len() < n {
            return Err(Error::Config(format!("{n} stages need as many anchor strides and sizes")));
        }
        for (l, &s) in self.anchors.strides.iter().take(n).enumerate() {
            if s != 1 << (l + 2) {
                return Err(Error::Config(format!("anchor stride {s} at level p{} must be {}", l + 2, 1 << (l + 2))));
            }
        }
        let dims = [self.in_channels, self.fpn_dim, self.head_hidden, self.proj_hidden, self.embed_dim, self.roi_size, self.roi_samples];
        if dims.contains(&0) || self.widths.contains(&0) || self.anchors.ratios.is_empty() {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter name with its shape and initialization std.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, f64)> {
        let mut specs = Vec::new();
        let fan_in = |n: usize, gain: f64| (gain / n as f64).sqrt();
        let relu_gain = 2.0;
        let d = self.fpn_dim;
        let a = self.anchors_per_position();
        for side in ["online", "target"] {
            let mut push = |name: String, shape: Vec<usize>, std: f64| {
                let out = shape[0];
                specs.push((format!("{side}.{name}.weight"), shape, std));
                specs.push((format!("{side}.{name}.bias"), vec![out], 0.0));
            };
            let mut c_in = self.in_channels;
            for (s, &w) in self.widths.iter().enumerate() {
                push(format!("f.stage{}.conv1", s + 1), vec![w, c_in, 3, 3], fan_in(c_in * 9, relu_gain));
                push(format!("f.stage{}.conv2", s + 1), vec![w, w, 3, 3], fan_in(w * 9, relu_gain));
                push(format!("f.lateral{}", s + 2), vec![d, w, 1, 1], fan_in(w, 1.0));
                c_in = w;
            }
            let pooled = d * self.roi_size * self.roi_size;
            push("g.fc1".into(), vec![self.head_hidden, pooled], fan_in(pooled, relu_gain));
            push("g.fc2".into(), vec![self.head_hidden, self.head_hidden], fan_in(self.head_hidden, relu_gain));
            push("p.fc1".into(), vec![self.proj_hidden, self.head_hidden], fan_in(self.head_hidden, relu_gain));
            push("p.fc2".into(), vec![self.embed_dim, self.proj_hidden], fan_in(self.proj_hidden, 1.0));
            if side == "online" {
                push("q.fc1".into(), vec![self.proj_hidden, self.embed_dim], fan_in(self.embed_dim, relu_gain));
                push("q.fc2".into(), vec![self.embed_dim, self.proj_hidden], fan_in(self.proj_hidden, 1.0));
                push("rpn.conv".into(), vec![d, d, 3, 3], fan_in(d * 9, relu_gain));
                push("rpn.obj".into(), vec![a, d, 1, 1], 0.01);
                push("rpn.delta".into(), vec![4 * a, d, 1, 1], 0.01);
            }
        }
        specs
    }
}

/// Which parameter set a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Online,
    Target,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Online => "online",
            Side::Target => "target",
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Online => Side::Target,
            Side::Target => Side::Online,
        }
    }
}

/// Submodules present on both sides and linked by the moving average.
pub const SHARED_MODULES: [&str; 3] = ["f", "g", "p"];

/// Online parameters `θ` and their moving-average shadow `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ModelPair {
    /// Random online weights, zero biases, target a copy of online.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, std) in config.param_specs() {
            if let Some(rest) = name.strip_prefix("target.") {
                let copy = params.get(&format!("online.{rest}"))?.clone();
                params.insert(name, copy);
                continue;
            }
            let n: usize = shape.iter().product();
            let data = if std == 0.0 {
                vec![0.0; n]
            } else {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Wraps a loaded store after checking it has exactly the expected
    /// parameters and shapes.
    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        for (name, shape, _) in &specs {
            let t = params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if params.len() != specs.len() {
            let extra: Vec<&String> = params.names().filter(|n| !specs.iter().any(|s| &s.0 == *n)).collect();
            return Err(Error::Checkpoint(format!("unexpected parameters {extra:?}")));
        }
        Ok(Self { config, params })
    }

    /// `ξ ← m ξ + (1 - m) θ` over the shared submodules.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!("momentum {m} outside [0, 1)")));
        }
        let names: Vec<String> = self.params.names_with_prefix("target.").cloned().collect();
        for name in names {
            let online = self.params.get(&format!("online.{}", &name["target.".len()..]))?.data().to_vec();
            let target = self.params.get_mut(&name)?;
            for (t, o) in target.data_mut().iter_mut().zip(online) {
                // this form leaves ξ bit-identical when it already equals θ
                *t += (1.0 - m) * (o - *t);
            }
        }
        Ok(())
    }

    /// Names of a submodule on one side, e.g. `(Online, "rpn")`.
    pub fn module_names(&self, side: Side, module: &str) -> Vec<String> {
        let prefix = format!("{}.{module}.", side.prefix());
        self.params.names_with_prefix(&prefix).cloned().collect()
    }
}

/// Graph leaves for a selection of parameters.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, (Var, bool)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds every parameter under `prefix` (e.g. `"online.f."`). Target
    /// parameters are bound as constants whatever `trainable` says.
    pub fn bind(&mut self, graph: &mut Graph, store: &ParamStore, prefix: &str, trainable: bool) {
        let trainable = trainable && !prefix.starts_with("target");
        for name in store.names_with_prefix(prefix) {
            if self.vars.contains_key(name) {
                continue;
            }
            let t = store.get(name).expect("listed name").clone();
            let v = if trainable { graph.param(t) } else { graph.constant(t) };
            self.vars.insert(name.clone(), (v, trainable));
        }
    }

    /// Binds a whole side; the online side is trainable when `trainable`.
    pub fn bind_side(&mut self, graph: &mut Graph, store: &ParamStore, side: Side, trainable: bool) {
        self.bind(graph, store, &format!("{}.", side.prefix()), trainable);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).map(|v| v.0).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.vars.get(name).is_some_and(|v| v.1)
    }

    /// Gradients of every trainable bound parameter, zero-filled when the
    /// loss does not depend on it.
    pub fn gradients(&self, graph: &Graph, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(name, &(v, _))| (name.clone(), grads.get_or_zeros(v, graph.value(v).numel())))
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }
}

/// Convolution with the `weight`/`bias` pair named `name`.
pub(crate) fn conv(graph: &mut Graph, b: &Binding, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    graph.conv2d(x, w, Some(bias), stride, pad)
}

pub(crate) fn dense(graph: &mut Graph, b: &Binding, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    graph.linear(x, w, Some(bias))
}

#[cfg(test)]
mod tests;
