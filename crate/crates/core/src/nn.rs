//! Parameterised layers, the named parameter registry and deterministic initialisation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SeedTree;
use crate::tensor::{Element, Tensor};

/// Named registry of trainable tensors, enumerated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    /// Registers a tensor under a unique name; it becomes trainable.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        t.set_requires_grad(true);
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds per-parameter gradients (e.g. from [`Graph::param_grads`]).
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (name, g) in grads {
            self.params
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{name}`")))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// How a layer's weight tensor is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal { std: f64 },
    /// He-style normal with std `sqrt(2 / fan_in)`.
    FanInNormal,
    Zeros,
}

/// The kinds of parameterised layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    Deconv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    /// Depthwise `k×k` convolution with bias, stride 1, padding `k/2`.
    DwConv { channels: usize, kernel: usize },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    LayerNorm { dim: usize },
}

/// Declarative description of one layer: it fixes the shapes and count of its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub init: WeightInit,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        let init = match kind {
            LayerKind::Linear { .. } => WeightInit::TruncNormal { std: 0.02 },
            _ => WeightInit::FanInNormal,
        };
        LayerSpec { name: name.into(), kind, init }
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    /// `(full name, shape)` of every parameter, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = |suffix: &str| format!("{}.{suffix}", self.name);
        let mut out = Vec::new();
        match self.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, groups, bias, .. } => {
                out.push((p("weight"), vec![out_ch, in_ch / groups, kernel, kernel]));
                if bias {
                    out.push((p("bias"), vec![out_ch]));
                }
            }
            LayerKind::Deconv { in_ch, out_ch, kernel, bias, .. } => {
                out.push((p("weight"), vec![in_ch, out_ch, kernel, kernel]));
                if bias {
                    out.push((p("bias"), vec![out_ch]));
                }
            }
            LayerKind::DwConv { channels, kernel } => {
                out.push((p("weight"), vec![channels, 1, kernel, kernel]));
                out.push((p("bias"), vec![channels]));
            }
            LayerKind::Linear { in_features, out_features, bias } => {
                out.push((p("weight"), vec![in_features, out_features]));
                if bias {
                    out.push((p("bias"), vec![out_features]));
                }
            }
            LayerKind::LayerNorm { dim } => {
                out.push((p("gamma"), vec![dim]));
                out.push((p("beta"), vec![dim]));
            }
        }
        out
    }

    /// Number of scalars the layer registers, from its hyperparameters.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, groups, bias, .. } => {
                out_ch * (in_ch / groups) * kernel * kernel + if bias { out_ch } else { 0 }
            }
            LayerKind::Deconv { in_ch, out_ch, kernel, bias, .. } => {
                in_ch * out_ch * kernel * kernel + if bias { out_ch } else { 0 }
            }
            LayerKind::DwConv { channels, kernel } => channels * kernel * kernel + channels,
            LayerKind::Linear { in_features, out_features, bias } => {
                in_features * out_features + if bias { out_features } else { 0 }
            }
            LayerKind::LayerNorm { dim } => 2 * dim,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { in_ch, kernel, groups, .. } => in_ch / groups * kernel * kernel,
            // each output pixel of a transposed conv receives (k/s)² taps per input channel
            LayerKind::Deconv { in_ch, kernel, stride, .. } => {
                (in_ch * kernel * kernel / (stride * stride)).max(1)
            }
            LayerKind::DwConv { kernel, .. } => kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
            LayerKind::LayerNorm { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("layer `{}`: {m}", self.name)));
        match self.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, stride, groups, .. } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 || groups == 0 {
                    return bad("zero-sized conv hyperparameter".into());
                }
                if in_ch % groups != 0 || out_ch % groups != 0 {
                    return bad(format!("{in_ch}→{out_ch} channels not divisible by {groups} groups"));
                }
            }
            LayerKind::Deconv { in_ch, out_ch, kernel, stride, .. } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    return bad("zero-sized deconv hyperparameter".into());
                }
            }
            LayerKind::DwConv { channels, kernel } => {
                if channels == 0 || kernel % 2 == 0 {
                    return bad("depthwise conv needs channels > 0 and an odd kernel".into());
                }
            }
            LayerKind::Linear { in_features, out_features, .. } => {
                if in_features == 0 || out_features == 0 {
                    return bad("zero-sized linear layer".into());
                }
            }
            LayerKind::LayerNorm { dim } => {
                if dim == 0 {
                    return bad("zero-sized norm".into());
                }
            }
        }
        Ok(())
    }
}

/// Draws the parameters of `spec`; the same `(spec, seed)` always yields identical bits.
///
/// Each tensor gets its own stream keyed by its full name, so the values do
/// not depend on which other layers exist.
pub fn init_params<T: Element>(spec: &LayerSpec, seed: u64) -> Vec<(String, Tensor<T>)> {
    let tree = SeedTree::new(seed);
    spec.param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let is_weight = name.ends_with(".weight");
            let data: Vec<T> = if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else if !is_weight || spec.init == WeightInit::Zeros {
                vec![T::zero(); n]
            } else {
                let std = match spec.init {
                    WeightInit::TruncNormal { std } => std,
                    _ => (2.0 / spec.fan_in() as f64).sqrt(),
                };
                let truncate = matches!(spec.init, WeightInit::TruncNormal { .. });
                let mut rng = tree.stream(&name);
                (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if !truncate || z.abs() <= 2.0 {
                            break T::from_f64_lossy(z * std);
                        }
                    })
                    .collect()
            };
            let t = Tensor::new(&shape, data).expect("spec shape").with_grad();
            (name, t)
        })
        .collect()
}

/// Initialises every spec into a fresh store.
pub fn build_store<T: Element>(specs: &[LayerSpec], seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for spec in specs {
        spec.validate()?;
        for (name, t) in init_params(spec, seed) {
            store.insert(name, t)?;
        }
    }
    Ok(store)
}

/// Collects layer specs while a network is being assembled.
#[derive(Debug, Default)]
pub struct Plan {
    pub specs: Vec<LayerSpec>,
}

impl Plan {
    pub fn new() -> Self {
        Plan::default()
    }

    /// Changes the weight init of an already planned layer.
    pub fn set_init(&mut self, layer: &str, init: WeightInit) -> Result<()> {
        let spec = self
            .specs
            .iter_mut()
            .find(|s| s.name == layer)
            .ok_or_else(|| Error::Usage(format!("no planned layer `{layer}`")))?;
        spec.init = init;
        Ok(())
    }

    fn add(&mut self, spec: LayerSpec) -> &LayerSpec {
        self.specs.push(spec);
        self.specs.last().expect("just pushed")
    }
}

/// `y = x·W + b` over the rows of an `L×in` matrix; `W` is stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    bias: bool,
}

impl Linear {
    pub fn new(plan: &mut Plan, name: &str, in_features: usize, out_features: usize, init: WeightInit) -> Self {
        plan.add(
            LayerSpec::new(name, LayerKind::Linear { in_features, out_features, bias: true }).with_init(init),
        );
        Linear { name: name.into(), in_features, out_features, bias: true }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &format!("{}.weight", self.name))?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(ps, &format!("{}.bias", self.name))?;
            g.bias_add(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        plan: &mut Plan,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        plan.add(LayerSpec::new(
            name,
            LayerKind::Conv { in_ch, out_ch, kernel, stride, padding, groups, bias: true },
        ));
        Conv2d { name: name.into(), in_ch, out_ch, kernel, stride, padding, groups }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &format!("{}.weight", self.name))?;
        let b = g.param(ps, &format!("{}.bias", self.name))?;
        g.conv2d(x, w, Some(b), self.stride, self.padding, self.groups)
    }
}

/// Transposed convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(plan: &mut Plan, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        plan.add(LayerSpec::new(
            name,
            LayerKind::Deconv { in_ch, out_ch, kernel, stride, padding, bias: true },
        ));
        ConvTranspose2d { name: name.into(), in_ch, out_ch, kernel, stride, padding }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &format!("{}.weight", self.name))?;
        let b = g.param(ps, &format!("{}.bias", self.name))?;
        g.conv2d_transposed(x, w, Some(b), self.stride, self.padding)
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Layer normalisation over the rows of an `L×D` matrix.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(plan: &mut Plan, name: &str, dim: usize) -> Self {
        plan.add(LayerSpec::new(name, LayerKind::LayerNorm { dim }));
        LayerNorm { name: name.into(), dim }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, &format!("{}.gamma", self.name))?;
        let beta = g.param(ps, &format!("{}.beta", self.name))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Normalises a `C×H×W` map over its channels at every pixel.
    pub fn forward_channels<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let tokens = to_tokens(g, x)?;
        let y = self.forward(g, ps, tokens)?;
        from_tokens(g, y, &shape)
    }
}

/// `C×H×W` → `(H·W)×C`.
pub fn to_tokens<T: Element>(g: &Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::dim(format!("expected C×H×W, got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// `(H·W)×C` → `C×H×W` for the given target shape.
pub fn from_tokens<T: Element>(g: &Graph<T>, t: Var, shape: &[usize]) -> Result<Var> {
    let cols = g.transpose(t)?;
    g.reshape(cols, shape)
}

/// Positional encoding by a residual depthwise `k×k` convolution: `x + DWConv(x)`.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub name: String,
    pub channels: usize,
    pub kernel: usize,
}

impl DwConv {
    pub fn new(plan: &mut Plan, name: &str, channels: usize, kernel: usize, init: WeightInit) -> Self {
        plan.add(LayerSpec::new(name, LayerKind::DwConv { channels, kernel }).with_init(init));
        DwConv { name: name.into(), channels, kernel }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &format!("{}.weight", self.name))?;
        let b = g.param(ps, &format!("{}.bias", self.name))?;
        let y = g.conv2d(x, w, Some(b), 1, self.kernel / 2, self.channels)?;
        g.add(x, y)
    }
}
