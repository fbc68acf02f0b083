//! Model description, validation, and the deterministic forward pass.
//!
//! A [`NetworkGraph`] is an ordered list of layers plus the weights of the
//! weighted ones. Graphs are immutable once built; every forward pass is a
//! pure function, so one graph can be shared across any number of workers.
//!
//! On disk a model is two flat files: `<name>.json` (the manifest) and
//! `<name>.bin` (all weight tensors as little-endian `f32`, indexed by byte
//! offsets in the manifest). See [`manifest`] for the exact layout.

mod manifest;
pub mod ntsr;

pub use manifest::{load_model, load_model_files, save_model, save_model_files};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::predict::MaskSet;

/// Layer kinds understood by the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        /// Kernel extents as `[height, width]`.
        kernel: (usize, usize),
        stride: usize,
        /// Zero padding applied symmetrically to both spatial borders.
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
    /// Marks a stochastic site. Carries no weights; the rate comes from
    /// [`DropoutConfig`] at run time.
    Dropout,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    fn label(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2x2 => "maxpool2x2",
            LayerKind::Flatten => "flatten",
            LayerKind::Dropout => "dropout",
        }
    }
}

/// One layer: a unique name plus its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }
}

/// Weight and bias of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Global dropout configuration: one rate for every site, inverted scaling.
///
/// Kept activations are divided by `1 - rate` at sample time, so a pass
/// without masks needs no rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    rate: f64,
}

impl DropoutConfig {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) || !rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutConfig { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Inverted-dropout scale `1 / (1 - rate)` applied to kept units.
    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }
}

/// Immutable network: input shape, ordered layers, and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    weights: BTreeMap<String, LayerWeights>,
}

impl NetworkGraph {
    /// Builds a graph and rejects it if validation produces any finding.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, LayerWeights>,
    ) -> Result<Self> {
        let g = NetworkGraph::new_unchecked(input_shape, layers, weights);
        let findings = validate_graph(&g);
        if findings.is_empty() {
            Ok(g)
        } else {
            Err(Error::Shape(format!("invalid graph: {}", findings.join("; "))))
        }
    }

    /// Builds a graph without validation. Pair with [`validate_graph`].
    pub fn new_unchecked(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, LayerWeights>,
    ) -> Self {
        NetworkGraph { input_shape, layers, weights }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &BTreeMap<String, LayerWeights> {
        &self.weights
    }

    pub fn layer_weights(&self, name: &str) -> Option<&LayerWeights> {
        self.weights.get(name)
    }

    /// Activation shape after every layer, starting with the input shape.
    /// Entry `i + 1` is the output shape of layer `i`.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.clone());
        let mut current = self.input_shape.clone();
        for layer in &self.layers {
            current = output_shape(&layer.kind, &current).map_err(|e| {
                Error::Shape(format!("layer '{}': {e}", layer.name))
            })?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    /// Shapes of the activations entering each dropout site, in layer order.
    pub fn dropout_site_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.activation_shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Dropout)
            .map(|(i, _)| shapes[i].clone())
            .collect())
    }

    pub fn dropout_site_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Dropout).count()
    }
}

/// Output shape of one layer applied to `input`.
pub fn output_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    match kind {
        LayerKind::Dense { in_dim, out_dim } => {
            if input != [*in_dim] {
                return Err(Error::Shape(format!(
                    "dense expects input [{in_dim}], got {input:?}"
                )));
            }
            Ok(vec![*out_dim])
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let [c, h, w] = spatial3(input, "conv2d")?;
            if c != *in_channels {
                return Err(Error::Shape(format!(
                    "conv2d expects {in_channels} input channels, got {c}"
                )));
            }
            let (kh, kw) = *kernel;
            let h_pad = h + 2 * padding;
            let w_pad = w + 2 * padding;
            if *stride == 0 {
                return Err(Error::Shape("conv2d stride must be >= 1".into()));
            }
            if kh == 0 || kw == 0 || kh > h_pad || kw > w_pad {
                return Err(Error::Shape(format!(
                    "conv2d kernel {kh}x{kw} does not fit padded input {h_pad}x{w_pad}"
                )));
            }
            let h_out = (h_pad - kh) / stride + 1;
            let w_out = (w_pad - kw) / stride + 1;
            Ok(vec![*out_channels, h_out, w_out])
        }
        LayerKind::Relu | LayerKind::Dropout => Ok(input.to_vec()),
        LayerKind::MaxPool2x2 => {
            let [c, h, w] = spatial3(input, "maxpool2x2")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!(
                    "maxpool2x2 needs even spatial dims, got {h}x{w}"
                )));
            }
            Ok(vec![c, h / 2, w / 2])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

fn spatial3(input: &[usize], op: &str) -> Result<[usize; 3]> {
    match input {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::Shape(format!(
            "{op} expects a [channels, height, width] input, got {input:?}"
        ))),
    }
}

/// Checks every structural invariant and returns human-readable findings.
/// An empty list means the graph is well formed.
pub fn validate_graph(g: &NetworkGraph) -> Vec<String> {
    let mut findings = Vec::new();

    if g.input_shape.is_empty() || g.input_shape.iter().any(|&d| d == 0) {
        findings.push(format!("input shape {:?} has an empty or zero extent", g.input_shape));
    }

    let mut seen = std::collections::BTreeSet::new();
    for layer in &g.layers {
        if !seen.insert(layer.name.as_str()) {
            findings.push(format!("duplicate layer name '{}'", layer.name));
        }
        match &layer.kind {
            LayerKind::Dense { in_dim, out_dim } => {
                if *in_dim == 0 || *out_dim == 0 {
                    findings.push(format!("layer '{}': dense dims must be >= 1", layer.name));
                }
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                if *in_channels == 0 || *out_channels == 0 {
                    findings.push(format!("layer '{}': conv2d channels must be >= 1", layer.name));
                }
                if kernel.0 == 0 || kernel.1 == 0 {
                    findings.push(format!("layer '{}': conv2d kernel must be >= 1x1", layer.name));
                }
                if *stride == 0 {
                    findings.push(format!("layer '{}': conv2d stride must be >= 1", layer.name));
                }
            }
            _ => {}
        }
    }

    // Shape chain. Stop at the first break; later shapes are unknowable.
    let mut current = g.input_shape.clone();
    for layer in &g.layers {
        match output_shape(&layer.kind, &current) {
            Ok(next) => current = next,
            Err(e) => {
                findings.push(format!("layer '{}': {e}", layer.name));
                break;
            }
        }
    }

    for layer in &g.layers {
        if !layer.kind.is_weighted() {
            continue;
        }
        let Some(lw) = g.weights.get(&layer.name) else {
            findings.push(format!("layer '{}' has no weights", layer.name));
            continue;
        };
        let (want_w, want_b): (Vec<usize>, Vec<usize>) = match &layer.kind {
            LayerKind::Dense { in_dim, out_dim } => (vec![*out_dim, *in_dim], vec![*out_dim]),
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => (
                vec![*out_channels, *in_channels, kernel.0, kernel.1],
                vec![*out_channels],
            ),
            _ => unreachable!(),
        };
        if lw.weight.shape() != want_w.as_slice() {
            findings.push(format!(
                "layer '{}': weight shape {:?}, declared {:?}",
                layer.name,
                lw.weight.shape(),
                want_w
            ));
        }
        if lw.bias.shape() != want_b.as_slice() {
            findings.push(format!(
                "layer '{}': bias shape {:?}, declared {:?}",
                layer.name,
                lw.bias.shape(),
                want_b
            ));
        }
    }

    let declared: std::collections::BTreeSet<&str> = g
        .layers
        .iter()
        .filter(|l| l.kind.is_weighted())
        .map(|l| l.name.as_str())
        .collect();
    for name in g.weights.keys() {
        if !declared.contains(name.as_str()) {
            findings.push(format!("weights present for unknown or unweighted layer '{name}'"));
        }
    }

    findings
}

/// Runs the plain forward pass.
///
/// With a mask, each dropout site multiplies its activations by
/// `mask / (1 - rate)`; without one, dropout sites are the identity.
pub fn forward_deterministic(
    g: &NetworkGraph,
    x: &Tensor,
    mask: Option<&MaskSet>,
    cfg: Option<&DropoutConfig>,
) -> Result<Tensor> {
    if x.shape() != g.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match network input {:?}",
            x.shape(),
            g.input_shape()
        )));
    }
    if mask.is_some() && cfg.is_none() {
        return Err(Error::InvalidArgument(
            "a mask requires a dropout config for the keep scale".into(),
        ));
    }
    if let Some(m) = mask {
        if m.site_count() != g.dropout_site_count() {
            return Err(Error::InvalidArgument(format!(
                "mask has {} sites, graph has {}",
                m.site_count(),
                g.dropout_site_count()
            )));
        }
    }

    let mut act = x.clone();
    let mut site = 0usize;
    for layer in &g.layers {
        act = match &layer.kind {
            LayerKind::Dense { .. } => {
                let lw = expect_weights(g, &layer.name)?;
                dense_apply(&lw.weight, Some(&lw.bias), &act)?
            }
            LayerKind::Conv2d { stride, padding, .. } => {
                let lw = expect_weights(g, &layer.name)?;
                conv2d_apply(&lw.weight, Some(&lw.bias), &act, *stride, *padding)?
            }
            LayerKind::Relu => act.map(|v| v.max(0.0)),
            LayerKind::MaxPool2x2 => maxpool2x2_apply(&act)?,
            LayerKind::Flatten => act.reshape(vec![act.len()])?,
            LayerKind::Dropout => {
                let out = match mask {
                    Some(m) => {
                        let cfg = cfg.expect("checked above");
                        apply_site_mask(&act, m.site(site)?, cfg.keep_scale())?
                    }
                    None => act,
                };
                site += 1;
                out
            }
        };
    }
    Ok(act)
}

fn expect_weights<'g>(g: &'g NetworkGraph, name: &str) -> Result<&'g LayerWeights> {
    g.weights
        .get(name)
        .ok_or_else(|| Error::MissingWeight(format!("layer '{name}'")))
}

pub(crate) fn apply_site_mask(act: &Tensor, mask: &Tensor, keep_scale: f64) -> Result<Tensor> {
    if !act.same_shape(mask) {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match activation {:?}",
            mask.shape(),
            act.shape()
        )));
    }
    let data = act
        .data()
        .iter()
        .zip(mask.data())
        .map(|(a, m)| a * m * keep_scale)
        .collect();
    Tensor::new(act.shape().to_vec(), data)
}

/// `W x + b` for a dense layer; bias optional so the variance path can reuse it.
pub(crate) fn dense_apply(weight: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let [out_dim, in_dim] = match weight.shape() {
        [o, i] => [*o, *i],
        s => return Err(Error::Shape(format!("dense weight must be 2-D, got {s:?}"))),
    };
    if x.shape() != [in_dim] {
        return Err(Error::Shape(format!(
            "dense input must be [{in_dim}], got {:?}",
            x.shape()
        )));
    }
    let w = weight.data();
    let xv = x.data();
    let mut out = vec![0.0; out_dim];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * in_dim..(i + 1) * in_dim];
        let mut acc = 0.0;
        for (wij, xj) in row.iter().zip(xv) {
            acc += wij * xj;
        }
        *o = acc;
    }
    if let Some(b) = bias {
        for (o, bi) in out.iter_mut().zip(b.data()) {
            *o += bi;
        }
    }
    Tensor::new(vec![out_dim], out)
}

/// Zero-padded 2-D convolution over a `[c, h, w]` input.
pub(crate) fn conv2d_apply(
    weight: &Tensor,
    bias: Option<&Tensor>,
    x: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [oc, ic, kh, kw] = match weight.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => return Err(Error::Shape(format!("conv2d weight must be 4-D, got {s:?}"))),
    };
    let [c, h, w] = spatial3(x.shape(), "conv2d")?;
    if c != ic {
        return Err(Error::Shape(format!("conv2d input has {c} channels, weight expects {ic}")));
    }
    let kind = LayerKind::Conv2d {
        in_channels: ic,
        out_channels: oc,
        kernel: (kh, kw),
        stride,
        padding,
    };
    let out_shape = output_shape(&kind, x.shape())?;
    let (h_out, w_out) = (out_shape[1], out_shape[2]);

    let wd = weight.data();
    let xd = x.data();
    let mut out = vec![0.0; oc * h_out * w_out];
    for o in 0..oc {
        let base_bias = bias.map(|b| b.data()[o]).unwrap_or(0.0);
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = base_bias;
                for i in 0..ic {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = xd[(i * h + iy as usize) * w + ix as usize];
                            let wi = wd[((o * ic + i) * kh + ky) * kw + kx];
                            acc += wi * xi;
                        }
                    }
                }
                out[(o * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn maxpool2x2_apply(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = spatial3(x.shape(), "maxpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2x2 needs even spatial dims, got {h}x{w}")));
    }
    let (h_out, w_out) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * h_out * w_out];
    for ch in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = xd[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out[(ch * h_out + oy) * w_out + ox] = m;
            }
        }
    }
    Tensor::new(vec![c, h_out, w_out], out)
}
