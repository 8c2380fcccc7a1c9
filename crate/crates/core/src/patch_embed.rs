//! Overlapping patch embedding, its overlap width, and inter-stage downsampling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvTranspose2d, LayerNorm, ParamStore, Plan};
use crate::ops::{conv_out_size, deconv_out_size};
use crate::tensor::Element;

/// Overlap width in pixels between adjacent windows of a `kernel`/`stride` sliding window.
pub fn compute_peow(kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Usage(format!("kernel {kernel} and stride {stride} must be positive")));
    }
    if kernel < stride {
        return Err(Error::InvalidOverlap { kernel, stride, skipped: stride - kernel });
    }
    Ok(kernel - stride)
}

/// How many windows cover each position along one axis.
fn coverage_1d(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<Vec<u32>> {
    let out = conv_out_size(len, kernel, stride, padding)?;
    let mut cover = vec![0u32; len];
    for o in 0..out {
        let start = (o * stride) as isize - padding as isize;
        for t in 0..kernel as isize {
            let p = start + t;
            if (0..len as isize).contains(&p) {
                cover[p as usize] += 1;
            }
        }
    }
    Ok(cover)
}

/// Number of times each pixel of an `h×w` image is read by a `k×k` window with the
/// given stride and zero padding, row-major.
pub fn visit_counts(h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Vec<u32>> {
    let rows = coverage_1d(h, kernel, stride, padding)?;
    let cols = coverage_1d(w, kernel, stride, padding)?;
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| r * c)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    Conv,
    Deconv,
}

/// One stem layer as `(kind, kernel, stride)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemLayer {
    pub kind: StemKind,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

impl StemLayer {
    pub fn conv(kernel: usize, stride: usize) -> Self {
        StemLayer { kind: StemKind::Conv, kernel, stride, padding: None }
    }

    pub fn deconv(kernel: usize, stride: usize) -> Self {
        StemLayer { kind: StemKind::Deconv, kernel, stride, padding: None }
    }

    /// `floor(k/2)` for odd-kernel convs; `(k − s)/2` for even-kernel convs and for
    /// deconvs, so a `k = s` patchify is unpadded and deconvs scale by exactly `s`.
    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(match self.kind {
            StemKind::Conv if self.kernel % 2 == 1 => self.kernel / 2,
            StemKind::Conv => self.kernel.saturating_sub(self.stride) / 2,
            StemKind::Deconv => self.kernel.saturating_sub(self.stride) / 2,
        })
    }

    pub fn peow(&self) -> Result<usize> {
        compute_peow(self.kernel, self.stride)
    }

    /// Spatial size after this layer.
    pub fn out_size(&self, input: usize) -> Result<usize> {
        match self.kind {
            StemKind::Conv => conv_out_size(input, self.kernel, self.stride, self.padding()),
            StemKind::Deconv => deconv_out_size(input, self.kernel, self.stride, self.padding()),
        }
    }
}

impl fmt::Display for StemLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            StemKind::Conv => "conv",
            StemKind::Deconv => "deconv",
        };
        write!(f, "{kind}{}s{}", self.kernel, self.stride)
    }
}

impl FromStr for StemLayer {
    type Err = Error;

    /// Parses `conv7s4` or `deconv4s2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = if let Some(r) = s.strip_prefix("deconv") {
            (StemKind::Deconv, r)
        } else if let Some(r) = s.strip_prefix("conv") {
            (StemKind::Conv, r)
        } else {
            return Err(Error::Usage(format!("stem layer `{s}` must start with conv or deconv")));
        };
        let (k, st) = rest
            .split_once('s')
            .ok_or_else(|| Error::Usage(format!("stem layer `{s}` must look like conv7s4")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Usage(format!("stem layer `{s}`: `{v}` is not a positive integer")))
        };
        Ok(StemLayer { kind, kernel: num(k)?, stride: num(st)?, padding: None })
    }
}

/// Parses a comma-separated stem such as `conv3s2,conv3s2`.
pub fn parse_stem(s: &str) -> Result<Vec<StemLayer>> {
    let layers = s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::Usage("empty stem".into()));
    }
    Ok(layers)
}

/// Per-layer overlap widths of a stem sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemOverlap {
    pub widths: Vec<usize>,
    /// Overlap width of the first convolution, the one reading raw pixels.
    pub primary: usize,
    /// More than one overlapping convolution: overlap strips of the second layer
    /// compound those of the first.
    pub double_overlap: bool,
}

pub fn stem_overlap(layers: &[StemLayer]) -> Result<StemOverlap> {
    let widths = layers.iter().map(StemLayer::peow).collect::<Result<Vec<_>>>()?;
    let first_conv = layers
        .iter()
        .position(|l| l.kind == StemKind::Conv)
        .ok_or_else(|| Error::config("stem needs at least one conv layer"))?;
    let overlapping_convs = layers
        .iter()
        .zip(&widths)
        .filter(|(l, &w)| l.kind == StemKind::Conv && w > 0)
        .count();
    Ok(StemOverlap { primary: widths[first_conv], widths, double_overlap: overlapping_convs > 1 })
}

/// A stem: a sequence of convolutions (and optionally transposed convolutions)
/// followed by channel normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub layers: Vec<StemLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl EmbedSpec {
    /// Single `conv(7,4)` stem.
    pub fn default_stem(in_channels: usize, out_channels: usize) -> Self {
        EmbedSpec { layers: vec![StemLayer::conv(7, 4)], in_channels, out_channels }
    }

    /// Width of the intermediate maps of a multi-layer stem.
    pub fn mid_channels(&self) -> usize {
        (self.out_channels / 2).max(1)
    }

    /// `(in, out)` channels of layer `i`.
    pub fn layer_channels(&self, i: usize) -> (usize, usize) {
        let last = self.layers.len() - 1;
        let cin = if i == 0 { self.in_channels } else { self.mid_channels() };
        let cout = if i == last { self.out_channels } else { self.mid_channels() };
        (cin, cout)
    }

    /// Net downsampling factor, when it is an integer.
    pub fn total_stride(&self) -> Result<usize> {
        let down: usize = self.layers.iter().filter(|l| l.kind == StemKind::Conv).map(|l| l.stride).product();
        let up: usize = self.layers.iter().filter(|l| l.kind == StemKind::Deconv).map(|l| l.stride).product();
        if up == 0 || !down.is_multiple_of(up) {
            return Err(Error::config(format!("stem strides give a non-integer reduction {down}/{up}")));
        }
        Ok(down / up)
    }

    /// Spatial size after each layer; errors unless the stem reduces by exactly its total stride.
    pub fn trace_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let total = self.total_stride()?;
        if !h.is_multiple_of(total) || !w.is_multiple_of(total) {
            return Err(Error::dim(format!("input {h}×{w} not divisible by stem stride {total}")));
        }
        let mut sizes = Vec::with_capacity(self.layers.len());
        let (mut ch, mut cw) = (h, w);
        for l in &self.layers {
            ch = l.out_size(ch)?;
            cw = l.out_size(cw)?;
            sizes.push((ch, cw));
        }
        if (ch, cw) != (h / total, w / total) {
            return Err(Error::dim(format!(
                "stem {} maps {h}×{w} to {ch}×{cw}, expected {}×{}",
                self.describe(),
                h / total,
                w / total
            )));
        }
        Ok(sizes)
    }

    pub fn describe(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("stem must have at least one layer"));
        }
        for l in &self.layers {
            if l.kernel == 0 || l.stride == 0 {
                return Err(Error::config(format!("stem layer {l}: kernel and stride must be positive")));
            }
            l.peow().map_err(|e| Error::config(format!("stem layer {l}: {e}")))?;
        }
        stem_overlap(&self.layers)?;
        self.total_stride()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum StemOp {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
}

/// Executable stem. Intermediate layers are followed by GELU; the last by channel LN.
#[derive(Clone, Debug)]
pub struct Embed {
    pub spec: EmbedSpec,
    pub ops: Vec<StemOp>,
    pub norm: LayerNorm,
}

impl Embed {
    pub fn new(plan: &mut Plan, name: &str, spec: EmbedSpec) -> Result<Self> {
        spec.validate()?;
        let ops = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (cin, cout) = spec.layer_channels(i);
                let lname = format!("{name}.{i}");
                match l.kind {
                    StemKind::Conv => {
                        StemOp::Conv(Conv2d::new(plan, &lname, cin, cout, l.kernel, l.stride, l.padding(), 1))
                    }
                    StemKind::Deconv => StemOp::Deconv(ConvTranspose2d::new(
                        plan,
                        &lname,
                        cin,
                        cout,
                        l.kernel,
                        l.stride,
                        l.padding(),
                    )),
                }
            })
            .collect();
        let norm = LayerNorm::new(plan, &format!("{name}.norm"), spec.out_channels);
        Ok(Embed { spec, ops, norm })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != self.spec.in_channels {
            return Err(Error::dim(format!(
                "stem expects {}×H×W input, got {s:?}",
                self.spec.in_channels
            )));
        }
        self.spec.trace_sizes(s[1], s[2])?;
        let mut y = x;
        for (i, op) in self.ops.iter().enumerate() {
            y = match op {
                StemOp::Conv(c) => c.forward(g, ps, y)?,
                StemOp::Deconv(d) => d.forward(g, ps, y)?,
            };
            if i + 1 < self.ops.len() {
                y = g.gelu(y)?;
            }
        }
        self.norm.forward_channels(g, ps, y)
    }
}

/// Halves the spatial size with an overlapping `conv(3, 2, p=1)` and changes the width.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl Downsample {
    pub fn new(plan: &mut Plan, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Downsample {
            conv: Conv2d::new(plan, &format!("{name}.conv"), in_ch, out_ch, 3, 2, 1, 1),
            norm: LayerNorm::new(plan, &format!("{name}.norm"), out_ch),
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::dim(format!("downsample needs even spatial size, got {s:?}")));
        }
        let y = self.conv.forward(g, ps, x)?;
        self.norm.forward_channels(g, ps, y)
    }
}
