//! Cascaded group spatial-reduction multi-head attention and the sandwich block built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{from_tokens, to_tokens, Conv2d, DwConv, LayerNorm, Linear, ParamStore, Plan, WeightInit};
use crate::tensor::Element;

const PROJ_INIT: WeightInit = WeightInit::TruncNormal { std: 0.02 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub channels: usize,
    pub groups: usize,
    /// Spatial reduction ratio applied to keys and values.
    pub ratio: usize,
    /// Heads per group.
    pub heads: usize,
}

impl AttnConfig {
    pub fn group_channels(&self) -> usize {
        self.channels / self.groups
    }

    pub fn head_dim(&self) -> usize {
        self.group_channels() / self.heads
    }

    /// Checks the channel bookkeeping, and the spatial size when one is given.
    pub fn validate(&self, spatial: Option<(usize, usize)>) -> Result<()> {
        let AttnConfig { channels, groups, ratio, heads } = *self;
        if channels == 0 || groups == 0 || ratio == 0 || heads == 0 {
            return Err(Error::config(format!("attention sizes must be positive: {self:?}")));
        }
        if channels % groups != 0 {
            return Err(Error::config(format!("channels {channels} not divisible by groups {groups}")));
        }
        if (channels / groups) % heads != 0 {
            return Err(Error::config(format!(
                "group width {} not divisible by heads {heads}",
                channels / groups
            )));
        }
        if let Some((h, w)) = spatial {
            if h < ratio || w < ratio {
                return Err(Error::dim(format!("reduction ratio {ratio} exceeds the {h}×{w} map")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub attn: AttnConfig,
    pub ffn_ratio: usize,
    pub ffn_pre: usize,
    pub ffn_post: usize,
}

impl BlockConfig {
    pub fn validate(&self, spatial: Option<(usize, usize)>) -> Result<()> {
        if self.ffn_ratio == 0 || self.ffn_pre == 0 || self.ffn_post == 0 {
            return Err(Error::config(format!(
                "ffn ratio and counts must be ≥ 1, got ratio {} pre {} post {}",
                self.ffn_ratio, self.ffn_pre, self.ffn_post
            )));
        }
        self.attn.validate(spatial)
    }
}

/// Learned `conv(r, r)` over one group followed by channel LN; `r = 1` is a 1×1 projection.
/// Maps not divisible by `r` keep `floor(H/r) × floor(W/r)` reduced tokens.
#[derive(Clone, Debug)]
pub struct SpatialReduce {
    pub ratio: usize,
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl SpatialReduce {
    pub fn new(plan: &mut Plan, name: &str, channels: usize, ratio: usize) -> Self {
        SpatialReduce {
            ratio,
            conv: Conv2d::new(plan, &format!("{name}.conv"), channels, channels, ratio, ratio, 0, 1),
            norm: LayerNorm::new(plan, &format!("{name}.norm"), channels),
        }
    }

    /// Reduced tokens, `(⌊H/r⌋ · ⌊W/r⌋) × c`, normalised.
    pub fn tokens<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] < self.ratio || s[2] < self.ratio {
            return Err(Error::dim(format!("reduction ratio {} on {s:?}", self.ratio)));
        }
        let y = self.conv.forward(g, ps, x)?;
        let t = to_tokens(g, y)?;
        self.norm.forward(g, ps, t)
    }

    /// Reduced map, `c × H/r × W/r`.
    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let t = self.tokens(g, ps, x)?;
        from_tokens(g, t, &[s[0], s[1] / self.ratio, s[2] / self.ratio])
    }
}

/// Scaled dot-product attention split into `heads` column blocks.
/// `q: N×c`, `k, v: M×c` → `N×c`.
pub fn multi_head_attention<T: Element>(g: &Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let c = g.shape(q)[1];
    if heads == 0 || !c.is_multiple_of(heads) || g.shape(k)[1] != c || g.shape(v)[1] != c {
        return Err(Error::dim(format!(
            "attention with {heads} heads on q {:?} k {:?} v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let outs = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.narrow(q, 1, h * d, d)?, g.narrow(k, 1, h * d, d)?, g.narrow(v, 1, h * d, d)?)
            };
            let logits = g.matmul(qh, g.transpose(kh)?)?;
            let attn = g.softmax(g.scale(logits, scale)?, 1)?;
            g.matmul(attn, vh)
        })
        .collect::<Result<Vec<_>>>()?;
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Attention inside one group: queries from every token, keys and values from the
/// spatially reduced tokens, heads concatenated and layer-normalised.
#[derive(Clone, Debug)]
pub struct GroupAttention {
    pub heads: usize,
    pub q: Linear,
    pub sr: SpatialReduce,
    pub k: Linear,
    pub v: Linear,
    pub norm: LayerNorm,
}

impl GroupAttention {
    pub fn new(plan: &mut Plan, name: &str, channels: usize, ratio: usize, heads: usize) -> Self {
        let p = |s: &str| format!("{name}.{s}");
        GroupAttention {
            heads,
            q: Linear::new(plan, &p("q"), channels, channels, PROJ_INIT),
            sr: SpatialReduce::new(plan, &p("sr"), channels, ratio),
            k: Linear::new(plan, &p("k"), channels, channels, PROJ_INIT),
            v: Linear::new(plan, &p("v"), channels, channels, PROJ_INIT),
            norm: LayerNorm::new(plan, &p("norm"), channels),
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[0] != self.q.in_features {
            return Err(Error::dim(format!(
                "group attention over {} channels got {shape:?}",
                self.q.in_features
            )));
        }
        let tokens = to_tokens(g, x)?;
        let q = self.q.forward(g, ps, tokens)?;
        let reduced = self.sr.tokens(g, ps, x)?;
        let k = self.k.forward(g, ps, reduced)?;
        let v = self.v.forward(g, ps, reduced)?;
        let o = multi_head_attention(g, q, k, v, self.heads)?;
        let o = self.norm.forward(g, ps, o)?;
        from_tokens(g, o, &shape)
    }
}

/// Channel groups attended in sequence, each fed the previous group's output,
/// then mixed by a full `C×C` projection.
#[derive(Clone, Debug)]
pub struct CgsrMha {
    pub cfg: AttnConfig,
    pub groups: Vec<GroupAttention>,
    pub proj: Linear,
}

impl CgsrMha {
    pub fn new(plan: &mut Plan, name: &str, cfg: AttnConfig, proj_init: WeightInit) -> Result<Self> {
        cfg.validate(None)?;
        let groups = (0..cfg.groups)
            .map(|i| GroupAttention::new(plan, &format!("{name}.group{i}"), cfg.group_channels(), cfg.ratio, cfg.heads))
            .collect();
        let proj = Linear::new(plan, &format!("{name}.proj"), cfg.channels, cfg.channels, proj_init);
        Ok(CgsrMha { cfg, groups, proj })
    }

    /// Outputs of every group before the final projection, each `C/G × H × W`.
    pub fn forward_groups<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != self.cfg.channels {
            return Err(Error::dim(format!("attention over {} channels got {s:?}", self.cfg.channels)));
        }
        self.cfg.validate(Some((s[1], s[2])))?;
        let parts = if self.cfg.groups == 1 { vec![x] } else { g.chunk(x, 0, self.cfg.groups)? };
        let mut outs: Vec<Var> = Vec::with_capacity(parts.len());
        for (ga, &part) in self.groups.iter().zip(&parts) {
            let input = match outs.last() {
                Some(&prev) => g.add(part, prev)?,
                None => part,
            };
            outs.push(ga.forward(g, ps, input)?);
        }
        Ok(outs)
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let outs = self.forward_groups(g, ps, x)?;
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        let t = to_tokens(g, cat)?;
        let y = self.proj.forward(g, ps, t)?;
        from_tokens(g, y, &shape)
    }
}

/// `t + fc2(gelu(fc1(LN(t))))` on `N×C` tokens.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(plan: &mut Plan, name: &str, channels: usize, ratio: usize, out_init: WeightInit) -> Self {
        Ffn {
            norm: LayerNorm::new(plan, &format!("{name}.norm"), channels),
            fc1: Linear::new(plan, &format!("{name}.fc1"), channels, channels * ratio, PROJ_INIT),
            fc2: Linear::new(plan, &format!("{name}.fc2"), channels * ratio, channels, out_init),
        }
    }

    pub fn residual<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, t: Var) -> Result<Var> {
        let y = self.norm.forward(g, ps, t)?;
        let y = self.fc1.forward(g, ps, y)?;
        let y = g.gelu(y)?;
        let y = self.fc2.forward(g, ps, y)?;
        g.add(t, y)
    }
}

/// Sandwich block: positional depthwise conv, FFNs, one attention, FFNs; every branch residual.
#[derive(Clone, Debug)]
pub struct HevitBlock {
    pub cfg: BlockConfig,
    pub pos: DwConv,
    pub ffn_pre: Vec<Ffn>,
    pub attn_norm: LayerNorm,
    pub attn: CgsrMha,
    pub ffn_post: Vec<Ffn>,
}

impl HevitBlock {
    /// Output projections of every residual branch start at zero, so a fresh block is the identity.
    pub fn new(plan: &mut Plan, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate(None)?;
        let c = cfg.attn.channels;
        let p = |s: &str| format!("{name}.{s}");
        let pos = DwConv::new(plan, &p("pos"), c, 3, WeightInit::Zeros);
        let ffn_pre = (0..cfg.ffn_pre)
            .map(|i| Ffn::new(plan, &p(&format!("ffn_pre{i}")), c, cfg.ffn_ratio, WeightInit::Zeros))
            .collect();
        let attn_norm = LayerNorm::new(plan, &p("attn_norm"), c);
        let attn = CgsrMha::new(plan, &p("attn"), cfg.attn, WeightInit::Zeros)?;
        let ffn_post = (0..cfg.ffn_post)
            .map(|i| Ffn::new(plan, &p(&format!("ffn_post{i}")), c, cfg.ffn_ratio, WeightInit::Zeros))
            .collect();
        Ok(HevitBlock { cfg, pos, ffn_pre, attn_norm, attn, ffn_post })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        self.cfg.validate(Some((shape[1], shape[2])))?;
        let x = self.pos.forward(g, ps, x)?;
        let mut t = to_tokens(g, x)?;
        for f in &self.ffn_pre {
            t = f.residual(g, ps, t)?;
        }
        let normed = self.attn_norm.forward(g, ps, t)?;
        let a = self.attn.forward(g, ps, from_tokens(g, normed, &shape)?)?;
        t = g.add(t, to_tokens(g, a)?)?;
        for f in &self.ffn_post {
            t = f.residual(g, ps, t)?;
        }
        from_tokens(g, t, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_store;
    use crate::tensor::Tensor;

    fn cfg(channels: usize, groups: usize, ratio: usize, heads: usize) -> AttnConfig {
        AttnConfig { channels, groups, ratio, heads }
    }

    #[test]
    fn config_divisibility() {
        assert!(cfg(128, 4, 8, 2).validate(Some((64, 64))).is_ok());
        assert_eq!(cfg(128, 4, 8, 2).group_channels(), 32);
        assert_eq!(cfg(128, 4, 8, 2).head_dim(), 16);
        assert!(cfg(128, 3, 8, 2).validate(None).is_err());
        assert!(cfg(128, 4, 8, 3).validate(None).is_err());
        assert!(cfg(128, 4, 8, 2).validate(Some((60, 64))).is_ok());
        assert!(cfg(128, 4, 8, 2).validate(Some((4, 64))).is_err());
    }

    #[test]
    fn spatial_reduce_shapes() {
        let mut plan = Plan::new();
        let sr8 = SpatialReduce::new(&mut plan, "a", 32, 8);
        let sr1 = SpatialReduce::new(&mut plan, "b", 32, 1);
        let ps = build_store::<f32>(&plan.specs, 0).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[32, 64, 64], |i| ((i % 13) as f32).sin()));
        assert_eq!(g.shape(sr8.forward(&g, &ps, x).unwrap()), vec![32, 8, 8]);
        assert_eq!(g.shape(sr8.tokens(&g, &ps, x).unwrap()), vec![64, 32]);
        assert_eq!(g.shape(sr1.forward(&g, &ps, x).unwrap()), vec![32, 64, 64]);
        let odd = g.constant(Tensor::zeros(&[32, 12, 20]));
        assert_eq!(g.shape(sr8.forward(&g, &ps, odd).unwrap()), vec![32, 1, 2]);
        let small = g.constant(Tensor::zeros(&[32, 4, 20]));
        assert!(matches!(sr8.forward(&g, &ps, small), Err(Error::Dimension(_))));
    }

    #[test]
    fn equal_tokens_attend_to_themselves() {
        let g = Graph::<f64>::new();
        let t = g.constant(Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap());
        let y = multi_head_attention(&g, t, t, t, 1).unwrap();
        assert_eq!(*g.value(y), *g.value(t));
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut plan = Plan::new();
        let b = HevitBlock::new(
            &mut plan,
            "blk",
            BlockConfig { attn: cfg(16, 4, 2, 2), ffn_ratio: 2, ffn_pre: 1, ffn_post: 1 },
        )
        .unwrap();
        let ps = build_store::<f64>(&plan.specs, 5).unwrap();
        let g = Graph::new();
        let img = Tensor::from_fn(&[16, 4, 4], |i| (i as f64 * 0.3).cos());
        let x = g.constant(img.clone());
        let y = b.forward(&g, &ps, x).unwrap();
        assert_eq!(*g.value(y), img);
    }

    #[test]
    fn cascade_output_shape() {
        let mut plan = Plan::new();
        let m = CgsrMha::new(&mut plan, "attn", cfg(16, 4, 2, 2), PROJ_INIT).unwrap();
        let ps = build_store::<f64>(&plan.specs, 1).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[16, 8, 8], |i| (i as f64 * 0.7).sin()));
        let y = m.forward(&g, &ps, x).unwrap();
        assert_eq!(g.shape(y), vec![16, 8, 8]);
        let groups = m.forward_groups(&g, &ps, x).unwrap();
        assert_eq!(groups.len(), 4);
        assert!(groups.iter().all(|&v| g.shape(v) == vec![4, 8, 8]));
    }
}
