//! The three-stage pyramid backbone, the transposed-convolution head and the T/S/B family.

use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, BlockConfig, HevitBlock};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{build_store, Conv2d, ConvTranspose2d, LayerSpec, ParamStore, Plan, WeightInit};
use crate::patch_embed::{Downsample, Embed, EmbedSpec, StemLayer};
use crate::tensor::{Element, Tensor};

pub const STAGES: usize = 3;

/// Full description of one network variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: [usize; STAGES],
    pub depths: [usize; STAGES],
    pub groups: [usize; STAGES],
    pub ratios: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub ffn_ratio: usize,
    pub ffn_pre: usize,
    pub ffn_post: usize,
    /// Output widths of the two upsampling deconvolutions.
    pub head_widths: [usize; 2],
    pub keypoints: usize,
    /// `(H, W)` the model is audited and validated at.
    pub input: [usize; 2],
    pub stem: Vec<StemLayer>,
}

impl ModelConfig {
    /// Named preset: `T`, `S`, `B`, or `tiny` (the small trainable configuration).
    pub fn preset(name: &str) -> Result<Self> {
        let base = |channels, depths, head_widths| ModelConfig {
            channels,
            depths,
            groups: [4, 4, 4],
            ratios: [8, 4, 2],
            heads: [2, 4, 8],
            ffn_ratio: 1,
            ffn_pre: 1,
            ffn_post: 1,
            head_widths,
            keypoints: 16,
            input: [256, 256],
            stem: vec![StemLayer::conv(7, 4)],
        };
        Ok(match name.to_ascii_uppercase().as_str() {
            "T" => base([64, 128, 192], [4, 4, 4], [192, 96]),
            "S" => base([128, 192, 224], [4, 3, 2], [480, 32]),
            "B" => base([128, 256, 384], [4, 4, 4], [160, 160]),
            "TINY" => ModelConfig {
                ffn_ratio: 2,
                input: [64, 64],
                ..base([32, 64, 96], [1, 1, 1], [64, 64])
            },
            _ => return Err(Error::config(format!("unknown preset `{name}` (expected T, S, B or tiny)"))),
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["T", "S", "B"]
    }

    pub fn embed_spec(&self) -> EmbedSpec {
        EmbedSpec { layers: self.stem.clone(), in_channels: 3, out_channels: self.channels[0] }
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            attn: AttnConfig {
                channels: self.channels[stage],
                groups: self.groups[stage],
                ratio: self.ratios[stage],
                heads: self.heads[stage],
            },
            ffn_ratio: self.ffn_ratio,
            ffn_pre: self.ffn_pre,
            ffn_post: self.ffn_post,
        }
    }

    /// Spatial size of each pyramid level for an `h×w` input.
    pub fn pyramid_sizes(&self, h: usize, w: usize) -> Result<[(usize, usize); STAGES]> {
        let stem_stride = self.embed_spec().total_stride()?;
        if stem_stride != 4 {
            return Err(Error::config(format!(
                "stem `{}` reduces by {stem_stride}, the pyramid needs 4",
                self.embed_spec().describe()
            )));
        }
        if !h.is_multiple_of(16) || !w.is_multiple_of(16) || h == 0 || w == 0 {
            return Err(Error::dim(format!("input {h}×{w} must be a positive multiple of 16")));
        }
        Ok([(h / 4, w / 4), (h / 8, w / 8), (h / 16, w / 16)])
    }

    /// Checks every constraint, naming the first that fails.
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("channels", self.channels), ("depths", self.depths)] {
            if v.contains(&0) {
                return Err(Error::config(format!("{what} must be positive, got {v:?}")));
            }
        }
        if self.keypoints == 0 || self.head_widths.contains(&0) {
            return Err(Error::config("keypoints and head widths must be positive"));
        }
        self.embed_spec().validate()?;
        let sizes = self.pyramid_sizes(self.input[0], self.input[1]).map_err(|e| Error::config(e.to_string()))?;
        for (s, &(h, w)) in sizes.iter().enumerate() {
            self.block_config(s)
                .validate(Some((h, w)))
                .map_err(|e| Error::config(format!("stage {}: {e}", s + 1)))?;
        }
        Ok(())
    }
}

/// Feature maps of the three stages, at strides 4, 8 and 16.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures<T> {
    pub maps: [Tensor<T>; STAGES],
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Option<Downsample>,
    pub blocks: Vec<HevitBlock>,
}

/// Two `deconv(4, 2, 1)` + ReLU upsamplers and a 1×1 regressor to `K` heatmaps.
#[derive(Clone, Debug)]
pub struct Head {
    pub deconvs: Vec<ConvTranspose2d>,
    pub out: Conv2d,
}

/// Network structure without parameters; pair it with a [`ParamStore`] to run it.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub stem: Embed,
    pub stages: Vec<Stage>,
    pub head: Head,
    pub specs: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut plan = Plan::new();
        let stem = Embed::new(&mut plan, "stem", cfg.embed_spec())?;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let down = (s > 0).then(|| {
                Downsample::new(&mut plan, &format!("stage{}.down", s + 1), cfg.channels[s - 1], cfg.channels[s])
            });
            let blocks = (0..cfg.depths[s])
                .map(|b| HevitBlock::new(&mut plan, &format!("stage{}.block{b}", s + 1), cfg.block_config(s)))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
        }
        let mut cin = cfg.channels[STAGES - 1];
        let deconvs = cfg
            .head_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let d = ConvTranspose2d::new(&mut plan, &format!("head.deconv{i}"), cin, w, 4, 2, 1);
                cin = w;
                d
            })
            .collect();
        let out = Conv2d::new(&mut plan, "head.out", cin, cfg.keypoints, 1, 1, 0, 1);
        // heatmaps start near zero instead of at unit scale
        plan.set_init("head.out", WeightInit::TruncNormal { std: 1e-3 })?;
        Ok(Architecture { cfg: cfg.clone(), stem, stages, head: Head { deconvs, out }, specs: plan.specs })
    }

    pub fn forward_backbone<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<[Var; STAGES]> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim(format!("expected a 3×H×W image, got {s:?}")));
        }
        self.cfg.pyramid_sizes(s[1], s[2])?;
        let mut y = self.stem.forward(g, ps, x)?;
        let mut maps = [y; STAGES];
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(d) = &stage.down {
                y = d.forward(g, ps, y)?;
            }
            for b in &stage.blocks {
                y = b.forward(g, ps, y)?;
            }
            maps[i] = y;
        }
        Ok(maps)
    }

    /// Heatmaps from the last pyramid level.
    pub fn forward_head<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, feats: &[Var; STAGES]) -> Result<Var> {
        let mut y = feats[STAGES - 1];
        for d in &self.head.deconvs {
            y = d.forward(g, ps, y)?;
            y = g.relu(y)?;
        }
        self.head.out.forward(g, ps, y)
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let feats = self.forward_backbone(g, ps, x)?;
        self.forward_head(g, ps, &feats)
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(LayerSpec::param_count).sum()
    }
}

/// Anything that maps a `3×H×W` image to `K×h×w` heatmaps.
pub trait HeatmapModel<T> {
    fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T, F> HeatmapModel<T> for F
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self(image)
    }
}

/// A built network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

/// Builds the network; parameters are a pure function of `(cfg, seed)`.
pub fn build_model<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let arch = Architecture::new(cfg)?;
    let params = build_store(&arch.specs, seed)?;
    Ok(Model { arch, params })
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn forward_backbone(&self, image: &Tensor<T>) -> Result<PyramidFeatures<T>> {
        let g = Graph::new();
        let x = g.constant(image.clone());
        let maps = self.arch.forward_backbone(&g, &self.params, x)?;
        Ok(PyramidFeatures { maps: maps.map(|v| g.value(v).clone()) })
    }

    pub fn forward_head(&self, feats: &PyramidFeatures<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let vars = [0, 1, 2].map(|i| g.constant(feats.maps[i].clone()));
        let y = self.arch.forward_head(&g, &self.params, &vars)?;
        let out = g.value(y).clone();
        Ok(out)
    }
}

impl<T: Element> HeatmapModel<T> for Model<T> {
    fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let x = g.constant(image.clone());
        let y = self.arch.forward(&g, &self.params, x)?;
        let out = g.value(y).clone();
        Ok(out)
    }
}
