//! Analytic parameter and FLOP accounting per layer.
//!
//! Multiply-accumulates are counted from layer hyperparameters alone. Normalisation,
//! softmax, activations and residual adds go into a separate element-op column:
//! one op per element per pass, with LN = 5 passes, softmax = 4, everything else 1.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{CgsrMha, Ffn, HevitBlock};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig};
use crate::nn::{Conv2d, ConvTranspose2d, DwConv, LayerNorm, Linear};
use crate::ops::{conv_out_size, deconv_out_size};
use crate::patch_embed::StemOp;

const LN_PASSES: u64 = 5;
const SOFTMAX_PASSES: u64 = 4;

/// How many FLOPs one multiply-accumulate counts as.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    #[default]
    #[serde(rename = "mac1")]
    MacAsOne,
    #[serde(rename = "mac2")]
    MacAsTwo,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Convention::MacAsOne => 1,
            Convention::MacAsTwo => 2,
        }
    }

    pub fn both() -> [Convention; 2] {
        [Convention::MacAsOne, Convention::MacAsTwo]
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::MacAsOne => "mac1",
            Convention::MacAsTwo => "mac2",
        })
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac1" | "1" => Ok(Convention::MacAsOne),
            "mac2" | "2" => Ok(Convention::MacAsTwo),
            _ => Err(Error::Usage(format!("convention `{s}` must be mac1 or mac2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
    pub elem_ops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub name: String,
    pub input: (usize, usize),
    pub convention: Convention,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_elem_ops(&self) -> u64 {
        self.rows.iter().map(|r| r.elem_ops).sum()
    }

    pub fn flops(&self, convention: Convention) -> u64 {
        self.total_macs() * convention.factor()
    }

    pub fn total_flops(&self) -> u64 {
        self.flops(self.convention)
    }

    /// `layer,params,macs,flops,convention`, one line per layer and a final `total` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs,flops,convention\n");
        let f = self.convention.factor();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.params, r.macs, r.macs * f, self.convention);
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{}",
            self.total_params(),
            self.total_macs(),
            self.total_flops(),
            self.convention
        );
        s
    }

    /// Aligned per-layer table followed by totals.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$} {:>12} {:>14} {:>14} {:>12}\n",
            "layer", "params", "macs", "flops", "elem_ops"
        );
        let f = self.convention.factor();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$} {:>12} {:>14} {:>14} {:>12}",
                r.layer,
                r.params,
                r.macs,
                r.macs * f,
                r.elem_ops
            );
        }
        let _ = writeln!(
            s,
            "{:<width$} {:>12} {:>14} {:>14} {:>12}",
            "total",
            self.total_params(),
            self.total_macs(),
            self.total_flops(),
            self.total_elem_ops()
        );
        let _ = writeln!(
            s,
            "{}: {:.2}M params, {:.2}G FLOPs ({}) at {}x{}",
            self.name,
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9,
            self.convention,
            self.input.0,
            self.input.1
        );
        s
    }
}

struct Auditor {
    rows: Vec<AuditRow>,
}

impl Auditor {
    fn push(&mut self, layer: &str, params: u64, macs: u64, elem_ops: u64) {
        self.rows.push(AuditRow { layer: layer.to_string(), params, macs, elem_ops });
    }

    fn conv(&mut self, c: &Conv2d, (h, w): (usize, usize), activation: bool) -> Result<(usize, usize)> {
        let ho = conv_out_size(h, c.kernel, c.stride, c.padding)?;
        let wo = conv_out_size(w, c.kernel, c.stride, c.padding)?;
        let taps = (c.in_ch / c.groups * c.kernel * c.kernel) as u64;
        let outputs = (c.out_ch * ho * wo) as u64;
        let params = c.out_ch as u64 * taps + c.out_ch as u64;
        self.push(&c.name, params, outputs * taps, if activation { outputs } else { 0 });
        Ok((ho, wo))
    }

    fn deconv(&mut self, d: &ConvTranspose2d, (h, w): (usize, usize), activation: bool) -> Result<(usize, usize)> {
        let ho = deconv_out_size(h, d.kernel, d.stride, d.padding)?;
        let wo = deconv_out_size(w, d.kernel, d.stride, d.padding)?;
        let kk = (d.kernel * d.kernel) as u64;
        let params = (d.in_ch * d.out_ch) as u64 * kk + d.out_ch as u64;
        // every input pixel scatters a k×k patch into every output channel
        let macs = (d.in_ch * h * w * d.out_ch) as u64 * kk;
        let elem = if activation { (d.out_ch * ho * wo) as u64 } else { 0 };
        self.push(&d.name, params, macs, elem);
        Ok((ho, wo))
    }

    fn norm(&mut self, n: &LayerNorm, tokens: usize) {
        self.push(&n.name, 2 * n.dim as u64, 0, LN_PASSES * (n.dim * tokens) as u64);
    }

    fn linear(&mut self, l: &Linear, tokens: usize, activation: bool) {
        let params = (l.in_features * l.out_features + l.out_features) as u64;
        let macs = (l.in_features * l.out_features * tokens) as u64;
        let elem = if activation { (l.out_features * tokens) as u64 } else { 0 };
        self.push(&l.name, params, macs, elem);
    }

    fn dwconv(&mut self, d: &DwConv, (h, w): (usize, usize)) {
        let kk = (d.kernel * d.kernel) as u64;
        let n = (d.channels * h * w) as u64;
        // residual add counted as one element pass
        self.push(&d.name, d.channels as u64 * (kk + 1), n * kk, n);
    }

    fn ffn(&mut self, f: &Ffn, tokens: usize) {
        self.norm(&f.norm, tokens);
        self.linear(&f.fc1, tokens, true);
        self.linear(&f.fc2, tokens, false);
    }

    fn attention(&mut self, a: &CgsrMha, name: &str, (h, w): (usize, usize)) -> Result<()> {
        let n = h * w;
        for (i, ga) in a.groups.iter().enumerate() {
            let c = ga.q.in_features;
            self.linear(&ga.q, n, false);
            let (hr, wr) = self.conv(&ga.sr.conv, (h, w), false)?;
            let m = hr * wr;
            self.norm(&ga.sr.norm, m);
            self.linear(&ga.k, m, false);
            self.linear(&ga.v, m, false);
            // Q·Kᵀ and A·V over all heads; scaling plus softmax on the logits
            let logits = (ga.heads * n * m) as u64;
            self.push(
                &format!("{name}.group{i}.sdpa"),
                0,
                2 * (n * m * c) as u64,
                (1 + SOFTMAX_PASSES) * logits,
            );
            self.norm(&ga.norm, n);
        }
        self.linear(&a.proj, n, false);
        Ok(())
    }

    fn block(&mut self, b: &HevitBlock, name: &str, (h, w): (usize, usize)) -> Result<()> {
        let n = h * w;
        self.dwconv(&b.pos, (h, w));
        for f in &b.ffn_pre {
            self.ffn(f, n);
        }
        self.norm(&b.attn_norm, n);
        self.attention(&b.attn, &format!("{name}.attn"), (h, w))?;
        for f in &b.ffn_post {
            self.ffn(f, n);
        }
        Ok(())
    }
}

/// Per-layer costs of `arch` on an `h×w` input.
pub fn audit(arch: &Architecture, name: &str, h: usize, w: usize, convention: Convention) -> Result<AuditReport> {
    arch.cfg.pyramid_sizes(h, w)?;
    let mut a = Auditor { rows: Vec::new() };
    let mut hw = (h, w);
    let last = arch.stem.ops.len() - 1;
    for (i, op) in arch.stem.ops.iter().enumerate() {
        hw = match op {
            StemOp::Conv(c) => a.conv(c, hw, i < last)?,
            StemOp::Deconv(d) => a.deconv(d, hw, i < last)?,
        };
    }
    a.norm(&arch.stem.norm, hw.0 * hw.1);
    for (s, stage) in arch.stages.iter().enumerate() {
        if let Some(d) = &stage.down {
            hw = a.conv(&d.conv, hw, false)?;
            a.norm(&d.norm, hw.0 * hw.1);
        }
        for (b, blk) in stage.blocks.iter().enumerate() {
            a.block(blk, &format!("stage{}.block{b}", s + 1), hw)?;
        }
    }
    for d in &arch.head.deconvs {
        hw = a.deconv(d, hw, true)?;
    }
    a.conv(&arch.head.out, hw, false)?;
    Ok(AuditReport { name: name.to_string(), input: (h, w), convention, rows: a.rows })
}

/// Audits a configuration at its configured input size.
pub fn audit_config(cfg: &ModelConfig, name: &str, convention: Convention) -> Result<AuditReport> {
    let arch = Architecture::new(cfg)?;
    audit(&arch, name, cfg.input[0], cfg.input[1], convention)
}

pub fn count_params(arch: &Architecture) -> u64 {
    let (h, w) = (arch.cfg.input[0], arch.cfg.input[1]);
    audit(arch, "", h, w, Convention::MacAsOne).map(|r| r.total_params()).unwrap_or(0)
}

pub fn count_flops(arch: &Architecture, h: usize, w: usize, convention: Convention) -> Result<u64> {
    Ok(audit(arch, "", h, w, convention)?.total_flops())
}

/// One report per preset at `h×w`.
pub fn family_table(presets: &[&str], h: usize, w: usize, convention: Convention) -> Result<Vec<AuditReport>> {
    presets
        .iter()
        .map(|p| {
            let mut cfg = ModelConfig::preset(p)?;
            cfg.input = [h, w];
            audit_config(&cfg, &format!("hevit-{p}"), convention)
        })
        .collect()
}

/// CSV of a family: `model,params,macs,flops_mac1,flops_mac2,elem_ops`.
pub fn family_csv(reports: &[AuditReport]) -> String {
    let mut s = String::from("model,params,macs,flops_mac1,flops_mac2,elem_ops\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.name,
            r.total_params(),
            r.total_macs(),
            r.flops(Convention::MacAsOne),
            r.flops(Convention::MacAsTwo),
            r.total_elem_ops()
        );
    }
    s
}

/// Aligned summary table with one row per model.
pub fn family_text(reports: &[AuditReport]) -> String {
    let mut s = format!(
        "{:<14} {:>10} {:>12} {:>12} {:>12}\n",
        "model", "params", "GFLOPs(1)", "GFLOPs(2)", "elem_ops"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<14} {:>9.2}M {:>11.2}G {:>11.2}G {:>11.2}G",
            r.name,
            r.total_params() as f64 / 1e6,
            r.flops(Convention::MacAsOne) as f64 / 1e9,
            r.flops(Convention::MacAsTwo) as f64 / 1e9,
            r.total_elem_ops() as f64 / 1e9
        );
    }
    s
}

/// The convention whose total lies closest to `target` FLOPs.
pub fn closest_convention(report: &AuditReport, target: f64) -> (Convention, f64) {
    Convention::both()
        .into_iter()
        .map(|c| (c, report.flops(c) as f64))
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .expect("two conventions")
}
