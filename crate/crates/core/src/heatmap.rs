//! Gaussian heatmap targets, the masked MSE loss, sub-pixel decoding,
//! flip-test averaging and PCKh scoring.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::HeatmapModel;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// Column.
    pub x: f64,
    /// Row.
    pub y: f64,
    pub visible: bool,
    /// Peak heatmap value for decoded joints; 1 for ground truth.
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y, visible: true, score: 1.0 }
    }

    pub fn hidden() -> Self {
        Keypoint { x: 0.0, y: 0.0, visible: false, score: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
    /// Length of the head segment, in the same units as the coordinates.
    pub head_length: Option<f64>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        KeypointSet { points, head_length: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.visible).collect()
    }

    /// Every coordinate and the head length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        KeypointSet {
            points: self
                .points
                .iter()
                .map(|p| Keypoint { x: p.x * factor, y: p.y * factor, ..*p })
                .collect(),
            head_length: self.head_length.map(|l| l * factor),
        }
    }
}

/// Left/right joint pairs exchanged by a horizontal flip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlipPairs(Vec<(usize, usize)>);

impl FlipPairs {
    pub fn new(pairs: Vec<(usize, usize)>, keypoints: usize) -> Result<Self> {
        let mut seen = vec![false; keypoints];
        for &(a, b) in &pairs {
            for j in [a, b] {
                if j >= keypoints || std::mem::replace(&mut seen[j], true) {
                    return Err(Error::Usage(format!("flip pairs {pairs:?} invalid for {keypoints} joints")));
                }
            }
        }
        Ok(FlipPairs(pairs))
    }

    pub fn none() -> Self {
        FlipPairs(Vec::new())
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Joint index after flipping.
    pub fn permutation(&self, keypoints: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..keypoints).collect();
        for &(a, b) in &self.0 {
            perm.swap(a, b);
        }
        perm
    }
}

/// `K×h×w` map with `exp(−d²/2σ²)` around each visible joint, rendered on the full map.
pub fn gaussian_target<T: Element>(kps: &KeypointSet, shape: (usize, usize, usize), sigma: f64) -> Result<Tensor<T>> {
    render_gaussians(kps, shape, sigma, None)
}

/// As [`gaussian_target`], zero outside a `radius`-pixel square window around each joint.
pub fn gaussian_target_truncated<T: Element>(
    kps: &KeypointSet,
    shape: (usize, usize, usize),
    sigma: f64,
    radius: usize,
) -> Result<Tensor<T>> {
    render_gaussians(kps, shape, sigma, Some(radius))
}

fn render_gaussians<T: Element>(
    kps: &KeypointSet,
    (k, h, w): (usize, usize, usize),
    sigma: f64,
    radius: Option<usize>,
) -> Result<Tensor<T>> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Usage(format!("sigma must be positive, got {sigma}")));
    }
    if kps.len() != k {
        return Err(Error::dim(format!("{} keypoints for {k} heatmap channels", kps.len())));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![T::zero(); k * h * w];
    for (ch, p) in kps.points.iter().enumerate().filter(|(_, p)| p.visible) {
        let map = &mut data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                if let Some(r) = radius {
                    if dx.abs() > r as f64 || dy.abs() > r as f64 {
                        continue;
                    }
                }
                map[y * w + x] = T::from_f64_lossy((-(dx * dx + dy * dy) * inv).exp());
            }
        }
    }
    Tensor::new(&[k, h, w], data)
}

/// Mean squared error over the pixels of visible channels.
pub fn mse_loss<T: Element>(g: &Graph<T>, pred: Var, target: Var, visible: &[bool]) -> Result<Var> {
    let s = g.shape(pred);
    if s != g.shape(target) || s.len() != 3 || s[0] != visible.len() {
        return Err(Error::dim(format!(
            "mse_loss on {s:?} vs {:?} with {} visibility flags",
            g.shape(target),
            visible.len()
        )));
    }
    let plane = s[1] * s[2];
    let diff = g.sub(pred, target)?;
    let n_vis = visible.iter().filter(|&&v| v).count();
    let diff = if n_vis == visible.len() {
        diff
    } else {
        let mask = Tensor::from_fn(&s, |i| if visible[i / plane] { T::one() } else { T::zero() });
        g.mul(diff, g.constant(mask))?
    };
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / (n_vis.max(1) * plane) as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Argmax per channel (first in row-major order on ties), then a quarter-pixel step
/// towards the larger neighbour on each axis where both neighbours exist.
pub fn decode<T: Element>(hm: &Tensor<T>) -> Result<KeypointSet> {
    let s = hm.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("decode expects K×h×w, got {s:?}")));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let points = (0..k)
        .map(|ch| {
            let map = &hm.data()[ch * h * w..(ch + 1) * h * w];
            let mut best = 0;
            for (i, &v) in map.iter().enumerate() {
                if v > map[best] {
                    best = i;
                }
            }
            let (py, px) = (best / w, best % w);
            let at = |y: usize, x: usize| map[y * w + x].to_f64_lossy();
            let mut x = px as f64;
            let mut y = py as f64;
            if px > 0 && px + 1 < w {
                x += 0.25 * sign(at(py, px + 1) - at(py, px - 1));
            }
            if py > 0 && py + 1 < h {
                y += 0.25 * sign(at(py + 1, px) - at(py - 1, px));
            }
            Keypoint { x, y, visible: true, score: map[best].to_f64_lossy() }
        })
        .collect();
    Ok(KeypointSet::new(points))
}

/// Mirrors a `K×h×w` heatmap horizontally and exchanges paired channels.
pub fn unflip<T: Element>(hm: &Tensor<T>, pairs: &FlipPairs) -> Result<Tensor<T>> {
    let mirrored = hm.flip_horizontal()?;
    let (k, plane) = (hm.shape()[0], hm.shape()[1] * hm.shape()[2]);
    let perm = pairs.permutation(k);
    let mut data = vec![T::zero(); hm.numel()];
    for (ch, &src) in perm.iter().enumerate() {
        data[ch * plane..(ch + 1) * plane].copy_from_slice(&mirrored.data()[src * plane..(src + 1) * plane]);
    }
    Tensor::new(hm.shape(), data)
}

/// `½ (f(x) + unflip(f(flip x)))`.
pub fn flip_average<T: Element, M: HeatmapModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    pairs: &FlipPairs,
) -> Result<Tensor<T>> {
    let direct = model.predict(image)?;
    let flipped = unflip(&model.predict(&image.flip_horizontal()?)?, pairs)?;
    let half = T::from_f64_lossy(0.5);
    let data = direct.data().iter().zip(flipped.data()).map(|(&a, &b)| (a + b) * half).collect();
    Tensor::new(direct.shape(), data)
}

/// PCKh percentages: one per joint (None when no visible ground truth) and overall.
#[derive(Clone, Debug, PartialEq)]
pub struct PckhScores {
    pub per_joint: Vec<Option<f64>>,
    pub total: f64,
}

/// A joint is correct when its distance to the ground truth is at most `alpha × head length`.
pub fn pckh(preds: &[KeypointSet], gts: &[KeypointSet], alpha: f64) -> Result<PckhScores> {
    if preds.len() != gts.len() {
        return Err(Error::Usage(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let k = gts.first().map_or(0, KeypointSet::len);
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (i, (p, gt)) in preds.iter().zip(gts).enumerate() {
        let head = gt
            .head_length
            .ok_or_else(|| Error::Usage(format!("ground truth {i} has no head length")))?;
        if p.len() != k || gt.len() != k {
            return Err(Error::dim(format!("sample {i}: expected {k} joints")));
        }
        for (j, (pp, gp)) in p.points.iter().zip(&gt.points).enumerate() {
            if !gp.visible {
                continue;
            }
            counts[j] += 1;
            if (pp.x - gp.x).hypot(pp.y - gp.y) <= alpha * head {
                hits[j] += 1;
            }
        }
    }
    let per_joint = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| 100.0 * h as f64 / c as f64))
        .collect();
    let (h, c): (usize, usize) = (hits.iter().sum(), counts.iter().sum());
    let total = if c == 0 { 0.0 } else { 100.0 * h as f64 / c as f64 };
    Ok(PckhScores { per_joint, total })
}

/// `image_id,joint_id,x,y,score` rows.
pub fn predictions_csv(preds: &[(usize, KeypointSet)]) -> String {
    let mut s = String::from("image_id,joint_id,x,y,score\n");
    for (id, set) in preds {
        for (j, p) in set.points.iter().enumerate() {
            let _ = writeln!(s, "{id},{j},{},{},{}", p.x, p.y, p.score);
        }
    }
    s
}
