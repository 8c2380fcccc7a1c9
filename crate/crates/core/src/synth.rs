//! Seeded synthetic pose images: coloured joint blobs joined by faint limbs on a
//! smooth textured background, with exact integer keypoints.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heatmap::{FlipPairs, Keypoint, KeypointSet};
use crate::rng::SeedTree;
use crate::tensor::{Element, Tensor};

/// Joints keep at least this distance from every image border.
pub const MARGIN: f64 = 8.0;
/// Minimum distance between any two joints of one sample.
pub const MIN_SEPARATION: f64 = 4.0;
const MAX_ATTEMPTS: usize = 1000;
const BACKGROUND_MAX: f64 = 0.15;
const LIMB_INTENSITY: f64 = 0.3;

/// 16-joint layout: ankles, knees, hips, pelvis, thorax, neck, head top, wrists, elbows, shoulders.
const HUMAN_TEMPLATE: [(f64, f64); 16] = [
    (0.38, 1.0),
    (0.40, 0.80),
    (0.38, 0.60),
    (0.62, 0.60),
    (0.60, 0.80),
    (0.62, 1.0),
    (0.5, 0.52),
    (0.5, 0.32),
    (0.5, 0.20),
    (0.5, 0.0),
    (0.10, 0.50),
    (0.20, 0.38),
    (0.33, 0.30),
    (0.67, 0.30),
    (0.80, 0.38),
    (0.90, 0.50),
];

const HUMAN_LIMBS: [(usize, usize); 15] = [
    (0, 1),
    (1, 2),
    (2, 6),
    (3, 6),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (8, 9),
    (10, 11),
    (11, 12),
    (12, 7),
    (13, 7),
    (13, 14),
    (14, 15),
];

const HUMAN_FLIP_PAIRS: [(usize, usize); 6] = [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)];

const HUMAN_JOINT_NAMES: [&str; 16] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
    "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
];

/// Display name of joint `j`; generic counts get `joint{j}`.
pub fn joint_name(j: usize, k: usize) -> String {
    match HUMAN_JOINT_NAMES.get(j) {
        Some(n) if k == 16 => (*n).to_string(),
        _ => format!("joint{j}"),
    }
}

/// Unit-square joint positions for `k` joints; `k = 16` is the human layout,
/// other counts sit on a ring.
pub fn template(k: usize) -> Vec<(f64, f64)> {
    if k == 16 {
        return HUMAN_TEMPLATE.to_vec();
    }
    (0..k)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / k as f64;
            (0.5 + 0.5 * a.sin(), 0.5 - 0.5 * a.cos())
        })
        .collect()
}

pub fn limbs(k: usize) -> Vec<(usize, usize)> {
    if k == 16 {
        HUMAN_LIMBS.to_vec()
    } else {
        (0..k.saturating_sub(1)).map(|j| (j, j + 1)).collect()
    }
}

pub fn flip_pairs(k: usize) -> FlipPairs {
    if k == 16 {
        FlipPairs::new(HUMAN_FLIP_PAIRS.to_vec(), 16).expect("valid pairs")
    } else {
        FlipPairs::none()
    }
}

/// The two joints whose distance is the head length: neck and head top for 16 joints.
pub fn head_joints(k: usize) -> (usize, usize) {
    if k == 16 {
        (8, 9)
    } else {
        (0, 1)
    }
}

/// Joint colour: hue set by the joint index, channel mean fixed at 0.6.
pub fn joint_color(j: usize, k: usize) -> [f64; 3] {
    let t = 2.0 * PI * j as f64 / k as f64;
    [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0].map(|o| 0.6 + 0.35 * (t + o).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    /// Integer pixel coordinates.
    pub keypoints: KeypointSet,
    pub head_length: f64,
    pub seed: u64,
    pub index: usize,
}

impl SynthSample {
    pub fn image_as<T: Element>(&self) -> Tensor<T> {
        self.image.cast()
    }

    /// Keypoints in the coordinates of a map `stride` times smaller than the image.
    pub fn keypoints_at_stride(&self, stride: usize) -> KeypointSet {
        self.keypoints.scaled(1.0 / stride as f64)
    }
}

fn check_dims(h: usize, w: usize, k: usize) -> Result<()> {
    if !h.is_multiple_of(16) || !w.is_multiple_of(16) || h < 32 || w < 32 {
        return Err(Error::Usage(format!("synthetic images must be ≥32 and divisible by 16, got {h}×{w}")));
    }
    if k < 2 {
        return Err(Error::Usage(format!("need at least 2 joints, got {k}")));
    }
    Ok(())
}

fn place_joints(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Result<Vec<(f64, f64)>> {
    let tpl = template(k);
    let (bw, bh) = (w as f64 - 2.0 * MARGIN, h as f64 - 2.0 * MARGIN);
    for _ in 0..MAX_ATTEMPTS {
        let s = rng.random_range(0.8..=1.0);
        let ox = MARGIN + rng.random_range(0.0..=(1.0 - s)) * bw;
        let oy = MARGIN + rng.random_range(0.0..=(1.0 - s)) * bh;
        let jitter = 0.04;
        let pts: Vec<(f64, f64)> = tpl
            .iter()
            .map(|&(u, v)| {
                let u = (u + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0);
                let v = (v + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0);
                let x = (ox + u * s * bw).round().clamp(MARGIN, w as f64 - MARGIN);
                let y = (oy + v * s * bh).round().clamp(MARGIN, h as f64 - MARGIN);
                (x, y)
            })
            .collect();
        let separated = pts.iter().enumerate().all(|(i, a)| {
            pts[i + 1..]
                .iter()
                .all(|b| (a.0 - b.0).hypot(a.1 - b.1) >= MIN_SEPARATION)
        });
        if separated {
            return Ok(pts);
        }
    }
    Err(Error::Usage(format!("cannot place {k} separated joints in a {h}×{w} image")))
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn render(rng: &mut ChaCha8Rng, pts: &[(f64, f64)], h: usize, w: usize) -> Tensor<f64> {
    let k = pts.len();
    let plane = h * w;
    let mut img = vec![0.0; 3 * plane];
    // background: per channel, a sum of three slow plane waves mapped into [0, BACKGROUND_MAX]
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let a = rng.random_range(0.0..2.0 * PI);
                let f = rng.random_range(0.5..2.0) * 2.0 * PI / h.max(w) as f64;
                (f * a.cos(), f * a.sin(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
                img[c * plane + y * w + x] = BACKGROUND_MAX * (v / 3.0 + 1.0) / 2.0;
            }
        }
    }
    let radii: Vec<f64> = (0..k).map(|_| rng.random_range(3.0..=5.0)).collect();
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let i = y * w + x;
            if limbs(k).iter().any(|&(a, b)| segment_distance(p, pts[a], pts[b]) <= 0.75) {
                for c in 0..3 {
                    img[c * plane + i] = img[c * plane + i].max(LIMB_INTENSITY);
                }
            }
            // the strongest blob owns the pixel
            let mut best: Option<(usize, f64)> = None;
            for (j, &q) in pts.iter().enumerate() {
                let a = 1.0 - (p.0 - q.0).hypot(p.1 - q.1) / radii[j];
                if a > 0.0 && best.is_none_or(|(_, b)| a > b) {
                    best = Some((j, a));
                }
            }
            if let Some((j, a)) = best {
                let color = joint_color(j, k);
                for c in 0..3 {
                    img[c * plane + i] = (1.0 - a) * img[c * plane + i] + a * color[c];
                }
            }
        }
    }
    Tensor::new(&[3, h, w], img).expect("image shape")
}

/// Sample `index` of the stream seeded by `seed`; a pure function of its arguments.
pub fn sample(seed: u64, index: usize, h: usize, w: usize, k: usize) -> Result<SynthSample> {
    check_dims(h, w, k)?;
    let mut rng = SeedTree::new(seed).stream(&format!("synth/sample/{index}"));
    let pts = place_joints(&mut rng, h, w, k)?;
    let image = render(&mut rng, &pts, h, w);
    let (a, b) = head_joints(k);
    let head_length = (pts[a].0 - pts[b].0).hypot(pts[a].1 - pts[b].1);
    let keypoints = KeypointSet {
        points: pts.iter().map(|&(x, y)| Keypoint::new(x, y)).collect(),
        head_length: Some(head_length),
    };
    Ok(SynthSample { image, keypoints, head_length, seed, index })
}

/// Samples `0..count`.
pub fn generate(seed: u64, count: usize, h: usize, w: usize, k: usize) -> Result<Vec<SynthSample>> {
    check_dims(h, w, k)?;
    (0..count).into_par_iter().map(|i| sample(seed, i, h, w, k)).collect()
}

/// Binary PPM (`P6`) of a `3×H×W` image in `[0, 1]`.
pub fn to_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("PPM needs 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(image.data()[c * h * w + i]));
        }
    }
    Ok(out)
}

/// Binary PGM (`P5`) of the channel mean.
pub fn to_pgm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("PGM needs C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        let m = (0..c).map(|ch| image.data()[ch * h * w + i]).sum::<f64>() / c as f64;
        out.push(quantize(m));
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `sample,joint,x,y,visible` rows for every sample.
pub fn keypoints_csv(samples: &[SynthSample]) -> String {
    let mut s = String::from("sample,joint,x,y,visible\n");
    for smp in samples {
        for (j, p) in smp.keypoints.points.iter().enumerate() {
            let _ = writeln!(s, "{},{j},{},{},{}", smp.index, p.x, p.y, u8::from(p.visible));
        }
    }
    s
}

/// Writes `sample_{i}.ppm`, `sample_{i}.pgm` and `keypoints.csv` into `dir`.
pub fn export(samples: &[SynthSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        std::fs::File::create(dir.join(format!("sample_{}.ppm", s.index)))?.write_all(&to_ppm(&s.image)?)?;
        std::fs::File::create(dir.join(format!("sample_{}.pgm", s.index)))?.write_all(&to_pgm(&s.image)?)?;
    }
    std::fs::write(dir.join("keypoints.csv"), keypoints_csv(samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_have_constant_mean() {
        for j in 0..16 {
            let c = joint_color(j, 16);
            assert!(((c[0] + c[1] + c[2]) / 3.0 - 0.6).abs() < 1e-12);
            assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn keypoints_respect_margin_and_separation() {
        for s in generate(3, 8, 64, 64, 16).unwrap() {
            let pts = &s.keypoints.points;
            for (i, p) in pts.iter().enumerate() {
                assert!((8.0..=56.0).contains(&p.x) && (8.0..=56.0).contains(&p.y));
                assert_eq!(p.x, p.x.round());
                for q in &pts[i + 1..] {
                    assert!((p.x - q.x).hypot(p.y - q.y) >= MIN_SEPARATION);
                }
            }
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generic_joint_count() {
        let s = sample(0, 0, 32, 48, 5).unwrap();
        assert_eq!(s.keypoints.len(), 5);
        assert_eq!(s.image.shape(), &[3, 32, 48]);
        assert!(sample(0, 0, 30, 32, 5).is_err());
        assert!(sample(0, 0, 32, 32, 1).is_err());
    }

    #[test]
    fn image_formats() {
        let s = sample(1, 0, 32, 32, 4).unwrap();
        let ppm = to_ppm(&s.image).unwrap();
        assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(ppm.len(), 13 + 32 * 32 * 3);
        let pgm = to_pgm(&s.image).unwrap();
        assert_eq!(pgm.len(), 13 + 32 * 32);
        let csv = keypoints_csv(&[s]);
        assert_eq!(csv.lines().count(), 5);
    }
}
