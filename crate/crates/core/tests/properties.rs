mod common;

use std::collections::BTreeMap;

use hevitpose::attention::{multi_head_attention, AttnConfig, CgsrMha};
use hevitpose::audit::{audit, audit_config, Convention};
use hevitpose::config::{parse_config, ConfigFile};
use hevitpose::gradcheck::randomize;
use hevitpose::heatmap::{decode, gaussian_target, Keypoint, KeypointSet};
use hevitpose::nn::{build_store, init_params, LayerKind, LayerSpec, Plan, WeightInit};
use hevitpose::patch_embed::{visit_counts, EmbedSpec, StemLayer};
use hevitpose::synth::{generate, sample, MARGIN};
use hevitpose::{build_model, Architecture, Graph, ModelConfig, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    // splitmix-style hash keeps test inputs independent of the crate's generator
    Tensor::from_fn(shape, |i| {
        let mut z = (i as u64).wrapping_add(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn value(g: &Graph<f64>, v: hevitpose::Var) -> Tensor<f64> {
    g.value(v).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn depthwise_conv_is_per_channel(c in 1usize..5, h in 3usize..9, w in 3usize..9, half in 0usize..3, seed in any::<u64>()) {
        let k = 2 * half + 1;
        let x = tensor(&[c, h, w], seed);
        let wt = tensor(&[c, 1, k, k], seed ^ 1);
        let b = tensor(&[c], seed ^ 2);
        let g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let dw = value(&g, g.conv2d(xv, wv, Some(bv), 1, half, c).unwrap());
        let plane = h * w;
        for ch in 0..c {
            let xs = g.constant(Tensor::new(&[1, h, w], x.data()[ch * plane..(ch + 1) * plane].to_vec()).unwrap());
            let ws = g.constant(Tensor::new(&[1, 1, k, k], wt.data()[ch * k * k..(ch + 1) * k * k].to_vec()).unwrap());
            let bs = g.constant(Tensor::new(&[1], vec![b.data()[ch]]).unwrap());
            let single = value(&g, g.conv2d(xs, ws, Some(bs), 1, half, 1).unwrap());
            prop_assert_eq!(single.data(), &dw.data()[ch * plane..(ch + 1) * plane]);
        }
    }

    #[test]
    fn transposed_conv_is_the_adjoint(
        ci in 1usize..4, co in 1usize..4, k in 1usize..5, s in 1usize..4,
        ho in 1usize..6, wo in 1usize..6, pad_pick in 0usize..3, seed in any::<u64>()
    ) {
        let p = pad_pick % k;
        let (h, w) = ((ho - 1) * s + k, (wo - 1) * s + k);
        prop_assume!(h > 2 * p && w > 2 * p);
        let (h, w) = (h - 2 * p, w - 2 * p);
        let x = tensor(&[ci, h, w], seed);
        let y = tensor(&[co, ho, wo], seed ^ 7);
        let wt = tensor(&[co, ci, k, k], seed ^ 9);
        let g = Graph::new();
        let conv = value(&g, g.conv2d(g.constant(x.clone()), g.constant(wt.clone()), None, s, p, 1).unwrap());
        prop_assert_eq!(conv.shape(), &[co, ho, wo][..]);
        let back = value(&g, g.conv2d_transposed(g.constant(y.clone()), g.constant(wt), None, s, p).unwrap());
        prop_assert_eq!(back.shape(), &[ci, h, w][..]);
        let lhs = dot(conv.data(), y.data());
        let rhs = dot(x.data(), back.data());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn reshape_and_permute_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let x = tensor(&[a, b, c], seed);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let flat = g.reshape(xv, &[a * b * c]).unwrap();
        let back = g.reshape(flat, &[a, b, c]).unwrap();
        prop_assert_eq!(&value(&g, back), &x);
        let p = g.permute(xv, &[2, 0, 1]).unwrap();
        let permuted = value(&g, p);
        prop_assert_eq!(permuted.shape(), &[c, a, b][..]);
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(&value(&g, q), &x);
    }

    #[test]
    fn softmax_is_a_distribution(rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..80.0, axis in 0usize..2, seed in any::<u64>()) {
        let x = tensor(&[rows, cols], seed);
        let scaled = Tensor::from_fn(&[rows, cols], |i| x.data()[i] * spread);
        let g = Graph::new();
        let s = value(&g, g.softmax(g.constant(scaled), axis).unwrap());
        prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        for o in 0..outer {
            let total: f64 = (0..inner)
                .map(|i| if axis == 1 { s.data()[o * cols + i] } else { s.data()[i * cols + o] })
                .sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        }
    }

    #[test]
    fn visit_counts_match_brute_force(k in 1usize..16, s_pick in 1usize..16, n in 1usize..33, padded in any::<bool>()) {
        let s = s_pick.min(k);
        prop_assume!(n + if padded { 2 * (k / 2) } else { 0 } >= k);
        let p = if padded { k / 2 } else { 0 };
        let counts = visit_counts(n, n, k, s, p).unwrap();
        let mut brute = vec![0u32; n * n];
        let windows = (n + 2 * p - k) / s + 1;
        for wy in 0..windows {
            for wx in 0..windows {
                for dy in 0..k {
                    for dx in 0..k {
                        let (y, x) = ((wy * s + dy) as isize - p as isize, (wx * s + dx) as isize - p as isize);
                        if (0..n as isize).contains(&y) && (0..n as isize).contains(&x) {
                            brute[y as usize * n + x as usize] += 1;
                        }
                    }
                }
            }
        }
        prop_assert_eq!(counts, brute);
    }

    #[test]
    fn tiled_windows_overlap_on_lines_of_width_k_minus_s(k in 1usize..16, s_pick in 1usize..16, m in 1usize..4) {
        let s = s_pick.min(k);
        prop_assume!(2 * s >= k);
        let n = k + m * s;
        // the first row lies in one window vertically, so it carries the 1-D coverage
        let counts = visit_counts(n, n, k, s, 0).unwrap()[..n].to_vec();
        prop_assert!(counts.iter().all(|&c| c >= 1));
        // overlap strips sit at [(j+1)s, js + k) for consecutive windows j, j+1
        for (x, &c) in counts.iter().enumerate() {
            let in_strip = (0..m).any(|j| x >= (j + 1) * s && x < j * s + k);
            prop_assert_eq!(c > 1, in_strip, "x={} count={}", x, c);
        }
        prop_assert_eq!(counts.iter().filter(|&&c| c > 1).count(), m * (k - s));
    }

    #[test]
    fn stem_output_matches_conv_formula(k in 1usize..16, s in 1usize..9, n in 16usize..80) {
        prop_assume!(k >= s);
        let layer = StemLayer::conv(k, s);
        let p = layer.padding();
        prop_assume!(n + 2 * p >= k);
        prop_assert_eq!(layer.out_size(n).unwrap(), (n + 2 * p - k) / s + 1);
        let up = StemLayer::deconv(k, s);
        let pd = up.padding();
        prop_assert_eq!(up.out_size(n).unwrap(), (n - 1) * s + k - 2 * pd);
    }

    #[test]
    fn layer_param_count_matches_registered_scalars(
        kind in 0usize..5, a in 1usize..9, b in 1usize..9, k in 1usize..6, groups in 1usize..4, bias in any::<bool>()
    ) {
        let kind = match kind {
            0 => LayerKind::Conv { in_ch: a * groups, out_ch: b * groups, kernel: k, stride: 1, padding: 0, groups, bias },
            1 => LayerKind::Deconv { in_ch: a, out_ch: b, kernel: k, stride: 2, padding: 0, bias },
            2 => LayerKind::DwConv { channels: a, kernel: k },
            3 => LayerKind::Linear { in_features: a, out_features: b, bias },
            _ => LayerKind::LayerNorm { dim: a },
        };
        let spec = LayerSpec::new("layer", kind);
        let params = init_params::<f64>(&spec, 0);
        let registered: usize = params.iter().map(|(_, t)| t.numel()).sum();
        prop_assert_eq!(spec.param_count(), registered);
        prop_assert_eq!(params.len(), spec.param_shapes().len());
    }

    #[test]
    fn init_is_a_pure_function_of_spec_and_seed(a in 1usize..9, b in 1usize..9, seed in any::<u64>()) {
        let spec = LayerSpec::new("fc", LayerKind::Linear { in_features: a, out_features: b, bias: true })
            .with_init(WeightInit::FanInNormal);
        let first = init_params::<f64>(&spec, seed);
        prop_assert_eq!(&first, &init_params::<f64>(&spec, seed));
        let other = init_params::<f64>(&spec, seed.wrapping_add(1));
        prop_assert_ne!(&first[0].1, &other[0].1);
    }

    #[test]
    fn decode_inverts_gaussian_targets(k in 1usize..6, h in 3usize..27, w in 3usize..27, seed in any::<u64>()) {
        // beyond ~37 px from the peak the unit-sigma Gaussian underflows to 0 in f64
        let pts: Vec<Keypoint> = (0..k)
            .map(|j| {
                let r = tensor(&[2], seed ^ j as u64);
                let x = 1 + ((r.data()[0] + 1.0) / 2.0 * (w - 2) as f64) as usize % (w - 2);
                let y = 1 + ((r.data()[1] + 1.0) / 2.0 * (h - 2) as f64) as usize % (h - 2);
                Keypoint::new(x as f64, y as f64)
            })
            .collect();
        let kps = KeypointSet::new(pts);
        let hm: Tensor<f64> = gaussian_target(&kps, (k, h, w), 1.0).unwrap();
        let plane = h * w;
        for j in 0..k {
            let ch = &hm.data()[j * plane..(j + 1) * plane];
            prop_assert_eq!(ch.iter().cloned().fold(f64::MIN, f64::max), 1.0);
            prop_assert!(ch.iter().all(|&v| v > 0.0));
        }
        let back = decode(&hm).unwrap();
        for (a, b) in back.points.iter().zip(&kps.points) {
            prop_assert_eq!((a.x, a.y), (b.x, b.y));
        }
    }
}

fn attention(groups: usize, channels: usize, ratio: usize, heads: usize, seed: u64) -> (CgsrMha, hevitpose::ParamStore<f64>) {
    let mut plan = Plan::new();
    let cfg = AttnConfig { channels, groups, ratio, heads };
    let attn = CgsrMha::new(&mut plan, "attn", cfg, WeightInit::TruncNormal { std: 0.02 }).unwrap();
    let mut ps = build_store::<f64>(&plan.specs, seed).unwrap();
    randomize(&mut ps, seed, 0.4);
    (attn, ps)
}

fn run(attn: &CgsrMha, ps: &hevitpose::ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    let y = attn.forward(&g, ps, g.constant(x.clone())).unwrap();
    value(&g, y)
}

/// Reorders the input rows of a `c_in × c_out` weight.
fn permute_rows(t: &mut Tensor<f64>, perm: &[usize]) {
    let cols = t.shape()[1];
    let src = t.data().to_vec();
    for (dst, &from) in perm.iter().enumerate() {
        t.data_mut()[dst * cols..(dst + 1) * cols].copy_from_slice(&src[from * cols..(from + 1) * cols]);
    }
}

/// Reorders the input-channel axis of a `c_out × c_in × k × k` conv weight.
fn permute_conv_inputs(t: &mut Tensor<f64>, perm: &[usize]) {
    let s = t.shape().to_vec();
    let (ci, kk) = (s[1], s[2] * s[3]);
    let src = t.data().to_vec();
    for o in 0..s[0] {
        for (dst, &from) in perm.iter().enumerate() {
            let d = (o * ci + dst) * kk;
            let f = (o * ci + from) * kk;
            t.data_mut()[d..d + kk].copy_from_slice(&src[f..f + kk]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_first_group_channels_with_its_weights_is_invisible(
        groups in 1usize..4, ratio in 1usize..3, seed in any::<u64>(), shift in 1usize..4
    ) {
        let cg = 4;
        let c = groups * cg;
        let (attn, ps) = attention(groups, c, ratio, 2, seed);
        let x = tensor(&[c, 4, 4], seed);
        let base = run(&attn, &ps, &x);

        // new channel i reads old channel perm[i]
        let perm: Vec<usize> = (0..cg).map(|i| (i + shift) % cg).collect();
        let plane = 16;
        let mut xp = x.clone();
        for (dst, &from) in perm.iter().enumerate() {
            xp.data_mut()[dst * plane..(dst + 1) * plane].copy_from_slice(&x.data()[from * plane..(from + 1) * plane]);
        }
        let mut pp = ps.clone();
        permute_rows(pp.get_mut("attn.group0.q.weight").unwrap(), &perm);
        permute_conv_inputs(pp.get_mut("attn.group0.sr.conv.weight").unwrap(), &perm);
        let moved = run(&attn, &pp, &xp);
        prop_assert!(common::max_abs_diff(base.data(), moved.data()) <= 1e-12);
    }

    #[test]
    fn later_groups_never_reach_earlier_ones(groups in 2usize..5, seed in any::<u64>(), cut_pick in 1usize..4) {
        let cut = 1 + cut_pick % (groups - 1);
        let c = groups * 4;
        let (attn, ps) = attention(groups, c, 2, 2, seed);
        let x = tensor(&[c, 4, 4], seed);
        let mut y = x.clone();
        for v in &mut y.data_mut()[cut * 4 * 16..] {
            *v = 0.0;
        }
        let outs = |input: &Tensor<f64>| {
            let g = Graph::new();
            let o = attn.forward_groups(&g, &ps, g.constant(input.clone())).unwrap();
            o.iter().map(|&v| g.value(v).data().to_vec()).collect::<Vec<_>>()
        };
        let (a, b) = (outs(&x), outs(&y));
        prop_assert_eq!(&a[..cut], &b[..cut]);
        prop_assert_ne!(&a[cut], &b[cut]);
    }

    #[test]
    fn attention_rows_are_convex_combinations(n in 1usize..6, m in 1usize..7, seed in any::<u64>()) {
        // with identity values the output rows are the attention weights themselves
        let g = Graph::new();
        let q = g.constant(tensor(&[n, m], seed));
        let k = g.constant(tensor(&[m, m], seed ^ 3));
        let v = g.constant(Tensor::from_fn(&[m, m], |i| if i / m == i % m { 1.0 } else { 0.0 }));
        let out = value(&g, multi_head_attention(&g, q, k, v, 1).unwrap());
        for row in out.data().chunks(m) {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        // general values: every output coordinate stays within the value range
        let vals = tensor(&[m, 4], seed ^ 5);
        let (q, k) = (g.constant(tensor(&[n, 4], seed)), g.constant(tensor(&[m, 4], seed ^ 3)));
        let out = value(&g, multi_head_attention(&g, q, k, g.constant(vals.clone()), 2).unwrap());
        for row in out.data().chunks(4) {
            for (t, &o) in row.iter().enumerate() {
                let col = (0..m).map(|j| vals.data()[j * 4 + t]);
                let (lo, hi) = col.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}

fn stage_attention_cost(ratio: usize) -> (u64, u64) {
    let mut cfg = ModelConfig::preset("tiny").unwrap();
    cfg.ratios[0] = ratio;
    let report = audit_config(&cfg, "tiny", Convention::MacAsOne).unwrap();
    let rows = report.rows.iter().filter(|r| r.layer.starts_with("stage1.block0.attn"));
    let total = rows.clone().map(|r| r.macs).sum();
    let sdpa = rows.filter(|r| r.layer.ends_with(".sdpa")).map(|r| r.macs).sum();
    (total, sdpa)
}

#[test]
fn attention_cost_falls_with_reduction_ratio() {
    let costs: Vec<(u64, u64)> = [1, 2, 4, 8].into_iter().map(stage_attention_cost).collect();
    for pair in costs.windows(2) {
        assert!(pair[1].0 <= pair[0].0, "{costs:?}");
        // K/V token count shrinks by r² when r doubles
        assert_eq!(pair[0].1, 4 * pair[1].1, "{costs:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn halving_the_input_quarters_each_row(preset in prop::sample::select(vec!["T", "S", "B", "tiny"]), side in 2usize..5) {
        let cfg = ModelConfig::preset(preset).unwrap();
        let arch = Architecture::new(&cfg).unwrap();
        let big = audit(&arch, preset, 64 * side, 64 * side, Convention::MacAsOne).unwrap();
        let small = audit(&arch, preset, 32 * side, 32 * side, Convention::MacAsOne).unwrap();
        prop_assert_eq!(big.total_params(), small.total_params());
        for (b, s) in big.rows.iter().zip(&small.rows) {
            prop_assert_eq!(&b.layer, &s.layer);
            // attention logits pair every query with every key, so both counts quarter
            let factor = if b.layer.ends_with(".sdpa") { 16 } else { 4 };
            prop_assert_eq!(b.macs, factor * s.macs, "{}", b.layer);
        }
    }

    #[test]
    fn registered_parameters_match_the_audit(
        c0 in 1usize..3, c1 in 1usize..3, c2 in 1usize..3, depth in 1usize..3, ffn in 1usize..3, hw in 1usize..3, seed in any::<u64>()
    ) {
        let cfg = ModelConfig {
            channels: [8 * c0, 8 * c1, 8 * c2],
            depths: [depth, 1, depth],
            groups: [2, 2, 2],
            ratios: [2, 2, 1],
            heads: [1, 2, 2],
            ffn_ratio: ffn,
            head_widths: [4 * hw, 4 * hw],
            keypoints: 3,
            input: [32, 32],
            ..ModelConfig::preset("tiny").unwrap()
        };
        let model = build_model::<f32>(&cfg, seed).unwrap();
        let counted = audit_config(&cfg, "m", Convention::MacAsOne).unwrap().total_params();
        prop_assert_eq!(model.params.scalar_count() as u64, counted);
        prop_assert_eq!(model.arch.param_count() as u64, counted);
        let again = build_model::<f32>(&cfg, seed).unwrap();
        prop_assert_eq!(&model.params, &again.params);
    }

    #[test]
    fn forward_shapes_follow_the_strides(preset in prop::sample::select(vec!["tiny"]), hs in 2usize..6, ws in 2usize..6) {
        let mut cfg = ModelConfig::preset(preset).unwrap();
        cfg.input = [16 * hs, 16 * ws];
        let model = build_model::<f32>(&cfg, 0).unwrap();
        let image = Tensor::<f32>::zeros(&[3, 16 * hs, 16 * ws]);
        let feats = model.forward_backbone(&image).unwrap();
        for (s, m) in feats.maps.iter().enumerate() {
            let stride = 4 << s;
            prop_assert_eq!(m.shape(), &[cfg.channels[s], 16 * hs / stride, 16 * ws / stride][..]);
        }
        let heat = model.forward_head(&feats).unwrap();
        prop_assert_eq!(heat.shape(), &[cfg.keypoints, 4 * hs, 4 * ws][..]);
    }

    #[test]
    fn synthetic_keypoints_respect_the_margin(seed in any::<u64>(), index in 0usize..1000, hs in 2usize..6, k in 2usize..17) {
        let (h, w) = (16 * hs, 64);
        let Ok(s) = sample(seed, index, h, w, k) else { return Ok(()) };
        for p in &s.keypoints.points {
            prop_assert!(p.x >= MARGIN && p.x <= w as f64 - MARGIN && p.y >= MARGIN && p.y <= h as f64 - MARGIN);
        }
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&sample(seed, index, h, w, k).unwrap().image, &s.image);
    }

    #[test]
    fn config_expansion_is_idempotent(
        preset in prop::sample::select(vec!["T", "S", "B", "tiny"]),
        ffn in proptest::option::of(1usize..4),
        keypoints in proptest::option::of(2usize..20),
        steps in 0usize..500
    ) {
        let mut model = serde_json::Map::new();
        model.insert("preset".into(), preset.into());
        if let Some(f) = ffn {
            model.insert("ffn_ratio".into(), f.into());
        }
        if let Some(k) = keypoints {
            model.insert("keypoints".into(), k.into());
        }
        let text = serde_json::json!({"model": model, "train": {"steps": steps}}).to_string();
        let parsed: ConfigFile = parse_config(&text).unwrap();
        let once = parsed.expanded().unwrap();
        let twice = parse_config(&once.to_json()).unwrap().expanded().unwrap();
        prop_assert_eq!(once.to_json(), twice.to_json());
        prop_assert_eq!(parsed.model_config().unwrap(), twice.model_config().unwrap());
    }
}

#[test]
fn embed_spec_traces_every_stem_of_the_overlap_table() {
    for stem in ["conv7s4", "conv3s2,conv3s2", "conv15s8,deconv4s2", "conv7s2,conv7s2", "conv4s4"] {
        let spec = EmbedSpec { layers: hevitpose::patch_embed::parse_stem(stem).unwrap(), in_channels: 3, out_channels: 8 };
        let sizes = spec.trace_sizes(256, 256).unwrap();
        assert_eq!(*sizes.last().unwrap(), (64, 64), "{stem}");
    }
}

#[test]
fn generation_is_reproducible_and_thread_independent() {
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = serial.install(|| generate(1, 16, 64, 64, 16).unwrap());
    let b = generate(1, 16, 64, 64, 16).unwrap();
    let bytes = |v: &[hevitpose::synth::SynthSample]| {
        v.iter().map(|s| hevitpose::synth::to_ppm(&s.image).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(bytes(&a), bytes(&b));
    let stats: BTreeMap<usize, f64> = a.iter().map(|s| (s.index, s.head_length)).collect();
    assert!(stats.values().all(|&l| l > 0.0));
}
