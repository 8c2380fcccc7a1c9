//! Central finite-difference checks of every differentiable operation and of a small
//! end-to-end network, at 64-bit precision.
//!
//! Each check reduces the output `y` to the scalar `Σ y ⊙ R` for a fixed random `R`
//! and compares, per input tensor, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{AttnConfig, BlockConfig, CgsrMha, GroupAttention, HevitBlock, SpatialReduce};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heatmap::{gaussian_target, mse_loss, Keypoint, KeypointSet};
use crate::model::{build_model, Architecture, ModelConfig};
use crate::nn::{build_store, ParamStore, Plan, WeightInit};
use crate::patch_embed::StemLayer;
use crate::rng::SeedTree;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
const NORM_FLOOR: f64 = 1e-7;
/// A tensor's error is measured against at least this fraction of the whole
/// check's gradient norm, so a gradient that is exactly zero (a key bias under
/// softmax shift invariance) is not scored on finite-difference noise alone.
const GLOBAL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst per-tensor relative error.
    pub max_rel_error: f64,
    /// Tensor with the worst error.
    pub worst: String,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_floored(analytic, numeric, NORM_FLOOR)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_error_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

/// Worst per-tensor error over `(name, analytic, numeric)` triples.
fn summarize(name: &str, entries: &[(String, Vec<f64>, Vec<f64>)], tolerance: f64) -> CheckResult {
    let total = entries.iter().map(|(_, _, n)| n.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    let floor = (GLOBAL_FLOOR * total).max(NORM_FLOOR);
    let mut worst = (0.0f64, String::new());
    for (tname, a, n) in entries {
        let e = relative_error_floored(a, n, floor);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, tname.clone());
        }
    }
    CheckResult { name: name.into(), max_rel_error: worst.0, worst: worst.1, tolerance }
}

/// A function of some input tensors, recorded on a fresh graph per call.
pub type Forward<'a> = dyn Fn(&Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn projected(g: &Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    g.sum(p)
}

/// Checks the gradient of `f` with respect to every named input.
pub fn check_inputs(
    name: &str,
    inputs: &[(&str, Tensor<f64>)],
    f: &Forward<'_>,
    seed: u64,
    tolerance: f64,
) -> Result<CheckResult> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone().with_grad())).collect();
    let y = f(&g, &vars)?;
    let r = random_tensor(&mut SeedTree::new(seed).stream(&format!("gradcheck/{name}")), &g.shape(y), 1.0);
    let loss = projected(&g, y, &r)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; g.shape(v).iter().product()]))
        .collect();
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&g, &vs)?;
        let l = projected(&g, y, &r)?;
        let v = g.value(l).item()?;
        Ok(v)
    };
    let mut entries = Vec::with_capacity(inputs.len());
    let mut vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    for (i, (iname, _)) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(vals[i].numel());
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + STEP;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = orig - STEP;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        entries.push((iname.to_string(), analytic[i].clone(), numeric));
    }
    Ok(summarize(name, &entries, tolerance))
}

/// A scalar loss of the parameters, built on a fresh graph.
pub type ParamLoss<'a> = dyn Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

/// Checks the gradient of `loss(params)` for every parameter of `ps`.
pub fn check_params(
    name: &str,
    ps: &ParamStore<f64>,
    loss: &ParamLoss<'_>,
    tolerance: f64,
) -> Result<CheckResult> {
    let g = Graph::new();
    let l = loss(&g, ps)?;
    if !g.shape(l).is_empty() {
        return Err(Error::Usage(format!("{name}: loss must be a scalar")));
    }
    g.backward(l)?;
    let grads = g.param_grads();
    let mut work = ps.clone();
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let l = loss(&g, p)?;
        let v = g.value(l).item()?;
        Ok(v)
    };
    let mut entries = Vec::with_capacity(ps.len());
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for pname in &names {
        let n = ps.get(pname).expect("listed").numel();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = work.get(pname).expect("listed").data()[j];
            work.get_mut(pname).expect("listed").data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work.get_mut(pname).expect("listed").data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work.get_mut(pname).expect("listed").data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        let analytic = grads.get(pname).cloned().unwrap_or_else(|| vec![0.0; n]);
        entries.push((pname.clone(), analytic, numeric));
    }
    Ok(summarize(name, &entries, tolerance))
}

/// Replaces every parameter with `N(0, scale²)` draws (norm gains centred on 1),
/// so zero-initialised branches are exercised too.
pub fn randomize(ps: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let tree = SeedTree::new(seed);
    for (name, t) in ps.iter_mut() {
        let mut rng = tree.stream(&format!("randomize/{name}"));
        let offset = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = offset + rng.sample::<f64, _>(StandardNormal) * scale;
        }
    }
}

/// One named primitive check: input tensors and the function under test.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(&'static str, Tensor<f64>)>,
    pub f: Box<Forward<'static>>,
}

fn case(name: &'static str, inputs: Vec<(&'static str, Tensor<f64>)>, f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

/// Every primitive operation on small random shapes.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = SeedTree::new(seed).stream("gradcheck/inputs");
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    vec![
        case("matmul", vec![("a", t(&[4, 3])), ("b", t(&[3, 5]))], |g, v| g.matmul(v[0], v[1])),
        case("add", vec![("a", t(&[2, 3])), ("b", t(&[2, 3]))], |g, v| g.add(v[0], v[1])),
        case("sub", vec![("a", t(&[2, 3])), ("b", t(&[2, 3]))], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![("a", t(&[2, 3])), ("b", t(&[2, 3]))], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![("a", t(&[5]))], |g, v| g.scale(v[0], -1.7)),
        case("bias_add", vec![("x", t(&[3, 4])), ("b", t(&[4]))], |g, v| g.bias_add(v[0], v[1])),
        case("relu", vec![("a", t(&[12]))], |g, v| g.relu(v[0])),
        case("gelu", vec![("a", t(&[12]))], |g, v| g.gelu(v[0])),
        case("softmax", vec![("a", t(&[7]))], |g, v| g.softmax(v[0], 0)),
        case("softmax_rows", vec![("a", t(&[3, 4]))], |g, v| g.softmax(v[0], 1)),
        case("layer_norm", vec![("x", t(&[4, 6])), ("gamma", t(&[6])), ("beta", t(&[6]))], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("reshape", vec![("a", t(&[2, 6]))], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", vec![("a", t(&[2, 3, 4]))], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("transpose", vec![("a", t(&[3, 5]))], |g, v| g.transpose(v[0])),
        case("concat", vec![("a", t(&[2, 3])), ("b", t(&[2, 2]))], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("narrow", vec![("a", t(&[4, 3]))], |g, v| g.narrow(v[0], 0, 1, 2)),
        case("split", vec![("a", t(&[5, 2]))], |g, v| {
            let parts = g.split(v[0], 0, &[2, 3])?;
            let a = g.scale(parts[0], 2.0)?;
            g.concat(&[parts[1], a], 0)
        }),
        case("chunk", vec![("a", t(&[6, 2, 2]))], |g, v| {
            let parts = g.chunk(v[0], 0, 3)?;
            let m = g.mul(parts[0], parts[2])?;
            g.add(m, parts[1])
        }),
        case("sum", vec![("a", t(&[3, 3]))], |g, v| g.sum(v[0])),
        case("mean", vec![("a", t(&[3, 3]))], |g, v| g.mean(v[0])),
        case("sum_axis", vec![("a", t(&[2, 3, 4]))], |g, v| g.sum_axis(v[0], 1)),
        case("mean_axis", vec![("a", t(&[2, 3, 4]))], |g, v| g.mean_axis(v[0], 2)),
        case("avg_pool2d", vec![("a", t(&[2, 6, 6]))], |g, v| g.avg_pool2d(v[0], 2, 2)),
        case("conv2d", vec![("x", t(&[3, 8, 8])), ("w", t(&[4, 3, 3, 3])), ("b", t(&[4]))], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)
        }),
        case("conv2d_grouped", vec![("x", t(&[4, 5, 5])), ("w", t(&[6, 2, 3, 3])), ("b", t(&[6]))], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 2)
        }),
        case("conv2d_transposed", vec![("x", t(&[3, 4, 4])), ("w", t(&[3, 2, 4, 4])), ("b", t(&[2]))], |g, v| {
            g.conv2d_transposed(v[0], v[1], Some(v[2]), 2, 1)
        }),
        case("mse_loss", vec![("pred", t(&[2, 4, 4])), ("target", t(&[2, 4, 4]))], |g, v| {
            mse_loss(g, v[0], v[1], &[true, false])
        }),
    ]
}

/// Runs every primitive check; with `inject_fault` a deliberately wrong backward rule is appended.
pub fn run_op_suite(seed: u64, inject_fault: bool) -> Result<Vec<CheckResult>> {
    let mut cases = op_cases(seed);
    if inject_fault {
        cases.push(faulty_case(seed));
    }
    cases
        .iter()
        .map(|c| check_inputs(c.name, &c.inputs, c.f.as_ref(), seed, OP_TOLERANCE))
        .collect()
}

/// `y = x²` recorded with the backward rule of `y = x` (a negative control).
pub fn faulty_case(seed: u64) -> OpCase {
    let x = random_tensor(&mut SeedTree::new(seed).stream("gradcheck/fault"), &[6], 1.0);
    case("faulty_square", vec![("x", x)], |g, v| {
        let out = Tensor::from_fn(&g.shape(v[0]), |i| g.value(v[0]).data()[i].powi(2));
        g.record("faulty_square", &[v[0]], out, Box::new(|a| Ok(vec![Some(a.grad_output.to_vec())])))
    })
}

fn module_loss(
    build: impl Fn(&mut Plan) -> Result<Box<dyn Fn(&Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>>>,
    name: &str,
    input: Tensor<f64>,
    seed: u64,
    tolerance: f64,
) -> Result<CheckResult> {
    let mut plan = Plan::new();
    let fwd = build(&mut plan)?;
    let mut ps = build_store::<f64>(&plan.specs, seed)?;
    randomize(&mut ps, seed, 0.4);
    let shape_probe = {
        let g = Graph::new();
        let x = g.constant(input.clone());
        g.shape(fwd(&g, &ps, x)?)
    };
    let r = random_tensor(&mut SeedTree::new(seed).stream(&format!("gradcheck/{name}/r")), &shape_probe, 1.0);
    check_params(
        name,
        &ps,
        &|g, p| {
            let x = g.constant(input.clone());
            let y = fwd(g, p, x)?;
            projected(g, y, &r)
        },
        tolerance,
    )
}

/// Parameter gradients of the attention building blocks.
pub fn run_module_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SeedTree::new(seed).stream("gradcheck/modules");
    let x8 = random_tensor(&mut rng, &[8, 4, 4], 1.0);
    let x4 = random_tensor(&mut rng, &[4, 4, 4], 1.0);
    let attn = AttnConfig { channels: 8, groups: 2, ratio: 2, heads: 2 };
    Ok(vec![
        module_loss(
            |p| {
                let m = SpatialReduce::new(p, "sr", 4, 2);
                Ok(Box::new(move |g, ps, x| m.forward(g, ps, x)))
            },
            "spatial_reduce",
            x4.clone(),
            seed,
            OP_TOLERANCE,
        )?,
        module_loss(
            |p| {
                let m = GroupAttention::new(p, "ga", 4, 2, 2);
                Ok(Box::new(move |g, ps, x| m.forward(g, ps, x)))
            },
            "group_attention",
            x4,
            seed,
            OP_TOLERANCE,
        )?,
        module_loss(
            |p| {
                let m = CgsrMha::new(p, "attn", attn, WeightInit::Zeros)?;
                Ok(Box::new(move |g, ps, x| m.forward(g, ps, x)))
            },
            "cgsr_mha",
            x8.clone(),
            seed,
            MODEL_TOLERANCE,
        )?,
        module_loss(
            |p| {
                let cfg = BlockConfig { attn, ffn_ratio: 2, ffn_pre: 1, ffn_post: 1 };
                let m = HevitBlock::new(p, "blk", cfg)?;
                Ok(Box::new(move |g, ps, x| m.forward(g, ps, x)))
            },
            "hevit_block",
            x8,
            seed,
            MODEL_TOLERANCE,
        )?,
    ])
}

/// A network small enough for exhaustive finite differences over every parameter.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        channels: [4, 8, 8],
        depths: [1, 1, 1],
        groups: [2, 2, 2],
        ratios: [2, 2, 1],
        heads: [1, 2, 1],
        ffn_ratio: 1,
        ffn_pre: 1,
        ffn_post: 1,
        head_widths: [4, 4],
        keypoints: 2,
        input: [32, 32],
        stem: vec![StemLayer::conv(7, 4)],
    }
}

/// Full forward plus MSE against a Gaussian target, all parameters randomised.
pub fn run_model_check(cfg: &ModelConfig, seed: u64) -> Result<CheckResult> {
    let mut model = build_model::<f64>(cfg, seed)?;
    randomize(&mut model.params, seed, 0.3);
    let arch: Architecture = model.arch.clone();
    let (h, w) = (cfg.input[0], cfg.input[1]);
    let image = random_tensor(&mut SeedTree::new(seed).stream("gradcheck/model/image"), &[3, h, w], 0.5);
    let kps = KeypointSet::new(
        (0..cfg.keypoints)
            .map(|j| Keypoint::new((j * 3 % (w / 4)) as f64, (j * 5 % (h / 4)) as f64))
            .collect(),
    );
    let target: Tensor<f64> = gaussian_target(&kps, (cfg.keypoints, h / 4, w / 4), 1.0)?;
    let vis = vec![true; cfg.keypoints];
    check_params(
        "model",
        &model.params,
        &|g, ps| {
            let x = g.constant(image.clone());
            let pred = arch.forward(g, ps, x)?;
            let t = g.constant(target.clone());
            mse_loss(g, pred, t, &vis)
        },
        MODEL_TOLERANCE,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn fault_is_detected() {
        let c = faulty_case(0);
        let r = check_inputs(c.name, &c.inputs, c.f.as_ref(), 0, OP_TOLERANCE).unwrap();
        assert!(!r.passed(), "{r:?}");
    }
}
