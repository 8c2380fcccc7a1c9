//! `hevit`: cost audits, overlap reports, shape traces, gradient checks and
//! synthetic training from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hevitpose::audit::{self, Convention};
use hevitpose::checkpoint;
use hevitpose::config::{read_config, ConfigFile};
use hevitpose::gradcheck::{self, CheckResult};
use hevitpose::heatmap::predictions_csv;
use hevitpose::patch_embed::{compute_peow, parse_stem, stem_overlap, visit_counts, StemLayer};
use hevitpose::synth;
use hevitpose::train::{self, RunSeeds};
use hevitpose::{build_model, Architecture, Error, ModelConfig, Tensor};

#[derive(Parser)]
#[command(name = "hevit", version, about = "Pose-transformer cost audits, gradient checks and synthetic training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP counts, per layer and in total.
    Audit(AuditArgs),
    /// Overlap width, output size and pixel visit counts of one patch window.
    Peow(PeowArgs),
    /// Feature-pyramid and heatmap shapes from an actual forward pass.
    Shapes(ModelArgs),
    /// Finite-difference gradient checks at 64-bit.
    Gradcheck(GradcheckArgs),
    /// Trains on synthetic samples and writes a checkpoint and loss history.
    TrainSynth(TrainArgs),
    /// Scores a checkpoint on the synthetic samples with PCKh.
    EvalSynth(EvalArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: T, S, B or tiny. Replaces the config's preset.
    #[arg(long)]
    preset: Option<String>,
    /// Input size as HxW, e.g. 256x256.
    #[arg(long, value_parser = parse_hw)]
    input: Option<[usize; 2]>,
    /// Comma-separated stem layers, e.g. "conv3s2,conv3s2" or "conv15s8,deconv4s2".
    #[arg(long)]
    stem: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// mac1 counts a multiply-accumulate as one FLOP, mac2 as two.
    #[arg(long)]
    convention: Option<Convention>,
    /// Write the per-layer table (or the family table with --family) as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print every layer, not just the totals.
    #[arg(long)]
    layers: bool,
    /// Audit the T, S and B presets side by side.
    #[arg(long)]
    family: bool,
}

#[derive(Args)]
struct PeowArgs {
    kernel: usize,
    stride: usize,
    /// Side of the illustrative grid; defaults to three windows per axis.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append an op whose backward rule is wrong; the run must then fail.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory for model.hevt, loss.csv and config.json.
    #[arg(long, default_value = "hevit-run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Also write the training images and keypoints here.
    #[arg(long)]
    export_samples: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Average with the prediction on the mirrored image.
    #[arg(long)]
    flip: bool,
    /// Correct when within alpha × head length.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Write decoded keypoints as CSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

/// A command failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn parse_hw(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not HxW"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{v}` in `{s}` is not a size"));
    Ok([p(h)?, p(w)?])
}

fn set_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("HEVIT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure { code: 1, message: format!("HEVIT_THREADS=`{v}` must be a positive integer") })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure { code: 1, message: format!("cannot size the thread pool: {e}") })
}

/// The config file (or defaults) with command-line overrides applied.
fn resolve(args: &ModelArgs, default_preset: &str) -> Result<(ConfigFile, String), Failure> {
    let mut file = match &args.config {
        Some(p) => read_config(p)?,
        None => ConfigFile::default(),
    };
    if let Some(p) = &args.preset {
        file.model.preset = Some(p.clone());
    } else if file.model == Default::default() {
        file.model.preset = Some(default_preset.to_string());
    }
    if let Some(hw) = args.input {
        file.model.input = Some(hw);
    }
    if let Some(s) = &args.stem {
        file.stem = Some(parse_stem(s)?);
    }
    let name = match &file.model.preset {
        Some(p) if file.stem.is_none() => format!("hevit-{p}"),
        Some(p) => format!("hevit-{p}+stem"),
        None => "custom".to_string(),
    };
    Ok((file, name))
}

fn stem_string(stem: &[StemLayer]) -> String {
    stem.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn cmd_audit(a: &AuditArgs) -> CmdResult {
    let (file, name) = resolve(&a.model, "B")?;
    let convention = a.convention.unwrap_or(file.audit.convention);
    let [h, w] = match (a.model.input, a.model.config.is_some()) {
        (Some(hw), _) => hw,
        (None, true) => [file.audit.input_h, file.audit.input_w],
        (None, false) => [256, 256],
    };
    if a.family {
        let reports = audit::family_table(&["T", "S", "B"], h, w, convention)?;
        print!("{}", audit::family_text(&reports));
        if let Some(p) = &a.csv {
            write_file(p, audit::family_csv(&reports).as_bytes())?;
        }
        return Ok(());
    }
    let mut cfg = file.model_config()?;
    cfg.input = [h, w];
    let arch = Architecture::new(&cfg)?;
    let report = audit::audit(&arch, &name, h, w, convention)?;
    if a.layers {
        print!("{}", report.to_text());
    }
    let overlap = stem_overlap(&cfg.stem)?;
    let mut out = String::new();
    let _ = writeln!(out, "model       {name}");
    let _ = writeln!(out, "input       {h}x{w}");
    let _ = writeln!(
        out,
        "stem        {} (overlap widths {:?}{})",
        stem_string(&cfg.stem),
        overlap.widths,
        if overlap.double_overlap { ", double overlap" } else { "" }
    );
    let _ = writeln!(out, "params      {} ({:.2}M)", report.total_params(), report.total_params() as f64 / 1e6);
    let _ = writeln!(out, "macs        {}", report.total_macs());
    let _ = writeln!(out, "flops       {} ({:.2}G, {convention})", report.total_flops(), report.total_flops() as f64 / 1e9);
    let other = match convention {
        Convention::MacAsOne => Convention::MacAsTwo,
        Convention::MacAsTwo => Convention::MacAsOne,
    };
    let _ = writeln!(out, "flops       {:.2}G ({other})", report.flops(other) as f64 / 1e9);
    let _ = writeln!(out, "elem_ops    {}", report.total_elem_ops());
    print!("{out}");
    if let Some(p) = &a.csv {
        write_file(p, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn cmd_peow(a: &PeowArgs) -> CmdResult {
    let (k, s) = (a.kernel, a.stride);
    if s == 0 {
        return Err(Failure { code: 1, message: "stride must be at least 1".into() });
    }
    let peow = compute_peow(k, s)?;
    let layer = StemLayer::conv(k, s);
    let pad = layer.padding();
    let mut out = String::new();
    if peow == 0 {
        let _ = writeln!(out, "PEOW=0 (non-overlapping)");
    } else {
        let _ = writeln!(out, "PEOW={peow}");
    }
    let _ = writeln!(out, "output size: floor((n + 2*{pad} - {k}) / {s}) + 1, e.g. 256 -> {}", layer.out_size(256)?);
    let n = a.grid.unwrap_or(k + 2 * s);
    if n < k {
        return Err(Failure { code: 1, message: format!("grid {n} is smaller than the kernel {k}") });
    }
    let counts = visit_counts(n, n, k, s, 0)?;
    let _ = writeln!(out, "visit counts on a {n}x{n} grid without padding:");
    let width = counts.iter().max().map_or(1, |m| m.to_string().len());
    for row in counts.chunks(n) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>width$}")).collect();
        let _ = writeln!(out, "  {}", cells.join(" "));
    }
    let mut distinct: Vec<u32> = counts.iter().copied().filter(|&c| c > 0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let listed: Vec<String> = distinct.iter().map(ToString::to_string).collect();
    let _ = writeln!(out, "distinct counts: {{{}}}", listed.join(", "));
    print!("{out}");
    Ok(())
}

fn cmd_shapes(a: &ModelArgs) -> CmdResult {
    let (file, name) = resolve(a, "B")?;
    let cfg = file.model_config()?;
    let [h, w] = cfg.input;
    let model = build_model::<f32>(&cfg, RunSeeds::new(file.train.seed).model)?;
    let image = Tensor::<f32>::zeros(&[3, h, w]);
    let feats = model.forward_backbone(&image)?;
    let heat = model.forward_head(&feats)?;
    let dims = |s: &[usize]| s.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
    let mut out = format!("model    {name}\ninput    {}\n", dims(image.shape()));
    let spec = cfg.embed_spec();
    for (i, (sh, sw)) in spec.trace_sizes(h, w)?.into_iter().enumerate() {
        let _ = writeln!(out, "stem.{i}   {}x{sh}x{sw}", spec.layer_channels(i).1);
    }
    for (i, m) in feats.maps.iter().enumerate() {
        let _ = writeln!(out, "stage{}   {}", i + 1, dims(m.shape()));
    }
    let _ = writeln!(out, "heatmap  {}", dims(heat.shape()));
    print!("{out}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let mut results: Vec<(&str, CheckResult)> = Vec::new();
    results.extend(gradcheck::run_op_suite(a.seed, a.inject_fault)?.into_iter().map(|r| ("op", r)));
    results.extend(gradcheck::run_module_suite(a.seed)?.into_iter().map(|r| ("module", r)));
    results.push(("model", gradcheck::run_model_check(&gradcheck::micro_config(), a.seed)?));
    let width = results.iter().map(|(_, r)| r.name.len()).max().unwrap_or(4);
    let mut out = String::new();
    let mut failed = 0;
    for (kind, r) in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        let _ = writeln!(
            out,
            "{verdict} {kind:<6} {:<width$} max_rel_err {:.3e} (tolerance {:.0e}, worst at {})",
            r.name, r.max_rel_error, r.tolerance, r.worst
        );
    }
    let _ = writeln!(out, "{} checks, {failed} failed", results.len());
    print!("{out}");
    if failed > 0 {
        return Err(Failure { code: 2, message: format!("{failed} gradient check(s) failed") });
    }
    Ok(())
}

fn training_set(file: &ConfigFile, cfg: &ModelConfig) -> Result<Vec<synth::SynthSample>, Failure> {
    let [h, w] = cfg.input;
    Ok(synth::generate(RunSeeds::new(file.train.seed).data, file.train.samples, h, w, cfg.keypoints)?)
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let (mut file, name) = resolve(&a.model, "tiny")?;
    if let Some(s) = a.seed {
        file.train.seed = s;
    }
    if let Some(s) = a.steps {
        file.train.steps = s;
    }
    if let Some(lr) = a.lr {
        file.train.lr = lr;
    }
    file.train.validate()?;
    let cfg = file.model_config()?;
    let data = training_set(&file, &cfg)?;
    if let Some(dir) = &a.export_samples {
        synth::export(&data, dir)?;
    }
    let mut model = build_model::<f32>(&cfg, RunSeeds::new(file.train.seed).model)?;
    println!(
        "training {name}: {} params, {} samples, {} steps, lr {}",
        model.arch.param_count(),
        data.len(),
        file.train.steps,
        file.train.lr
    );
    let every = (file.train.steps / 20).max(1);
    let last = file.train.steps;
    let history = train::train_loop(&mut model, &data, &file.train, |step, loss| {
        if step % every == 0 || step == last {
            println!("step {step:>5}  loss {loss:.6}");
        }
    })?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    checkpoint::save(&model.params, &a.out.join("model.hevt"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    write_file(&a.out.join("loss.csv"), csv.as_bytes())?;
    write_file(&a.out.join("config.json"), format!("{}\n", file.expanded()?.to_json()).as_bytes())?;
    let (first, final_) = (history[0], history[history.len() - 1]);
    println!("loss {first:.6} -> {final_:.6} (ratio {:.4})", final_ / first);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let (mut file, name) = resolve(&a.model, "tiny")?;
    if let Some(s) = a.seed {
        file.train.seed = s;
    }
    let cfg = file.model_config()?;
    let data = training_set(&file, &cfg)?;
    let mut model = build_model::<f32>(&cfg, RunSeeds::new(file.train.seed).model)?;
    checkpoint::load_into(&mut model, &checkpoint::load(&a.checkpoint)?)?;
    let report = train::evaluate(&model, &data, cfg.keypoints, a.alpha, a.flip)?;
    let mut out = format!(
        "{name}: {} samples{}\n{:<12} PCKh@{}\n",
        data.len(),
        if a.flip { ", flip test" } else { "" },
        "joint",
        a.alpha
    );
    for (j, s) in report.scores.per_joint.iter().enumerate() {
        let v = s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(out, "{:<12} {v}", synth::joint_name(j, cfg.keypoints));
    }
    let _ = writeln!(out, "{:<12} {:.2}", "total", report.scores.total);
    print!("{out}");
    if let Some(p) = &a.predictions {
        let rows: Vec<_> = data.iter().map(|s| s.index).zip(report.predictions).collect();
        write_file(p, predictions_csv(&rows).as_bytes())?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes)
        .map_err(|e| Failure { code: 1, message: format!("cannot write {}: {e}", path.display()) })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = set_threads().and_then(|()| match &cli.command {
        Command::Audit(a) => cmd_audit(a),
        Command::Peow(a) => cmd_peow(a),
        Command::Shapes(a) => cmd_shapes(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::TrainSynth(a) => cmd_train(a),
        Command::EvalSynth(a) => cmd_eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
