//! Command-line front end: `render`, `synth`, `fit`, `eval` and `check-grad`.
//!
//! Settings come from built-in defaults, then an optional `--config` TOML
//! file, then flags. Every command writes the effective settings (minus the
//! output path) to `config.toml` in its output directory, and passing that
//! file back with `--config` reproduces the run.
//!
//! Exit status: 0 on success, 1 when some fit targets failed or the gradient
//! check did not pass, 2 on configuration, parse or input errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{default_groups, score, Metric};
use crate::files::{
    keypoints_from_csv, keypoints_to_csv, read_text, transforms_from_csv, transforms_to_csv,
    write_atomic,
};
use crate::fit::{fit_pose, FitConfig, FitResult};
use crate::geometry::AffineTransform;
use crate::gradcheck::{run_gradcheck, GradCheckConfig};
use crate::loss::LossConfig;
use crate::render::{
    composite_overlay, mark_points, png_bytes, render_analytic, PartMaps, DEFAULT_RESOLUTION,
};
use crate::synth::{generate_dataset, write_dataset, PoseRanges};
use crate::template::{canonical_human_template, parse_template, Template};

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "gausspose",
    version,
    about = "Render, synthesize, fit and score part-based Gaussian pose templates"
)]
pub struct Cli {
    /// TOML settings file; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Template file (TOML). Defaults to the built-in 18-part human template.
    #[arg(long, global = true, value_name = "FILE")]
    pub template: Option<PathBuf>,

    /// Side length of the square part maps, in pixels.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,

    /// Seed for sampling and gradient-check draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the template (optionally transformed) to a part map and overlay PNG.
    Render(RenderArgs),
    /// Generate a synthetic dataset of articulated poses.
    Synth(SynthArgs),
    /// Fit part transforms to every target part map.
    Fit(FitArgs),
    /// Score predicted keypoints against ground truth.
    Eval(EvalArgs),
    /// Compare closed-form gradients with finite differences.
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// CSV of per-part transforms (`part,xx,xy,yx,yy,tx,ty`).
    #[arg(long, value_name = "FILE")]
    pub transforms: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Disable all sampling variation (canonical pose only).
    #[arg(long)]
    pub zero_ranges: bool,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Weight of the anchor-agreement term.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the boundary term.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Coordinate bound beyond which anchors are penalized.
    #[arg(long)]
    pub boundary_b: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Learning rate 1e-4, as used for network training.
    Training,
    /// Learning rate 1e-2, 300 iterations; calibrated on synthetic poses.
    Synthetic,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory (every `*.pmap` in it) or a single `.pmap` file.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Replace the optimizer settings with a named profile before applying
    /// `--lr` and `--max-iters`.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Also write an overlay PNG per target.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `NNNN.pred.csv` files.
    #[arg(long, value_name = "DIR")]
    pub pred: Option<PathBuf>,
    /// Directory of `NNNN.gt.csv` files.
    #[arg(long, value_name = "DIR")]
    pub gt: Option<PathBuf>,
    /// Report mean squared normalized distance instead of mean distance.
    #[arg(long)]
    pub squared_metric: bool,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Number of random parameter draws.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Bound used for the boundary and total terms.
    #[arg(long)]
    pub boundary_b: Option<f64>,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

/// Optimizer part of the fit settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub patience: usize,
}

impl Optimizer {
    fn from_fit(f: &FitConfig) -> Self {
        Optimizer {
            learning_rate: f.learning_rate,
            beta1: f.beta1,
            beta2: f.beta2,
            epsilon: f.epsilon,
            max_iters: f.max_iters,
            convergence_tol: f.convergence_tol,
            patience: f.patience,
        }
    }

    fn profile(p: Profile) -> Self {
        match p {
            Profile::Training => Self::from_fit(&FitConfig::default()),
            Profile::Synthetic => Self::from_fit(&FitConfig::synthetic()),
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::profile(Profile::Synthetic)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub transforms: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub n: usize,
    pub ranges: PoseRanges,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n: 100,
            ranges: PoseRanges::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub input: Option<PathBuf>,
    pub overlays: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub squared_metric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckGradOptions {
    pub draws: usize,
    pub step: f64,
    pub tolerance: f64,
    pub boundary_b: f64,
    pub linear_jitter: f64,
    pub shift_jitter: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub inject_sign_flip: bool,
}

impl Default for CheckGradOptions {
    fn default() -> Self {
        let g = GradCheckConfig::default();
        CheckGradOptions {
            draws: g.draws,
            step: g.step,
            tolerance: g.tolerance,
            boundary_b: g.boundary_b,
            linear_jitter: g.linear_jitter,
            shift_jitter: g.shift_jitter,
            inject_sign_flip: false,
        }
    }
}

/// Everything a run depends on. Serialized as the echoed `config.toml`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub template: Option<PathBuf>,
    /// Unset means the command's default (128, or 32 for `check-grad`).
    pub resolution: Option<usize>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub loss: LossConfig,
    pub optimizer: Optimizer,
    pub render: RenderOptions,
    pub synth: SynthOptions,
    pub fit: FitOptions,
    pub eval: EvalOptions,
    pub check_grad: CheckGradOptions,
}

impl RunConfig {
    pub fn fit_config(&self) -> FitConfig {
        let o = &self.optimizer;
        FitConfig {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            max_iters: o.max_iters,
            convergence_tol: o.convergence_tol,
            patience: o.patience,
            seed: self.seed,
            loss: self.loss,
            resolution: self.resolution.unwrap_or(DEFAULT_RESOLUTION),
        }
    }

    pub fn gradcheck_config(&self) -> GradCheckConfig {
        let c = &self.check_grad;
        GradCheckConfig {
            draws: c.draws,
            resolution: self.resolution.unwrap_or(GradCheckConfig::default().resolution),
            step: c.step,
            tolerance: c.tolerance,
            seed: self.seed,
            boundary_b: c.boundary_b,
            linear_jitter: c.linear_jitter,
            shift_jitter: c.shift_jitter,
            inject_sign_flip: c.inject_sign_flip,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Defaults, then the `--config` file, then flags. The returned config has
/// its resolution filled in for the chosen command.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => toml::from_str::<RunConfig>(&read_text(path)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if cli.template.is_some() {
        cfg.template = cli.template.clone();
    }
    if cli.resolution.is_some() {
        cfg.resolution = cli.resolution;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    let default_res = match &cli.command {
        Command::Render(a) => {
            if a.transforms.is_some() {
                cfg.render.transforms = a.transforms.clone();
            }
            DEFAULT_RESOLUTION
        }
        Command::Synth(a) => {
            if let Some(n) = a.n {
                cfg.synth.n = n;
            }
            if a.zero_ranges {
                cfg.synth.ranges = PoseRanges::zero();
            }
            DEFAULT_RESOLUTION
        }
        Command::Fit(a) => {
            if a.input.is_some() {
                cfg.fit.input = a.input.clone();
            }
            cfg.fit.overlays |= a.overlays;
            apply_loss(&mut cfg.loss, &a.loss);
            if let Some(p) = a.profile {
                cfg.optimizer = Optimizer::profile(p);
            }
            if let Some(lr) = a.lr {
                cfg.optimizer.learning_rate = lr;
            }
            if let Some(m) = a.max_iters {
                cfg.optimizer.max_iters = m;
            }
            DEFAULT_RESOLUTION
        }
        Command::Eval(a) => {
            if a.pred.is_some() {
                cfg.eval.pred = a.pred.clone();
            }
            if a.gt.is_some() {
                cfg.eval.gt = a.gt.clone();
            }
            cfg.eval.squared_metric |= a.squared_metric;
            DEFAULT_RESOLUTION
        }
        Command::CheckGrad(a) => {
            if let Some(d) = a.draws {
                cfg.check_grad.draws = d;
            }
            if let Some(b) = a.boundary_b {
                cfg.check_grad.boundary_b = b;
            }
            cfg.check_grad.inject_sign_flip |= a.inject_sign_flip;
            GradCheckConfig::default().resolution
        }
    };
    cfg.resolution.get_or_insert(default_res);
    if cfg.jobs == Some(0) {
        return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
    }
    cfg.loss.validate()?;
    Ok(cfg)
}

fn apply_loss(loss: &mut LossConfig, a: &LossArgs) {
    if let Some(v) = a.lambda1 {
        loss.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        loss.lambda2 = v;
    }
    if let Some(v) = a.boundary_b {
        loss.boundary_b = v;
    }
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some items failed (fit targets) or a check did not pass.
    Partial,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::Partial => 1,
        }
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(status) => status.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(cli: &Cli) -> Result<Status> {
    let cfg = resolve_config(cli)?;
    let work = || -> Result<Status> {
        match &cli.command {
            Command::Render(_) => cmd_render(&cfg, required_out(cli)?),
            Command::Synth(_) => cmd_synth(&cfg, required_out(cli)?),
            Command::Fit(_) => cmd_fit(&cfg, required_out(cli)?),
            Command::Eval(_) => cmd_eval(&cfg, required_out(cli)?),
            Command::CheckGrad(_) => cmd_checkgrad(&cfg, cli.out.as_deref()),
        }
    };
    match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out is required for this command".into()))
}

pub fn load_template(cfg: &RunConfig) -> Result<Template> {
    match &cfg.template {
        None => Ok(canonical_human_template()),
        Some(path) => parse_template(&read_text(path)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display()))),
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(out.join(CONFIG_ECHO), cfg.to_toml().as_bytes())
}

fn resolution(cfg: &RunConfig) -> usize {
    cfg.resolution.unwrap_or(DEFAULT_RESOLUTION)
}

fn overlay_png(
    template: &Template,
    maps: &PartMaps,
    background: &GrayImage,
    transforms: &[AffineTransform],
) -> Result<Vec<u8>> {
    let mut img = composite_overlay(maps, background)?;
    let anchors: Vec<_> = template
        .transformed_anchors(transforms)
        .into_iter()
        .flatten()
        .collect();
    mark_points(&mut img, &anchors);
    png_bytes(&img)
}

fn cmd_render(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let template = load_template(cfg)?;
    let n = resolution(cfg);
    let transforms = match &cfg.render.transforms {
        Some(path) => transforms_from_csv(&template, &read_text(path)?)?,
        None => vec![AffineTransform::IDENTITY; template.num_parts()],
    };
    let maps = render_analytic(&template, &transforms, n)?;
    prepare_out(out, cfg)?;
    write_atomic(out.join("render.pmap"), &maps.to_bytes())?;
    let black = GrayImage::new(n as u32, n as u32);
    write_atomic(
        out.join("overlay.png"),
        &overlay_png(&template, &maps, &black, &transforms)?,
    )?;
    println!("wrote {}", out.display());
    Ok(Status::Success)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let template = load_template(cfg)?;
    let n = resolution(cfg);
    let data = generate_dataset(&template, cfg.synth.n, &cfg.synth.ranges, n, cfg.seed)?;
    prepare_out(out, cfg)?;
    write_dataset(out, &template, &data, &cfg.synth.ranges, n, cfg.seed)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(Status::Success)
}

/// `(name, path)` of every target, sorted by name.
fn fit_targets(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    if input.is_file() {
        return Ok(vec![(stem(input), input.to_path_buf())]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut targets = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        if path.extension().is_some_and(|x| x == "pmap") {
            targets.push((stem(&path), path));
        }
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no .pmap targets",
            input.display()
        )));
    }
    targets.sort();
    Ok(targets)
}

fn trace_csv(fit: &FitResult) -> String {
    let mut out = String::from("iter,recon,anchor,boundary,total\n");
    for (i, l) in fit.loss_trace.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{}\n",
            l.recon, l.anchor, l.boundary, l.total
        ));
    }
    out
}

fn max_projection(maps: &PartMaps) -> GrayImage {
    let n = maps.size();
    GrayImage::from_fn(n as u32, n as u32, |col, row| {
        let v = (0..maps.channels())
            .map(|k| maps.get(k, row as usize, col as usize))
            .fold(0.0, f64::max);
        image::Luma([(v * 255.0).round() as u8])
    })
}

fn fit_one(
    template: &Template,
    config: &FitConfig,
    overlays: bool,
    name: &str,
    path: &Path,
    out: &Path,
) -> Result<FitResult> {
    let target = PartMaps::read(path)?;
    let fit = fit_pose(template, &target, config)?;
    write_atomic(
        out.join(format!("{name}.pred.csv")),
        keypoints_to_csv(&fit.keypoints).as_bytes(),
    )?;
    write_atomic(out.join(format!("{name}.trace.csv")), trace_csv(&fit).as_bytes())?;
    write_atomic(
        out.join(format!("{name}.transforms.csv")),
        transforms_to_csv(template, &fit.transforms).as_bytes(),
    )?;
    if overlays {
        let maps = render_analytic(template, &fit.transforms, config.resolution)?;
        let png = overlay_png(template, &maps, &max_projection(&target), &fit.transforms)?;
        write_atomic(out.join(format!("{name}.overlay.png")), &png)?;
    }
    Ok(fit)
}

fn cmd_fit(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let template = load_template(cfg)?;
    let input = cfg
        .fit
        .input
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("fit needs --input".into()))?;
    let config = cfg.fit_config();
    config.validate()?;
    let targets = fit_targets(input)?;
    prepare_out(out, cfg)?;
    let results: Vec<(String, Result<FitResult>)> = targets
        .par_iter()
        .map(|(name, path)| {
            let r = fit_one(&template, &config, cfg.fit.overlays, name, path, out);
            (name.clone(), r)
        })
        .collect();

    let mut summary = String::from("target,final_total,iterations,converged\n");
    let mut losses = Vec::new();
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(fit) => {
                summary.push_str(&format!(
                    "{name},{},{},{}\n",
                    fit.best.total, fit.iterations_used, fit.converged
                ));
                losses.push(fit.best.total);
            }
            Err(e) => {
                failed += 1;
                eprintln!("{name}: {e}");
                summary.push_str(&format!("{name},failed,,\n"));
            }
        }
    }
    let mean = if losses.is_empty() {
        f64::NAN
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    let line = format!(
        "mean final loss {mean} over {} targets ({failed} failed)",
        losses.len()
    );
    summary.push_str(&format!("# {line}\n"));
    write_atomic(out.join("summary.txt"), summary.as_bytes())?;
    println!("{line}");
    Ok(if failed > 0 {
        Status::Partial
    } else {
        Status::Success
    })
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Status> {
    let template = load_template(cfg)?;
    let missing = |what: &str| Error::InvalidArgument(format!("eval needs --{what}"));
    let pred_dir = cfg.eval.pred.as_deref().ok_or_else(|| missing("pred"))?;
    let gt_dir = cfg.eval.gt.as_deref().ok_or_else(|| missing("gt"))?;
    let mut names = Vec::new();
    for entry in fs::read_dir(gt_dir).map_err(|e| Error::io(gt_dir, e))? {
        let path = entry.map_err(|e| Error::io(gt_dir, e))?.path();
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned());
        if let Some(name) = file.as_deref().and_then(|f| f.strip_suffix(".gt.csv")) {
            names.push(name.to_string());
        }
    }
    names.sort();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for name in &names {
        let pred_path = pred_dir.join(format!("{name}.pred.csv"));
        if !pred_path.is_file() {
            return Err(Error::Reference(format!(
                "no prediction {} for ground truth {name}",
                pred_path.display()
            )));
        }
        preds.push(keypoints_from_csv(&read_text(&pred_path)?)?);
        gts.push(keypoints_from_csv(&read_text(gt_dir.join(format!("{name}.gt.csv")))?)?);
    }
    let metric = if cfg.eval.squared_metric {
        Metric::SquaredDistance
    } else {
        Metric::Distance
    };
    let report = score(&preds, &gts, &default_groups(&template), metric)?;
    prepare_out(out, cfg)?;
    let text = report.to_text();
    write_atomic(out.join("eval.txt"), text.as_bytes())?;
    write_atomic(out.join("eval.json"), report.to_json().as_bytes())?;
    print!("{text}");
    Ok(Status::Success)
}

fn cmd_checkgrad(cfg: &RunConfig, out: Option<&Path>) -> Result<Status> {
    let template = load_template(cfg)?;
    let report = run_gradcheck(&template, &cfg.gradcheck_config())?;
    let text = report.to_text();
    if let Some(out) = out {
        prepare_out(out, cfg)?;
        write_atomic(out.join("gradcheck.txt"), text.as_bytes())?;
    }
    print!("{text}");
    Ok(if report.passed() {
        Status::Success
    } else {
        Status::Partial
    })
}
