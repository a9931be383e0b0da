//! `voxseg` command-line front end.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use voxseg_core::di2in::Di2in;
use voxseg_core::gradsuite::{run_suite, SuiteOptions};
use voxseg_core::metrics::{binarize, cohort_report, evaluate_case};
use voxseg_core::phantom::{load_dataset, read_manifest, read_volume, synthesize_case, write_dataset, write_volume, DatasetRecipe, VolumeGrid, VolumeKind};
use voxseg_core::train::{adversarial_train, pretrain_generator, TrainConfig, TrainLog, ADV_LOG, PRETRAIN_LOG};
use voxseg_core::Error;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "voxseg", version, about = "Volumetric segmentation with an adversarially trained 3D encoder-decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Pretrain the generator on the segmentation loss.
    Pretrain(TrainArgs),
    /// Adversarial fine-tuning of a pretrained generator.
    Advtrain(AdvArgs),
    /// Probability map (and optionally a mask) for one volume.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Finite-difference audit of the backward passes.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cubic working extent in voxels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Isotropic working spacing in mm.
    #[arg(long, default_value_t = 3.0)]
    pub spacing: f32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with a manifest.
    #[arg(long, required_unless_present = "show_config")]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and the log.
    #[arg(long, required_unless_present = "show_config")]
    pub out: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Debug, Args)]
pub struct AdvArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pretrained generator checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Probability map output.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a binary mask thresholded at this value.
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Mask output path; defaults to `<out stem>_mask.vxsg`.
    #[arg(long, requires = "threshold")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks or probability maps.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth labels.
    #[arg(long)]
    pub gt: PathBuf,
    /// Threshold applied to probability maps.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Report file; defaults to `metrics.tsv` inside the prediction directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Method name in the summary table.
    #[arg(long, default_value = "DI2IN")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the default tolerances (1e-3 primitives, 1e-2 composed).
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Corrupt the named check's analytic gradient.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Self { code: EXIT_USAGE, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let diverged = error.chain().any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Diverged(_))));
        Self { code: if diverged { EXIT_DIVERGED } else { EXIT_USAGE }, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Advtrain(a) => advtrain(&a),
        Command::Predict(a) => predict(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn synth(a: &SynthArgs) -> CmdResult {
    let recipe = DatasetRecipe { seed: a.seed, size: a.size, spacing: a.spacing, ..DatasetRecipe::default() };
    if !(a.spacing > 0.0) {
        return Err(Failure::usage(anyhow!("--spacing must be positive")));
    }
    let cases = (0..a.count).map(|i| synthesize_case(&recipe, i)).collect::<Result<Vec<_>, _>>()?;
    write_dataset(&a.out, &cases).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Returns the data and output directories, or `None` after printing the
/// config for `--show-config`.
fn prepare(a: &TrainArgs, cfg: &TrainConfig) -> Result<Option<(PathBuf, PathBuf)>, Failure> {
    if a.show_config {
        print!("{}", cfg.render());
        return Ok(None);
    }
    let (Some(data), Some(out)) = (a.data.clone(), a.out.clone()) else {
        return Err(Failure::usage(anyhow!("--data and --out are required")));
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join("config.txt"))?;
    Ok(Some((data, out)))
}

fn pretrain(a: &TrainArgs) -> CmdResult {
    let cfg = load_config(a)?;
    let Some((data, out)) = prepare(a, &cfg)? else { return Ok(()) };
    let cases = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let mut log = TrainLog::to_file(&out.join(PRETRAIN_LOG))?.echo_warnings(true);
    let start = Instant::now();
    pretrain_generator(&cfg, &cases, Some(&out), &mut log)?;
    report_training(&log, start);
    Ok(())
}

fn advtrain(a: &AdvArgs) -> CmdResult {
    let cfg = load_config(&a.train)?;
    if a.train.show_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    let Some(init) = &a.init else {
        return Err(Failure::usage(anyhow!("advtrain needs a pretrained generator: pass --init <checkpoint>")));
    };
    if !init.is_file() {
        return Err(Failure::usage(anyhow!("generator checkpoint {} does not exist", init.display())));
    }
    let generator = Di2in::load(init).with_context(|| format!("loading generator {}", init.display()))?;
    let Some((data, out)) = prepare(&a.train, &cfg)? else { return Ok(()) };
    let cases = load_dataset(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let mut log = TrainLog::to_file(&out.join(ADV_LOG))?.echo_warnings(true);
    let start = Instant::now();
    adversarial_train(&cfg, generator, &cases, Some(&out), &mut log)?;
    report_training(&log, start);
    Ok(())
}

fn report_training(log: &TrainLog, start: Instant) {
    if let Some(last) = log.records.last() {
        println!("{} steps, final {} loss {:.6} ({:.1} s)", log.records.len(), last.phase, last.loss, start.elapsed().as_secs_f64());
    }
}

/// Zero-pads each extent of `v` up to a multiple of `m` at the far end.
fn pad_to_multiple(v: &VolumeGrid, m: usize) -> VolumeGrid {
    let [d, h, w] = v.extents;
    let target = [d.div_ceil(m) * m, h.div_ceil(m) * m, w.div_ceil(m) * m];
    if target == v.extents {
        return v.clone();
    }
    let mut values = vec![0.0f32; target.iter().product()];
    for z in 0..d {
        for y in 0..h {
            let src = v.index(z, y, 0);
            let dst = (z * target[1] + y) * target[2];
            values[dst..dst + w].copy_from_slice(&v.values[src..src + w]);
        }
    }
    VolumeGrid { kind: v.kind, extents: target, spacing: v.spacing, origin: v.origin, values }
}

fn crop_to(v: &VolumeGrid, extents: [usize; 3]) -> VolumeGrid {
    let mut values = Vec::with_capacity(extents.iter().product());
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            let src = v.index(z, y, 0);
            values.extend_from_slice(&v.values[src..src + extents[2]]);
        }
    }
    VolumeGrid { kind: v.kind, extents, spacing: v.spacing, origin: v.origin, values }
}

/// Probability map of `image` under `net`, padding to the network's divisor
/// and cropping back.
pub fn predict_volume(net: &mut Di2in, image: &VolumeGrid) -> voxseg_core::Result<VolumeGrid> {
    if image.is_empty() {
        return VolumeGrid::new(VolumeKind::Image, image.extents, image.spacing, image.origin, Vec::new());
    }
    let padded = pad_to_multiple(image, net.spec.divisor());
    let prob = net.predict(&padded.to_tensor())?;
    let prob = VolumeGrid::from_tensor(&prob, VolumeKind::Image, &padded)?;
    Ok(crop_to(&prob, image.extents))
}

fn default_mask_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = stem.strip_suffix("_prob").unwrap_or(&stem);
    out.with_file_name(format!("{stem}_mask.vxsg"))
}

fn predict(a: &PredictArgs) -> CmdResult {
    if let Some(t) = a.threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(Failure::usage(anyhow!("--threshold must lie in (0, 1), got {t}")));
        }
    }
    let mut net = Di2in::load(&a.checkpoint).with_context(|| format!("loading generator {}", a.checkpoint.display()))?;
    let image = read_volume(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let start = Instant::now();
    let prob = predict_volume(&mut net, &image)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_volume(&prob, &a.out)?;
    let [d, h, w] = image.extents;
    println!("predicted {d}x{h}x{w} volume in {elapsed:.3} s -> {}", a.out.display());
    if let Some(t) = a.threshold {
        let path = a.mask.clone().unwrap_or_else(|| default_mask_path(&a.out));
        let mask = binarize(&prob, t)?;
        write_volume(&mask, &path)?;
        println!("mask at threshold {t} ({} foreground voxels) -> {}", mask.count_foreground(), path.display());
    }
    Ok(())
}

/// Volume file per case id in `dir`. A manifest, when present, names the
/// label files; otherwise every `*.vxsg` file counts, with the id being the
/// stem minus a `_mask`, `_prob` or `_label` suffix. `_image` files are
/// skipped. When several files map to one id, masks win over probability
/// maps, which win over labels.
pub fn discover_cases(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(anyhow!("{} is not a directory", dir.display()));
    }
    if dir.join(voxseg_core::phantom::MANIFEST_FILE).is_file() {
        return Ok(read_manifest(dir)?.into_iter().map(|r| (r.case, dir.join(r.label))).collect());
    }
    let mut found: BTreeMap<String, (u8, PathBuf)> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("vxsg") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if stem.ends_with("_image") {
            continue;
        }
        let (id, rank) = [("_mask", 0u8), ("_prob", 1), ("_label", 2)]
            .iter()
            .find_map(|(suf, r)| stem.strip_suffix(suf).map(|s| (s.to_string(), *r)))
            .unwrap_or((stem.clone(), 3));
        match found.get(&id) {
            Some((r, _)) if *r <= rank => {}
            _ => {
                found.insert(id, (rank, path));
            }
        }
    }
    Ok(found.into_iter().map(|(id, (_, p))| (id, p)).collect())
}

fn eval(a: &EvalArgs) -> CmdResult {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Failure::usage(anyhow!("--threshold must lie in (0, 1), got {}", a.threshold)));
    }
    let preds = discover_cases(&a.pred).map_err(Failure::usage)?;
    let gts = discover_cases(&a.gt).map_err(Failure::usage)?;
    let missing_pred: Vec<&str> = gts.keys().filter(|k| !preds.contains_key(*k)).map(String::as_str).collect();
    let missing_gt: Vec<&str> = preds.keys().filter(|k| !gts.contains_key(*k)).map(String::as_str).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut msg = String::from("case ids differ between directories");
        if !missing_pred.is_empty() {
            msg += &format!("\n  missing predictions: {}", missing_pred.join(", "));
        }
        if !missing_gt.is_empty() {
            msg += &format!("\n  missing ground truth: {}", missing_gt.join(", "));
        }
        return Err(Failure::usage(anyhow!(msg)));
    }
    let mut entries = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let gt = read_volume(gt_path).with_context(|| format!("reading {}", gt_path.display()))?;
        let pred = read_volume(&preds[id]).with_context(|| format!("reading {}", preds[id].display()))?;
        let pred = match pred.kind {
            VolumeKind::Label => pred,
            VolumeKind::Image => binarize(&pred, a.threshold)?,
        };
        let gt = match gt.kind {
            VolumeKind::Label => gt,
            VolumeKind::Image => binarize(&gt, a.threshold)?,
        };
        entries.push(evaluate_case(id, &pred, &gt).with_context(|| format!("case {id}"))?);
    }
    let report = cohort_report(&entries)?;
    print!("{}", report.table(&a.method));
    let path = a.report.clone().unwrap_or_else(|| a.pred.join("metrics.tsv"));
    std::fs::write(&path, report.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
    println!("per-case report -> {}", path.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let opts = SuiteOptions { seed: a.seed, tolerance: a.tolerance, inject_fault: a.inject_fault.clone(), primitives_only: false };
    if let Some(t) = a.tolerance {
        if !(t >= 0.0) {
            return Err(Failure::usage(anyhow!("--tolerance must be non-negative")));
        }
    }
    let start = Instant::now();
    let reports = run_suite(&opts)?;
    let mut worst: Option<&voxseg_core::tensor::gradcheck::FdReport> = None;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict}  {:<18} max_rel_error {:.3e}  tolerance {:.0e}  probes {}", r.name, r.max_rel_error, r.tolerance, r.probes);
        if !r.passed() && worst.map_or(true, |w| r.max_rel_error / r.tolerance > w.max_rel_error / w.tolerance) {
            worst = Some(r);
        }
    }
    println!("{} checks in {:.1} s", reports.len(), start.elapsed().as_secs_f64());
    match worst {
        None => Ok(()),
        Some(w) => Err(Failure {
            code: EXIT_CHECK_FAILED,
            error: anyhow!(
                "gradient check failed; worst offender {} (max relative error {:.3e} > {:.0e} at tensor {}, element {})",
                w.name,
                w.max_rel_error,
                w.tolerance,
                w.worst.0,
                w.worst.1
            ),
        }),
    }
}
