//! Batch front end: `prepare` synthesizes leave-one-out cases from a shape
//! corpus, `sample` runs the chains, `evaluate` scores a run against ground
//! truth (including the gradient-descent baseline), and `report` re-renders
//! the report files from a stored run. Every sampling run writes a manifest
//! with the fully resolved configuration so it can be replayed bit-for-bit.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::align::{align_training_set, KernelRule, TrainingSet};
use crate::dataset::{
    leave_one_out_folds, load_shape_dir, synthesize_test, OccludeRect, TestCase, BACKGROUND,
    FOREGROUND,
};
use crate::energy::{ChanVeseParams, TargetMode};
use crate::eval::{emit_report, gd_baseline, ReportInputs};
use crate::gridio::{
    read_mask, read_scalar_csv, write_mask_png, write_scalar_csv, write_scalar_pgm,
};
use crate::sampler::{
    chain_seed, run_sampling, ChainConfig, ReverseEval, RunConfig, SampleRecord,
};
use crate::{Error, Result, ScalarField};

/// Fully resolved run parameters: built-in defaults overridden by the
/// config file overridden by flags. Serialized verbatim into the manifest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResolvedConfig {
    pub train_dir: String,
    pub case_dir: String,
    pub out_dir: String,
    pub samples: usize,
    pub iters: usize,
    pub gamma: usize,
    pub alpha: f64,
    /// Kernel size; absent means the mean nearest-neighbor rule.
    pub sigma: Option<f64>,
    pub beta_shape: f64,
    pub target: TargetMode,
    pub data_only_iters: usize,
    pub reinit_period: usize,
    pub epsilon: f64,
    pub local_priors: bool,
    pub patch_grid: Option<(usize, usize)>,
    pub reverse_eval: ReverseEval,
    pub seed: u64,
}

impl ResolvedConfig {
    fn chain_config(&self) -> Result<ChainConfig> {
        if self.local_priors && self.patch_grid.is_none() {
            return Err(Error::InvalidParameter(
                "--local-priors requires --patch-grid RxC".into(),
            ));
        }
        let cfg = ChainConfig {
            n_iters: self.iters,
            gamma: self.gamma,
            alpha: self.alpha,
            data_only_iters: self.data_only_iters,
            reinit_period: self.reinit_period,
            target_mode: self.target,
            beta_shape: self.beta_shape,
            chan_vese: ChanVeseParams::new(self.epsilon, 1.0, 1.0, 0.0)?,
            reverse_eval: self.reverse_eval,
            patch_grid: if self.local_priors { self.patch_grid } else { None },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn kernel_rule(&self) -> KernelRule {
        match self.sigma {
            Some(s) => KernelRule::Fixed(s),
            None => KernelRule::MeanNearestNeighbor,
        }
    }
}

#[derive(Parser)]
#[command(name = "mcmcseg", version, about = "Shape-sampling image segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Align a shape corpus and synthesize leave-one-out test cases.
    Prepare(PrepareArgs),
    /// Run sampling chains on a prepared case.
    Sample(SampleArgs),
    /// Score a completed run against ground truth, baseline included.
    Evaluate(EvaluateArgs),
    /// Re-render the report files of a completed run (no ground truth).
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    train_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Noise level of the synthesized images, in dB; omit for noiseless.
    #[arg(long)]
    snr_db: Option<f64>,
    /// Occlusion rectangle painted to background, as x,y,w,h.
    #[arg(long)]
    occlude: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Prepared case directory (image + meta).
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of chains / samples (one sample per chain).
    #[arg(long)]
    samples: Option<usize>,
    /// Sampling iterations per chain.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    beta_shape: Option<f64>,
    /// Sampling target: full or shape-only.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    data_only_iters: Option<usize>,
    #[arg(long)]
    local_priors: bool,
    /// Patch layout as RxC, e.g. 4x2.
    #[arg(long)]
    patch_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay a previous run from its manifest; other flags are ignored
    /// except --out.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `sample`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip the gradient-descent baseline row.
    #[arg(long)]
    no_baseline: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Entry point shared by the binary and the test suite.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        // --help / --version are not errors; print and finish
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::InvalidParameter(e.to_string())),
    };
    match cli.cmd {
        Cmd::Prepare(a) => cmd_prepare(&a),
        Cmd::Sample(a) => cmd_sample(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::Report(a) => cmd_report(&a),
    }
}

// ---------------------------------------------------------------------------
// config resolution

fn read_kv_config(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::dataset(
                path.display().to_string(),
                format!("line {}: expected key=value", lineno + 1),
            )
        })?;
        // keys mirror flag names; dashes and underscores are interchangeable
        map.insert(key.trim().replace('-', "_"), value.trim().to_string());
    }
    Ok(map)
}

fn parse_key<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::InvalidParameter(format!("bad value for {key}: {raw:?}"))),
    }
}

fn parse_patch_grid(raw: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidParameter(format!("patch grid must be RxC, got {raw:?}"));
    let (r, c) = raw.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn parse_occlude(raw: &str) -> Result<OccludeRect> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let bad = || Error::InvalidParameter(format!("occlusion must be x,y,w,h, got {raw:?}"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let nums: Vec<usize> =
        parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
    Ok(OccludeRect { x: nums[0], y: nums[1], width: nums[2], height: nums[3] })
}

fn parse_target(raw: &str) -> Result<TargetMode> {
    match raw.replace('-', "_").as_str() {
        "full" => Ok(TargetMode::Full),
        "shape_only" => Ok(TargetMode::ShapeOnly),
        other => Err(Error::InvalidParameter(format!(
            "target must be full or shape-only, got {other:?}"
        ))),
    }
}

fn resolve_sample_config(args: &SampleArgs) -> Result<ResolvedConfig> {
    let file = match &args.config {
        Some(p) => read_kv_config(p)?,
        None => HashMap::new(),
    };
    let require = |flag: Option<String>, file_val: Option<String>, name: &str| {
        flag.or(file_val)
            .ok_or_else(|| Error::InvalidParameter(format!("--{name} is required")))
    };

    let target = match args
        .target
        .clone()
        .or_else(|| file.get("target").cloned())
    {
        Some(raw) => parse_target(&raw)?,
        None => TargetMode::Full,
    };
    let patch_grid = match args
        .patch_grid
        .clone()
        .or_else(|| file.get("patch_grid").cloned())
    {
        Some(raw) => Some(parse_patch_grid(&raw)?),
        None => None,
    };
    let defaults = ChainConfig::default();
    Ok(ResolvedConfig {
        train_dir: require(
            args.train_dir.as_ref().map(|p| p.display().to_string()),
            file.get("train_dir").cloned(),
            "train-dir",
        )?,
        case_dir: require(
            args.case.as_ref().map(|p| p.display().to_string()),
            file.get("case").cloned(),
            "case",
        )?,
        out_dir: require(
            args.out.as_ref().map(|p| p.display().to_string()),
            file.get("out").cloned(),
            "out",
        )?,
        samples: args.samples.or(parse_key(&file, "samples")?).unwrap_or(50),
        iters: args.iters.or(parse_key(&file, "iters")?).unwrap_or(defaults.n_iters),
        gamma: args.gamma.or(parse_key(&file, "gamma")?).unwrap_or(defaults.gamma),
        alpha: args.alpha.or(parse_key(&file, "alpha")?).unwrap_or(defaults.alpha),
        sigma: args.sigma.or(parse_key(&file, "sigma")?),
        beta_shape: args
            .beta_shape
            .or(parse_key(&file, "beta_shape")?)
            .unwrap_or(defaults.beta_shape),
        target,
        data_only_iters: args
            .data_only_iters
            .or(parse_key(&file, "data_only_iters")?)
            .unwrap_or(defaults.data_only_iters),
        reinit_period: parse_key(&file, "reinit_period")?.unwrap_or(defaults.reinit_period),
        epsilon: parse_key(&file, "epsilon")?.unwrap_or(1.5),
        local_priors: args.local_priors
            || parse_key::<bool>(&file, "local_priors")?.unwrap_or(false),
        patch_grid,
        reverse_eval: defaults.reverse_eval,
        seed: args.seed.or(parse_key(&file, "seed")?).unwrap_or(0),
    })
}

// ---------------------------------------------------------------------------
// prepare

#[derive(serde::Serialize, serde::Deserialize)]
struct CaseMeta {
    id: String,
    /// Shape excluded from the training set when sampling this case.
    exclude_id: String,
    class_name: String,
    snr_db: Option<f64>,
    occlusion: Option<OccludeRect>,
    fg: f64,
    bg: f64,
    seed: u64,
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::dataset(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::dataset(path.display().to_string(), e.to_string()))
}

fn write_case(dir: &Path, case: &TestCase, meta: &CaseMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_scalar_pgm(&dir.join("image.pgm"), &case.image)?;
    // exact float values for replay; the PGM is a scaled view
    write_scalar_csv(&dir.join("image.csv"), &case.image)?;
    write_mask_png(&dir.join("gt.png"), &case.truth)?;
    write_json(&dir.join("meta.json"), meta)
}

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let occlusion = args.occlude.as_deref().map(parse_occlude).transpose()?;
    // load and validate everything before the first write so a bad input
    // leaves no partial output tree
    let raw = load_shape_dir(&args.train_dir)?;
    let ts = align_training_set(&raw, KernelRule::MeanNearestNeighbor)?;
    let folds = leave_one_out_folds(&raw)?;

    let out = &args.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let aligned_dir = out.join("aligned");
    std::fs::create_dir_all(&aligned_dir)
        .map_err(|e| Error::io(aligned_dir.display().to_string(), e))?;
    let mut alignment_csv = String::from("id,class,tx,ty,theta,log_scale\n");
    for shape in ts.shapes() {
        let p = &shape.pose_from_raw;
        alignment_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            shape.id,
            ts.class_name(shape.class_id),
            p.tx,
            p.ty,
            p.theta,
            p.log_scale
        ));
        write_mask_png(&aligned_dir.join(format!("{}.png", sanitize(&shape.id))), &shape.mask)?;
    }
    let csv_path = out.join("alignment.csv");
    std::fs::write(&csv_path, alignment_csv)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    write_json(
        &out.join("prepare.json"),
        &serde_json::json!({
            "train_dir": args.train_dir.display().to_string(),
            "sigma": ts.kernel().sigma,
            "reference_id": ts.reference_id(),
            "n_shapes": ts.n_shapes(),
            "snr_db": args.snr_db,
            "occlusion": occlusion,
            "seed": args.seed,
        }),
    )?;

    for (fold_idx, fold) in folds.iter().enumerate() {
        let case = synthesize_test(
            &fold.held_out.mask,
            occlusion,
            args.snr_db,
            FOREGROUND,
            BACKGROUND,
            args.seed ^ fold_idx as u64,
        )?;
        let meta = CaseMeta {
            id: fold.held_out.id.clone(),
            exclude_id: fold.held_out.id.clone(),
            class_name: fold.held_out.class_name.clone(),
            snr_db: case.snr_db,
            occlusion: case.occlusion,
            fg: case.fg,
            bg: case.bg,
            seed: args.seed ^ fold_idx as u64,
        };
        write_case(&out.join("cases").join(sanitize(&fold.held_out.id)), &case, &meta)?;
    }
    println!("prepared {} cases in {}", folds.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

fn load_case_image(case_dir: &Path) -> Result<ScalarField> {
    let csv = case_dir.join("image.csv");
    if csv.exists() {
        read_scalar_csv(&csv)
    } else {
        // fall back to the 8-bit view
        Ok(read_mask(&case_dir.join("image.pgm"))?.map(|&b| if b { 255.0 } else { 0.0 }))
    }
}

fn load_training(cfg: &ResolvedConfig) -> Result<TrainingSet> {
    let mut raw = load_shape_dir(Path::new(&cfg.train_dir))?;
    let meta_path = Path::new(&cfg.case_dir).join("meta.json");
    if meta_path.exists() {
        let meta: CaseMeta = read_json(&meta_path)?;
        raw.retain(|s| s.id != meta.exclude_id);
        if raw.is_empty() {
            return Err(Error::EmptyInput("training set empty after exclusion"));
        }
    }
    align_training_set(&raw, cfg.kernel_rule())
}

/// Everything needed to replay or evaluate a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub config: ResolvedConfig,
    pub kernel_sigma: f64,
    pub chain_seeds: Vec<u64>,
    pub chains: Vec<ChainSummary>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainSummary {
    pub chain_id: usize,
    pub class_id: usize,
    pub accept_count: usize,
    pub selection_digest: u64,
    pub any_fallback: bool,
    pub any_nonfinite: bool,
    pub final_e_data: f64,
    pub final_e_shape: f64,
    pub final_e_total: f64,
}

fn summarize(records: &[SampleRecord]) -> Vec<ChainSummary> {
    records
        .iter()
        .map(|r| {
            let last = r.trace.last();
            ChainSummary {
                chain_id: r.chain_id,
                class_id: r.class_id,
                accept_count: r.accept_count,
                selection_digest: r.selection_digest,
                any_fallback: r.any_fallback,
                any_nonfinite: r.any_nonfinite,
                final_e_data: last.map_or(f64::NAN, |t| t.e_data),
                final_e_shape: last.map_or(f64::NAN, |t| t.e_shape),
                final_e_total: last.map_or(f64::NAN, |t| t.e_total),
            }
        })
        .collect()
}

/// Runs a resolved configuration end to end and writes samples, traces,
/// records and the manifest into the configured output directory.
pub fn run_from_config(cfg: &ResolvedConfig) -> Result<()> {
    let chain = cfg.chain_config()?;
    let ts = load_training(cfg)?;
    let image = load_case_image(Path::new(&cfg.case_dir))?;
    let run = RunConfig { chain, n_chains: cfg.samples, seed: cfg.seed };
    let records = run_sampling(&image, &ts, &run)?;

    let out = Path::new(&cfg.out_dir);
    let samples_dir = out.join("samples");
    std::fs::create_dir_all(&samples_dir)
        .map_err(|e| Error::io(samples_dir.display().to_string(), e))?;
    for r in &records {
        write_mask_png(&samples_dir.join(format!("chain_{}.png", r.chain_id)), &r.mask)?;
        let mut trace = String::from("iter,accepted,forced,log_ratio,e_data,e_shape,e_total\n");
        for t in &r.trace {
            trace.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.iter, t.accepted as u8, t.forced as u8, t.log_ratio, t.e_data, t.e_shape,
                t.e_total
            ));
        }
        let trace_path = out.join(format!("trace_{}.csv", r.chain_id));
        std::fs::write(&trace_path, trace)
            .map_err(|e| Error::io(trace_path.display().to_string(), e))?;
    }
    write_json(&out.join("records.json"), &records)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        kernel_sigma: ts.kernel().sigma,
        chain_seeds: (0..cfg.samples).map(|i| chain_seed(cfg.seed, i)).collect(),
        chains: summarize(&records),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} samples to {} (accept rates {:.2}..{:.2})",
        records.len(),
        out.display(),
        records
            .iter()
            .map(|r| r.accept_count as f64 / r.trace.len().max(1) as f64)
            .fold(f64::INFINITY, f64::min),
        records
            .iter()
            .map(|r| r.accept_count as f64 / r.trace.len().max(1) as f64)
            .fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let cfg = match &args.manifest {
        Some(path) => {
            let manifest: RunManifest = read_json(path)?;
            let mut cfg = manifest.config;
            if let Some(out) = &args.out {
                cfg.out_dir = out.display().to_string();
            }
            cfg
        }
        None => resolve_sample_config(args)?,
    };
    run_from_config(&cfg)
}

// ---------------------------------------------------------------------------
// evaluate / report

fn load_run(run_dir: &Path) -> Result<(RunManifest, Vec<SampleRecord>)> {
    let manifest: RunManifest = read_json(&run_dir.join("manifest.json"))?;
    let records: Vec<SampleRecord> = read_json(&run_dir.join("records.json"))?;
    if records.is_empty() {
        return Err(Error::EmptyInput("run contains no samples"));
    }
    Ok((manifest, records))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (manifest, records) = load_run(&args.run)?;
    let cfg = &manifest.config;
    let case_dir = Path::new(&cfg.case_dir);
    let truth = read_mask(&case_dir.join("gt.png"))?;
    let image = load_case_image(case_dir)?;
    let ts = load_training(cfg)?;
    let baseline = if args.no_baseline {
        None
    } else {
        Some(gd_baseline(&image, &ts, &cfg.chain_config()?)?)
    };
    emit_report(
        &args.out,
        &ReportInputs {
            samples: &records,
            image: &image,
            truth: Some(&truth),
            n_classes: ts.n_classes(),
            bounds: (0.1, 0.9),
            baseline: baseline.as_ref(),
        },
    )?;
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let (manifest, records) = load_run(&args.run)?;
    let image = load_case_image(Path::new(&manifest.config.case_dir))?;
    let n_classes = records.iter().map(|r| r.class_id).max().unwrap_or(0) + 1;
    emit_report(
        &args.out,
        &ReportInputs {
            samples: &records,
            image: &image,
            truth: None,
            n_classes,
            bounds: (0.1, 0.9),
            baseline: None,
        },
    )?;
    println!("report written to {}", args.out.display());
    Ok(())
}
