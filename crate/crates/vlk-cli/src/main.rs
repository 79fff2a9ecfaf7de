//! `vlk`: command-line front end for the vessel labeling toolkit.
//!
//! Machine-readable JSON goes to stdout, human summaries to stderr. Every
//! report echoes the full configuration (flags, seeds, version) needed to
//! reproduce it. Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vlk_core::labeling::assign_voxel_labels;
use vlk_core::metrics::{asd, class_mask, dice_labels};
use vlk_core::phantom::{
    default_cow_spec, generate_phantom, read_centerlines, read_phantom_spec,
    write_centerlines, write_phantom_spec,
};
use vlk_core::predictor::{OraclePredictor, Predictor, SubprocessPredictor};
use vlk_core::preprocess::{extract_patch, plan_patches, scale_crop_to_target};
use vlk_core::stats::{
    bland_altman, downsample2_labels, downsample2_mean, region_mean,
    wilcoxon_signed_rank, BlandAltman,
};
use vlk_core::transforms::{inversion_experiment, misassigned_fraction, SummaryStats};
use vlk_core::uncertainty::{consensus_and_uncertainty, run_tta, InversionMode};
use vlk_core::{read_volume, write_volume, ClassMap, Error, Result, Volume};

#[derive(Parser)]
#[command(name = "vlk", version, about = "Vessel labeling toolkit", max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic vascular phantom: segmentation, centerlines, velocity field
    Phantom(PhantomArgs),
    /// Assign per-voxel vessel labels from a segmentation and labeled centerlines
    MakeLabels(MakeLabelsArgs),
    /// Fixed-size scale/pad preprocessing or sliding-window patch planning
    Preprocess(PreprocessArgs),
    /// Test-time-augmented inference with consensus labels and uncertainty map
    Tta(TtaArgs),
    /// Dice and surface-distance evaluation of a label volume against ground truth
    Eval(EvalArgs),
    /// Round-trip inversion accuracy experiment over sampled transforms
    AppendixA(AppendixAArgs),
    /// Bland-Altman and signed-rank agreement analysis of paired measurements
    Agree(AgreeArgs),
    /// End-to-end run: phantom, labels, TTA, evaluation, velocity agreement
    Pipeline(PipelineArgs),
}

/// "96" for a cube or "96,64,64".
fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"));
    match parts.as_slice() {
        [one] => {
            let v = parse(one)?;
            Ok([v, v, v])
        }
        [x, y, z] => Ok([parse(x)?, parse(y)?, parse(z)?]),
        _ => Err(format!("expected one value or x,y,z, got {s:?}")),
    }
}

#[derive(Args, Serialize)]
struct PhantomArgs {
    /// Volume dimensions: cube size or x,y,z
    #[arg(long, value_parser = parse_triple, default_value = "96")]
    dims: [usize; 3],
    /// Geometry jitter seed
    #[arg(long)]
    seed: u64,
    /// Output stem; writes <stem>_seg.{json,raw}, <stem>_velocity.{json,raw},
    /// <stem>_centerlines.json
    #[arg(long)]
    out_prefix: PathBuf,
    /// Generate from an explicit spec file instead of the built-in geometry
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Also write the effective spec as JSON
    #[arg(long)]
    spec_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MakeLabelsArgs {
    /// Binary segmentation volume stem
    #[arg(long)]
    seg: PathBuf,
    /// Labeled centerlines JSON
    #[arg(long)]
    centerlines: PathBuf,
    /// Output label volume stem
    #[arg(long)]
    out: PathBuf,
    /// Cubic neighborhood edge length (odd)
    #[arg(long, default_value_t = 7)]
    neighborhood: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PreprocessMode {
    Fixed,
    Patches,
}

#[derive(Args, Serialize)]
struct PreprocessArgs {
    #[arg(long, value_enum)]
    mode: PreprocessMode,
    /// Input label volume stem
    #[arg(long)]
    seg: PathBuf,
    /// Output stem (fixed mode volume, patches mode patch files)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed-mode target dims
    #[arg(long, value_parser = parse_triple, default_value = "128,256,256")]
    target: [usize; 3],
    /// Patch dims
    #[arg(long, value_parser = parse_triple, default_value = "80,224,160")]
    patch: [usize; 3],
    /// Patch stride as a fraction of patch size
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// Write the patch volumes, not only the plan
    #[arg(long)]
    emit_patches: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CliInversionMode {
    Standard,
    CoordinateGuided,
}

impl From<CliInversionMode> for InversionMode {
    fn from(m: CliInversionMode) -> Self {
        match m {
            CliInversionMode::Standard => InversionMode::Standard,
            CliInversionMode::CoordinateGuided => InversionMode::CoordinateGuided,
        }
    }
}

#[derive(Args, Serialize)]
struct TtaArgs {
    /// Binary segmentation volume stem
    #[arg(long)]
    seg: PathBuf,
    /// `oracle` or a shell command template containing {in} and {out}
    #[arg(long)]
    predictor: String,
    /// Labeled centerlines JSON (required by the oracle predictor)
    #[arg(long)]
    centerlines: Option<PathBuf>,
    /// Number of augmented predictions
    #[arg(long, default_value_t = 7)]
    k: u32,
    /// Transform sampling seed
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CliInversionMode::CoordinateGuided)]
    mode: CliInversionMode,
    /// Oracle neighborhood edge length
    #[arg(long, default_value_t = 7)]
    neighborhood: usize,
    /// Consensus label volume stem
    #[arg(long)]
    out_labels: PathBuf,
    /// Uncertainty map stem
    #[arg(long)]
    out_uncertainty: PathBuf,
    /// Scratch directory for subprocess predictor exchange files
    #[arg(long)]
    scratch: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Predicted label volume stem
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label volume stem
    #[arg(long)]
    gt: PathBuf,
    /// Include background and non-annotated classes in the per-class tables
    #[arg(long)]
    per_class: bool,
    /// Accepted for script compatibility; output is always JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args, Serialize)]
struct AppendixAArgs {
    /// Binary segmentation volume stem (support of the labels)
    #[arg(long)]
    seg: PathBuf,
    /// Label volume stem to round-trip
    #[arg(long)]
    labels: PathBuf,
    /// Number of sampled transforms
    #[arg(long, default_value_t = 100)]
    n: u32,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct AgreeArgs {
    /// CSV with header vessel,manual,auto
    #[arg(long)]
    pairs: PathBuf,
    /// Require percent-of-mean statistics (fails on zero pair means)
    #[arg(long)]
    percent: bool,
    /// Accepted for script compatibility; output is always JSON
    #[arg(long)]
    json: bool,
    /// Write scatter data (vessel, pair mean, difference) as CSV
    #[arg(long)]
    scatter_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    #[arg(long, value_parser = parse_triple, default_value = "96")]
    dims: [usize; 3],
    /// Seed for phantom geometry and transform sampling
    #[arg(long)]
    seed: u64,
    /// Number of augmented predictions
    #[arg(long, default_value_t = 7)]
    k: u32,
    #[arg(long, value_enum, default_value_t = CliInversionMode::CoordinateGuided)]
    mode: CliInversionMode,
    /// `oracle` or a shell command template containing {in} and {out}
    #[arg(long, default_value = "oracle")]
    predictor: String,
    #[arg(long, default_value_t = 7)]
    neighborhood: usize,
    /// Write intermediate volumes here
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Scratch directory for subprocess predictor exchange files
    #[arg(long)]
    scratch: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    let outcome = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::MakeLabels(a) => cmd_make_labels(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Tta(a) => cmd_tta(a),
        Command::Eval(a) => cmd_eval(a),
        Command::AppendixA(a) => cmd_appendix_a(a),
        Command::Agree(a) => cmd_agree(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

/// VLK_THREADS caps internal parallelism; 0 or unset means auto.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("VLK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|e| Error::invalid(format!("VLK_THREADS={raw:?}: {e}")))?;
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn emit_report(command: &str, config: impl Serialize, result: impl Serialize) -> Result<()> {
    let report = serde_json::json!({
        "tool": "vlk",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": serde_json::to_value(config).map_err(json_err)?,
        "result": serde_json::to_value(result).map_err(json_err)?,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(json_err)?
    );
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::invalid(format!("report serialization: {e}"))
}

fn stem_paths(stem: &std::path::Path) -> (String, String) {
    let s = stem.display();
    (format!("{s}.json"), format!("{s}.raw"))
}

fn with_suffix(stem: &std::path::Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    stem.with_file_name(name)
}

fn label_counts(labels: &Volume) -> Result<BTreeMap<String, usize>> {
    let classes = ClassMap::circle_of_willis();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for &l in labels.u8_data()? {
        let name = classes
            .name(l)
            .map(str::to_string)
            .unwrap_or_else(|| format!("class-{l}"));
        *counts.entry(name).or_insert(0) += 1;
    }
    Ok(counts)
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => read_phantom_spec(path)?,
        None => default_cow_spec(args.dims, args.seed)?,
    };
    let (seg, lines, velocity) = generate_phantom(&spec)?;

    let seg_stem = with_suffix(&args.out_prefix, "_seg");
    let vel_stem = with_suffix(&args.out_prefix, "_velocity");
    let lines_path = with_suffix(&args.out_prefix, "_centerlines.json");
    write_volume(&seg, &seg_stem)?;
    write_volume(&velocity, &vel_stem)?;
    write_centerlines(&lines, &lines_path)?;
    if let Some(p) = &args.spec_out {
        write_phantom_spec(&spec, p)?;
    }

    let foreground = seg.u8_data()?.iter().filter(|&&v| v != 0).count();
    eprintln!(
        "phantom: {} segments, {} foreground voxels, {} centerline points",
        spec.segments.len(),
        foreground,
        lines.total_points()
    );
    emit_report(
        "phantom",
        &args,
        serde_json::json!({
            "dims": seg.dims(),
            "segments": spec.segments.len(),
            "foreground_voxels": foreground,
            "centerline_points": lines.total_points(),
            "outputs": {
                "seg": stem_paths(&seg_stem),
                "velocity": stem_paths(&vel_stem),
                "centerlines": lines_path.display().to_string(),
            },
        }),
    )
}

fn cmd_make_labels(args: MakeLabelsArgs) -> Result<()> {
    let seg = read_volume(&args.seg)?;
    let lines = read_centerlines(&args.centerlines)?;
    let labels = assign_voxel_labels(&seg, &lines, args.neighborhood)?;
    write_volume(&labels, &args.out)?;
    let counts = label_counts(&labels)?;
    eprintln!("make-labels: wrote {}", args.out.display());
    emit_report(
        "make-labels",
        &args,
        serde_json::json!({
            "dims": labels.dims(),
            "voxels_per_class": counts,
        }),
    )
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let seg = read_volume(&args.seg)?;
    match args.mode {
        PreprocessMode::Fixed => {
            let out_stem = args
                .out
                .clone()
                .ok_or_else(|| Error::invalid("--out is required in fixed mode"))?;
            let scaled = scale_crop_to_target(&seg, args.target)?;
            write_volume(&scaled, &out_stem)?;
            eprintln!(
                "preprocess fixed: {:?} -> {:?}",
                seg.dims(),
                scaled.dims()
            );
            emit_report(
                "preprocess",
                &args,
                serde_json::json!({
                    "input_dims": seg.dims(),
                    "output_dims": scaled.dims(),
                    "output_spacing_mm": scaled.spacing(),
                    "output": args.out.as_ref().map(|p| stem_paths(p)),
                }),
            )
        }
        PreprocessMode::Patches => {
            let plan = plan_patches(seg.dims(), args.patch, args.step)?;
            let mut written = Vec::new();
            if args.emit_patches {
                let out_stem = args
                    .out
                    .clone()
                    .ok_or_else(|| Error::invalid("--out is required with --emit-patches"))?;
                for (i, &offset) in plan.offsets.iter().enumerate() {
                    let patch = extract_patch(&seg, offset, plan.patch_dims)?;
                    let stem = with_suffix(&out_stem, &format!("_p{i:03}"));
                    write_volume(&patch, &stem)?;
                    written.push(stem.display().to_string());
                }
            }
            eprintln!(
                "preprocess patches: {} patches of {:?} over {:?}",
                plan.offsets.len(),
                plan.patch_dims,
                seg.dims()
            );
            emit_report(
                "preprocess",
                &args,
                serde_json::json!({
                    "input_dims": seg.dims(),
                    "plan": plan,
                    "patches_written": written,
                }),
            )
        }
    }
}

/// Builds the predictor named on the command line. Returns the subprocess
/// handle alongside so warnings can be collected after the run.
fn build_predictor(
    spec: &str,
    centerlines: Option<&PathBuf>,
    neighborhood: usize,
    scratch: Option<&PathBuf>,
) -> Result<(Box<dyn Predictor>, Option<SubprocessPredictor>)> {
    if spec == "oracle" {
        let path = centerlines.ok_or_else(|| {
            Error::invalid("--centerlines is required with the oracle predictor")
        })?;
        let lines = read_centerlines(path)?;
        let mut oracle = OraclePredictor::new(lines);
        oracle.neighborhood = neighborhood;
        return Ok((Box::new(oracle), None));
    }
    if !spec.contains("{in}") || !spec.contains("{out}") {
        return Err(Error::invalid(
            "predictor must be `oracle` or a command template with {in} and {out}",
        ));
    }
    let scratch_dir = match scratch {
        Some(dir) => dir.clone(),
        None => std::env::temp_dir().join(format!("vlk-scratch-{}", std::process::id())),
    };
    std::fs::create_dir_all(&scratch_dir).map_err(|e| Error::io(&scratch_dir, e))?;
    // one instance handed out for prediction, a twin kept for warning pickup:
    // both share the scratch dir but not counters, so stems must not collide
    let predictor = SubprocessPredictor::new(spec, &scratch_dir);
    Ok((Box::new(SubprocessPredictor::new(spec, &scratch_dir)), Some(predictor)))
}

fn cmd_tta(args: TtaArgs) -> Result<()> {
    let seg = read_volume(&args.seg)?;
    let (predictor, _twin) = build_predictor(
        &args.predictor,
        args.centerlines.as_ref(),
        args.neighborhood,
        args.scratch.as_ref(),
    )?;
    let stack = run_tta(&seg, predictor.as_ref(), args.k, args.seed, args.mode.into())?;
    let (labels, uncertainty) = consensus_and_uncertainty(&stack)?;
    write_volume(&labels, &args.out_labels)?;
    write_volume(&uncertainty, &args.out_uncertainty)?;

    let seg_data = seg.u8_data()?;
    let unc = uncertainty.f32_data()?;
    let mut fg = 0usize;
    let mut nonzero = 0usize;
    let mut sum = 0.0f64;
    let mut max = 0.0f32;
    for i in 0..unc.len() {
        if seg_data[i] == 0 {
            continue;
        }
        fg += 1;
        sum += unc[i] as f64;
        max = max.max(unc[i]);
        nonzero += (unc[i] > 0.0) as usize;
    }
    let mean_fg = if fg > 0 { sum / fg as f64 } else { 0.0 };
    eprintln!(
        "tta: k={} mean foreground uncertainty {:.4}, {:.1}% voxels uncertain",
        args.k,
        mean_fg,
        100.0 * nonzero as f64 / fg.max(1) as f64
    );
    emit_report(
        "tta",
        &args,
        serde_json::json!({
            "transforms": stack.transforms,
            "voxels_per_class": label_counts(&labels)?,
            "uncertainty": {
                "foreground_mean": mean_fg,
                "max": max,
                "foreground_nonzero_fraction": nonzero as f64 / fg.max(1) as f64,
            },
            "outputs": {
                "labels": stem_paths(&args.out_labels),
                "uncertainty": stem_paths(&args.out_uncertainty),
            },
        }),
    )
}

#[derive(Serialize)]
struct ClassEval {
    dice: f64,
    asd_mm: Option<f64>,
}

/// Dice and surface distance per class plus vessel means (classes 1-9).
fn evaluate_labels(
    pred: &Volume,
    gt: &Volume,
    include_special: bool,
) -> Result<serde_json::Value> {
    let classes = ClassMap::circle_of_willis();
    let ids: Vec<u8> = if include_special {
        (0..=10).collect()
    } else {
        (1..=9).collect()
    };
    let mut per_class = BTreeMap::new();
    let mut vessel_dice = Vec::new();
    let mut vessel_asd = Vec::new();
    for &c in &ids {
        let dice = dice_labels(pred, gt, c)?;
        // surface distance is undefined when either region is empty
        let asd_mm = asd(&class_mask(pred, c)?, &class_mask(gt, c)?, gt.spacing()).ok();
        if (1..=9).contains(&c) {
            vessel_dice.push(dice);
            if let Some(a) = asd_mm {
                vessel_asd.push(a);
            }
        }
        per_class.insert(
            classes.name(c).unwrap_or("?").to_string(),
            ClassEval { dice, asd_mm },
        );
    }
    let mean_dice = vessel_dice.iter().sum::<f64>() / vessel_dice.len().max(1) as f64;
    let mean_asd = if vessel_asd.is_empty() {
        None
    } else {
        Some(vessel_asd.iter().sum::<f64>() / vessel_asd.len() as f64)
    };
    Ok(serde_json::json!({
        "per_class": per_class,
        "mean_vessel_dice": mean_dice,
        "mean_vessel_asd_mm": mean_asd,
    }))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred = read_volume(&args.pred)?;
    let gt = read_volume(&args.gt)?;
    let eval = evaluate_labels(&pred, &gt, args.per_class)?;
    eprintln!(
        "eval: mean vessel dice {:.4}",
        eval["mean_vessel_dice"].as_f64().unwrap_or(f64::NAN)
    );
    emit_report("eval", &args, eval)
}

fn cmd_appendix_a(args: AppendixAArgs) -> Result<()> {
    let seg = read_volume(&args.seg)?;
    let labels = read_volume(&args.labels)?;
    let report = inversion_experiment(&labels, &seg, args.n, args.seed)?;
    eprintln!(
        "inversion: standard {:.3}% vs coordinate-guided {:.3}% misassigned (mean), \
         coordinate-guided strictly lower in {}/{} trials",
        100.0 * report.standard.mean,
        100.0 * report.coordinate_guided.mean,
        report.coordinate_guided_strictly_lower,
        report.num_trials
    );
    emit_report("appendix-a", &args, report)
}

#[derive(Serialize)]
struct VesselAgreement {
    n: usize,
    mean_abs_diff: f64,
    native: BlandAltman,
    percent_of_mean: Option<BlandAltman>,
    wilcoxon_p: f64,
}

fn agreement_rows(pairs: &[(f64, f64)], require_percent: bool) -> Result<VesselAgreement> {
    let native = bland_altman(pairs, false)?;
    let percent = if require_percent {
        Some(bland_altman(pairs, true)?)
    } else {
        bland_altman(pairs, true).ok()
    };
    let mean_abs_diff =
        pairs.iter().map(|&(m, a)| (a - m).abs()).sum::<f64>() / pairs.len() as f64;
    Ok(VesselAgreement {
        n: pairs.len(),
        mean_abs_diff,
        native,
        percent_of_mean: percent,
        wilcoxon_p: wilcoxon_signed_rank(pairs)?,
    })
}

fn cmd_agree(args: AgreeArgs) -> Result<()> {
    let mut reader = csv::Reader::from_path(&args.pairs)
        .map_err(|e| Error::invalid(format!("{}: {e}", args.pairs.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .clone();
    let want = ["vessel", "manual", "auto"];
    let idx: Vec<usize> = want
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::invalid(format!("csv is missing a {name:?} column")))
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid(format!("csv row: {e}")))?;
        let vessel = record.get(idx[0]).unwrap_or("").to_string();
        let parse = |i: usize, what: &str| -> Result<f64> {
            record
                .get(idx[i])
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("{what} in row {record:?}: {e}")))
        };
        let manual = parse(1, "manual value")?;
        let auto = parse(2, "auto value")?;
        groups.entry(vessel).or_default().push((manual, auto));
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("no data rows in pairs csv".into()));
    }

    let mut vessels = BTreeMap::new();
    let mut pooled = Vec::new();
    for (vessel, pairs) in &groups {
        vessels.insert(vessel.clone(), agreement_rows(pairs, args.percent)?);
        pooled.extend_from_slice(pairs);
    }
    let overall = agreement_rows(&pooled, args.percent)?;

    if let Some(path) = &args.scatter_out {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        w.write_record(["vessel", "pair_mean", "difference"])
            .map_err(|e| Error::invalid(format!("scatter csv: {e}")))?;
        for (vessel, pairs) in &groups {
            for &(m, a) in pairs {
                w.write_record([
                    vessel.as_str(),
                    &format!("{}", 0.5 * (m + a)),
                    &format!("{}", a - m),
                ])
                .map_err(|e| Error::invalid(format!("scatter csv: {e}")))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }

    for (vessel, row) in &vessels {
        eprintln!(
            "{vessel}: n={} bias {:+.4} loa width {:.4} p={:.4}",
            row.n, row.native.bias, row.native.loa_width, row.wilcoxon_p
        );
    }
    emit_report(
        "agree",
        &args,
        serde_json::json!({ "vessels": vessels, "overall": overall }),
    )
}

#[derive(Serialize)]
struct VesselVelocity {
    manual_cm_s: f64,
    auto_cm_s: Option<f64>,
    percent_difference: Option<f64>,
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let spec = default_cow_spec(args.dims, args.seed)?;
    let (seg, lines, velocity) = generate_phantom(&spec)?;
    let gt_labels = assign_voxel_labels(&seg, &lines, args.neighborhood)?;
    eprintln!(
        "pipeline: phantom {:?}, {} foreground voxels",
        args.dims,
        seg.u8_data()?.iter().filter(|&&v| v != 0).count()
    );

    // the oracle needs no centerline file here; it gets them in memory
    let (predictor, _twin): (Box<dyn Predictor>, _) = if args.predictor == "oracle" {
        let mut oracle = OraclePredictor::new(lines.clone());
        oracle.neighborhood = args.neighborhood;
        (Box::new(oracle), None)
    } else {
        build_predictor(&args.predictor, None, args.neighborhood, args.scratch.as_ref())?
    };

    let stack = run_tta(&seg, predictor.as_ref(), args.k, args.seed, args.mode.into())?;
    let per_layer: Vec<f64> = stack
        .layers
        .iter()
        .map(|layer| misassigned_fraction(&gt_labels, layer))
        .collect::<Result<_>>()?;
    let (consensus, uncertainty) = consensus_and_uncertainty(&stack)?;
    eprintln!(
        "pipeline: tta k={} mean per-layer misassignment {:.4}%",
        args.k,
        100.0 * per_layer.iter().sum::<f64>() / per_layer.len() as f64
    );

    let eval = evaluate_labels(&consensus, &gt_labels, false)?;
    eprintln!(
        "pipeline: mean vessel dice {:.4}",
        eval["mean_vessel_dice"].as_f64().unwrap_or(f64::NAN)
    );

    // velocity agreement at halved resolution, consensus vs ground truth
    let vel_ds = downsample2_mean(&velocity)?;
    let gt_ds = downsample2_labels(&gt_labels)?;
    let auto_ds = downsample2_labels(&consensus)?;
    let classes = ClassMap::circle_of_willis();
    let mut velocities = BTreeMap::new();
    let mut pairs = Vec::new();
    for c in 1..=9u8 {
        let manual = region_mean(&vel_ds, &gt_ds, c)?;
        let auto = region_mean(&vel_ds, &auto_ds, c).ok();
        if let Some(a) = auto {
            pairs.push((manual, a));
        }
        velocities.insert(
            classes.name(c).unwrap_or("?").to_string(),
            VesselVelocity {
                manual_cm_s: manual,
                auto_cm_s: auto,
                percent_difference: auto.map(|a| 100.0 * (a - manual) / manual),
            },
        );
    }
    let agreement = if pairs.len() >= 2 {
        Some(agreement_rows(&pairs, false)?)
    } else {
        None
    };
    if let Some(a) = &agreement {
        eprintln!(
            "pipeline: velocity bias {:+.4} cm/s, wilcoxon p {:.4}",
            a.native.bias, a.wilcoxon_p
        );
    }

    let unc = uncertainty.f32_data()?;
    let seg_data = seg.u8_data()?;
    let fg: Vec<usize> = (0..unc.len()).filter(|&i| seg_data[i] != 0).collect();
    let mean_unc = fg.iter().map(|&i| unc[i] as f64).sum::<f64>() / fg.len().max(1) as f64;

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_volume(&seg, dir.join("seg"))?;
        write_volume(&velocity, dir.join("velocity"))?;
        write_volume(&gt_labels, dir.join("gt_labels"))?;
        write_volume(&consensus, dir.join("consensus"))?;
        write_volume(&uncertainty, dir.join("uncertainty"))?;
        write_centerlines(&lines, dir.join("centerlines.json"))?;
    }

    emit_report(
        "pipeline",
        &args,
        serde_json::json!({
            "phantom": {
                "segments": spec.segments.len(),
                "foreground_voxels": fg.len(),
                "centerline_points": lines.total_points(),
            },
            "ground_truth_voxels_per_class": label_counts(&gt_labels)?,
            "tta": {
                "transforms": stack.transforms,
                "per_layer_misassignment": per_layer,
                "misassignment_summary": SummaryStats::of(&per_layer),
                "mean_foreground_uncertainty": mean_unc,
            },
            "eval": eval,
            "velocity_agreement": {
                "per_vessel_cm_s": velocities,
                "summary": agreement,
            },
        }),
    )
}
