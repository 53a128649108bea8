use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsvr_core::field::render_volume;
use gsvr_core::io::{
    case_path, config_to_toml, export_cross_sections, parse_config_with, parse_protocol, preset, protocol_preset, read_gaussians, read_manifest,
    read_run_log_config, read_stack, read_transforms, read_volume, records_to_transforms, transform_records, write_adam, write_atomic,
    write_gaussians, write_manifest, write_metrics_report, write_run_log, write_stack, write_transforms, write_volume, CaseFiles, CaseManifest,
    MetricsReport, MANIFEST_VERSION,
};
use gsvr_core::metrics::evaluate_reconstruction;
use gsvr_core::optimizer::{reconstruct, ReconConfig};
use gsvr_core::phantom::{make_benchmark_case, make_phantom};
use gsvr_core::volume::GridSpec;
use gsvr_core::Error;

const STACKS: &str = "stacks.gstk";
const TRUTH_VOLUME: &str = "truth.gvol";
const TRUTH_GAUSSIANS: &str = "truth.ggau";
const TRUTH_TRANSFORMS: &str = "truth_transforms.json";
const MANIFEST: &str = "case.json";
const RECON_GAUSSIANS: &str = "recon.ggau";
const RECON_VOLUME: &str = "recon.gvol";
const RECON_TRANSFORMS: &str = "transforms.json";
const RUN_LOG: &str = "run_log.jsonl";
const EFFECTIVE_CONFIG: &str = "config.toml";
const CHECKPOINT: &str = "checkpoint.gadm";
const METRICS: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "gsvr", version, about = "Gaussian-primitive slice-to-volume reconstruction")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base preset when no config file (or no `preset` key in it) is given.
    #[arg(long, default_value = "paper", value_parser = ["paper", "desk"])]
    preset: String,
    /// TOML file overriding the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom, its motion and its slice stacks as a case bundle.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct a volume and per-slice motion from a case manifest or a GSTK file.
    Reconstruct {
        /// Case manifest (JSON) or stack file (.gstk).
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Keep slice transforms at their initial values.
        #[arg(long)]
        frozen_transforms: bool,
        /// Run only the final full-resolution stage.
        #[arg(long)]
        single_resolution: bool,
    },
    /// Compare a reconstruction with the ground truth of its case.
    Evaluate {
        /// Case manifest.
        case: PathBuf,
        /// Directory written by `reconstruct`.
        #[arg(long)]
        recon: PathBuf,
        /// Defaults to the reconstruction directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write central sagittal, coronal and axial cross-sections as PGM images.
    ExportSlices {
        /// Volume (.gvol) or primitive set (.ggau).
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Grid for rendering a primitive set (default: its support at --spacing).
        #[arg(long)]
        like: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        spacing: f64,
        /// Intensity window `lo,hi` (default: the volume's range).
        #[arg(long, value_parser = parse_window)]
        window: Option<(f64, f64)>,
    },
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err("expected finite lo < hi".into());
    }
    Ok((lo, hi))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Validation { .. } | Error::Shape(_) | Error::Format(_) => 3,
        Error::Diverged { .. } => 4,
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn simulate(common: &Common) -> Result<(), Error> {
    let protocol = match &common.config {
        Some(path) => parse_protocol(path, &common.preset)?,
        None => protocol_preset(&common.preset)?,
    };
    let seed = common.seed.unwrap_or(0);
    let phantom = make_phantom(protocol.phantom_kind, &protocol.phantom, protocol.volume_spacing, protocol.volume_dims, seed)?;
    let case = make_benchmark_case(&phantom, &protocol, seed)?;
    let dir = &common.out_dir;
    create_dir(dir)?;
    let kind = serde_json::to_value(protocol.phantom_kind).expect("kind serializes");
    let manifest = CaseManifest {
        format_version: MANIFEST_VERSION,
        case_id: format!("{}-seed{seed}", kind.as_str().unwrap_or("phantom")),
        phantom_kind: protocol.phantom_kind,
        phantom_seed: seed,
        seeds: case.seeds,
        protocol,
        files: CaseFiles {
            stacks: STACKS.into(),
            truth_volume: TRUTH_VOLUME.into(),
            truth_gaussians: case.truth_gaussians.as_ref().map(|_| TRUTH_GAUSSIANS.into()),
            truth_transforms: TRUTH_TRANSFORMS.into(),
        },
    };
    write_stack(&dir.join(STACKS), &case.stacks, Some(TRUTH_TRANSFORMS))?;
    write_volume(&dir.join(TRUTH_VOLUME), &case.truth_volume)?;
    if let Some(set) = &case.truth_gaussians {
        write_gaussians(&dir.join(TRUTH_GAUSSIANS), set)?;
    }
    write_transforms(&dir.join(TRUTH_TRANSFORMS), &transform_records(&case.stacks, &case.truth_transforms)?)?;
    write_manifest(&dir.join(MANIFEST), &manifest)?;
    println!(
        "case {}: {} stacks, {} slices -> {}",
        manifest.case_id,
        case.stacks.stacks.len(),
        case.stacks.n_slices(),
        dir.join(MANIFEST).display()
    );
    Ok(())
}

fn load_config(common: &Common) -> Result<ReconConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) if path.extension().is_some_and(|e| e == "jsonl") => read_run_log_config(path)?,
        Some(path) => parse_config_with(path, &common.preset)?,
        None => preset(&common.preset)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn is_stack_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gstk")
}

fn run_reconstruct(input: &Path, common: &Common, frozen: bool, single: bool) -> Result<(), Error> {
    let (stacks, grid) = if is_stack_file(input) {
        (read_stack(input)?, None)
    } else {
        let manifest = read_manifest(input)?;
        let stacks = read_stack(&case_path(input, &manifest.files.stacks))?;
        let truth = read_volume(&case_path(input, &manifest.files.truth_volume))?;
        (stacks, Some(truth.grid))
    };
    let mut cfg = load_config(common)?;
    if single {
        cfg = cfg.single_resolution();
    }
    if frozen {
        cfg = cfg.without_motion();
    }
    cfg.validate()?;
    let out = reconstruct(&stacks, &cfg)?;
    let dir = &common.out_dir;
    create_dir(dir)?;
    let grid = match grid {
        Some(g) => g,
        None => {
            let bounds = stacks.union_bounds().ok_or_else(|| Error::Shape("stacks have no slices".into()))?;
            GridSpec::covering(&bounds, cfg.volume_spacing)
        }
    };
    write_gaussians(&dir.join(RECON_GAUSSIANS), &out.gaussians)?;
    write_volume(&dir.join(RECON_VOLUME), &render_volume(&out.gaussians, &grid)?)?;
    write_transforms(&dir.join(RECON_TRANSFORMS), &transform_records(&stacks, &out.transforms)?)?;
    write_run_log(&dir.join(RUN_LOG), &cfg, &out)?;
    write_atomic(&dir.join(EFFECTIVE_CONFIG), config_to_toml(&cfg).as_bytes())?;
    write_adam(&dir.join(CHECKPOINT), &out.adam)?;
    println!(
        "{} primitives, {} iterations, loss {:.6} -> {:.6} -> {}",
        out.gaussians.len(),
        out.log.len(),
        out.initial_loss.total,
        out.final_loss.total,
        dir.display()
    );
    Ok(())
}

fn run_evaluate(case: &Path, recon: &Path, out_dir: &Path) -> Result<(), Error> {
    let manifest = read_manifest(case)?;
    let stacks = read_stack(&case_path(case, &manifest.files.stacks))?;
    let truth = read_volume(&case_path(case, &manifest.files.truth_volume))?;
    let truth_transforms = records_to_transforms(&stacks, &read_transforms(&case_path(case, &manifest.files.truth_transforms))?)?;
    let set = read_gaussians(&recon.join(RECON_GAUSSIANS))?;
    let estimate = records_to_transforms(&stacks, &read_transforms(&recon.join(RECON_TRANSFORMS))?)?;
    let evaluation = evaluate_reconstruction(&truth, &set, &stacks, Some(&truth_transforms), &estimate)?;
    let report = MetricsReport {
        case_id: manifest.case_id,
        evaluation,
    };
    create_dir(out_dir)?;
    write_metrics_report(&out_dir.join(METRICS), &report)?;
    let e = &report.evaluation;
    println!("case {}", report.case_id);
    println!("raw          psnr {:.2} dB  ssim {:.4}  nrmse {:.4}", e.raw.psnr, e.raw.ssim, e.raw.nrmse);
    println!("registered   psnr {:.2} dB  ssim {:.4}  nrmse {:.4}", e.registered.psnr, e.registered.ssim, e.registered.nrmse);
    if let Some(g) = &e.gauge_aligned {
        println!("gauge        psnr {:.2} dB  ssim {:.4}  nrmse {:.4}", g.psnr, g.ssim, g.nrmse);
    }
    if let (Some(before), Some(after)) = (&e.motion_initial, &e.motion) {
        println!(
            "motion       rotation median {:.3} -> {:.3} deg, translation median {:.3} -> {:.3} mm",
            before.rotation_deg.median, after.rotation_deg.median, before.translation_mm.median, after.translation_mm.median
        );
    }
    Ok(())
}

fn run_export(input: &Path, out_dir: &Path, like: Option<&Path>, spacing: f64, window: Option<(f64, f64)>) -> Result<(), Error> {
    let volume = if input.extension().is_some_and(|e| e == "ggau") {
        let set = read_gaussians(input)?;
        let grid = match like {
            Some(path) => read_volume(path)?.grid,
            None => {
                if !(spacing.is_finite() && spacing > 0.0) {
                    return Err(Error::Validation {
                        field: "spacing".into(),
                        reason: format!("must be > 0, got {spacing}"),
                    });
                }
                let bounds = set.support_bounds().ok_or_else(|| Error::Shape("primitive set is empty".into()))?;
                GridSpec::covering(&bounds, spacing)
            }
        };
        render_volume(&set, &grid)?
    } else {
        read_volume(input)?
    };
    create_dir(out_dir)?;
    let prefix = input.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    for path in export_cross_sections(&volume, out_dir, prefix, window)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::Reconstruct {
            input,
            common,
            frozen_transforms,
            single_resolution,
        } => run_reconstruct(input, common, *frozen_transforms, *single_resolution),
        Command::Evaluate { case, recon, out_dir } => run_evaluate(case, recon, out_dir.as_deref().unwrap_or(recon)),
        Command::ExportSlices {
            input,
            out_dir,
            like,
            spacing,
            window,
        } => run_export(input, out_dir, like.as_deref(), *spacing, *window),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
