//! Command-line driver wiring simulation, reconstruction, and evaluation into
//! reproducible runs. Every output directory carries a manifest sufficient to
//! re-run the command.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use fse_recon_core::error::Error as CoreError;
use fse_recon_core::linops::{EchoImages, EchoSeriesKSpace, SamplingMask, SensMaps};
use fse_recon_core::masking::gen_shuffling_mask;
use fse_recon_core::metrics::{fit_t2_map, nmse, nmse_map, nmse_per_echo, ssim_per_echo};
use fse_recon_core::phantom::{make_phantom, make_sens_maps, simulate_kspace};
use fse_recon_core::recon::{
    calib_lowres_maps, recon_shuffling, recon_ssdu_per_echo, recon_zero_filled, recon_zs_subspace,
    run_joint_pipeline, JointOptions,
};
use fse_recon_core::signal_model::{build_dictionary, build_subspace, fitting_t2_grid};
use fse_recon_core::{io as core_io, Cplx};
use ndarray::{Array2, Array3, Array4, Axis};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fse-recon", version, about = "Zero-shot subspace FSE reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phantom dataset: maps, full and undersampled k-space, manifest.
    Simulate {
        /// TOML configuration; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the phantom seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the fully sampled ACS line count (acceleration unchanged).
        #[arg(long)]
        center_lines: Option<usize>,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Reconstruct a simulated dataset with one method.
    Recon {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Method,
        /// Dataset directory produced by `simulate`.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed base.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of repeats (seeds seed, seed+1, ...).
        #[arg(long)]
        repeats: Option<usize>,
        /// Sensitivity maps for the non-joint methods.
        #[arg(long, value_enum, default_value_t = MapsSource::Truth)]
        maps: MapsSource,
        /// ACS lines available to the calibration surrogate.
        #[arg(long)]
        center_lines: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Score reconstruction runs against the simulated ground truth.
    Eval {
        /// Directory containing reconstruction run directories.
        #[arg(long, value_name = "DIR")]
        results: PathBuf,
        /// Dataset directory with the ground truth.
        #[arg(long, value_name = "DIR")]
        truth: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Method {
    ZeroFilled,
    Shuffling,
    Ssdu,
    ZsSub,
    ZsJoint,
}

impl Method {
    fn name(&self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero-filled",
            Method::Shuffling => "shuffling",
            Method::Ssdu => "ssdu",
            Method::ZsSub => "zs-sub",
            Method::ZsJoint => "zs-joint",
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum MapsSource {
    Truth,
    Calib,
}

enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidParameter(_) | CoreError::ShapeMismatch(_) => {
                CliError::Config(e.to_string())
            }
            CoreError::Numerical(_)
            | CoreError::DegeneratePartition(_)
            | CoreError::UndefinedLoss(_) => CliError::Numerical(e.to_string()),
            CoreError::Format { .. } | CoreError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            center_lines,
            force,
        } => cmd_simulate(config.as_deref(), &out, seed, center_lines, force),
        Command::Recon {
            config,
            method,
            input,
            out,
            seed,
            repeats,
            maps,
            center_lines,
            force,
        } => cmd_recon(
            config.as_deref(),
            method,
            &input,
            &out,
            seed,
            repeats,
            maps,
            center_lines,
            force,
        ),
        Command::Eval { results, truth } => cmd_eval(&results, &truth),
    };
    if let Err(e) = outcome {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(CliError::Config),
        None => Ok(RunConfig::default()),
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| CliError::Io(e.to_string()))?;
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn payload_digest(base: &Path) -> CliResult<String> {
    use sha2::Digest;
    let bytes =
        std::fs::read(base.with_extension("raw")).map_err(|e| CliError::Io(e.to_string()))?;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DatasetManifest {
    kind: String,
    acceleration: f64,
    noise_sigma: f64,
    config: RunConfig,
    digests: BTreeMap<String, String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RunManifest {
    kind: String,
    method: String,
    seed: u64,
    maps: String,
    center_lines: usize,
    final_training_loss: Option<f64>,
    config: RunConfig,
    dataset_digests: BTreeMap<String, String>,
}

fn save_complex(dir: &Path, name: &str, axes: &[&str], data: &ndarray::ArrayD<Cplx>) -> CliResult<()> {
    core_io::save_array(&dir.join(name), axes, data).map_err(CliError::from)
}

fn save_real(dir: &Path, name: &str, axes: &[&str], data: &ndarray::ArrayD<f64>) -> CliResult<()> {
    core_io::save_real_array(&dir.join(name), axes, data).map_err(CliError::from)
}

fn cmd_simulate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    center_lines: Option<usize>,
    force: bool,
) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.phantom.seed = s;
    }
    if let Some(c) = center_lines {
        cfg.acquisition.center_lines = c;
    }
    prepare_out_dir(out, force)?;

    let (w, h) = (cfg.phantom.width, cfg.phantom.height);
    let seq = cfg.sequence.params();
    let phantom = make_phantom(w, h, cfg.phantom.seed)?;
    let sens = make_sens_maps(cfg.coils.count, w, h, cfg.coils.seed)?;

    // Noiseless pass fixes the noise scale from the peak k-space magnitude.
    let (clean, truth) = simulate_kspace(&phantom, &seq, cfg.sequence.t1_ms, &sens, 0.0, 0)?;
    let peak = clean.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let sigma = cfg.phantom.noise_fraction * peak;
    let (y_full, _) = simulate_kspace(
        &phantom,
        &seq,
        cfg.sequence.t1_ms,
        &sens,
        sigma,
        cfg.phantom.seed ^ 0x4015E,
    )?;

    let acq = cfg.acquisition.spec(seq.echo_count, h);
    let mask = gen_shuffling_mask(&acq)?;
    let y_masked = y_full.with_mask(mask.clone())?;

    save_real(out, "phantom_t2", &["w", "h"], &phantom.t2_map.clone().into_dyn())?;
    save_real(out, "phantom_pd", &["w", "h"], &phantom.pd_map.clone().into_dyn())?;
    save_real(
        out,
        "support",
        &["w", "h"],
        &phantom.support.mapv(|b| b as u8 as f64).into_dyn(),
    )?;
    save_complex(out, "sens_maps", &["c", "w", "h"], &sens.data.clone().into_dyn())?;
    save_complex(out, "truth_images", &["t", "w", "h"], &truth.data.clone().into_dyn())?;
    save_complex(out, "kspace_full", &["t", "w", "h", "c"], &y_full.data.clone().into_dyn())?;
    save_complex(out, "kspace_masked", &["t", "w", "h", "c"], &y_masked.data.clone().into_dyn())?;
    save_real(
        out,
        "mask",
        &["t", "h"],
        &mask.lines().mapv(|b| b as u8 as f64).into_dyn(),
    )?;

    let mut digests = BTreeMap::new();
    for name in [
        "phantom_t2",
        "phantom_pd",
        "support",
        "sens_maps",
        "truth_images",
        "kspace_full",
        "kspace_masked",
        "mask",
    ] {
        digests.insert(name.to_string(), payload_digest(&out.join(name))?);
    }
    let manifest = DatasetManifest {
        kind: "dataset".into(),
        acceleration: acq.acceleration(),
        noise_sigma: sigma,
        config: cfg,
        digests,
    };
    std::fs::write(
        out.join("manifest.toml"),
        toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| CliError::Io(e.to_string()))?;

    for (tt, name) in [(0usize, "echo_first.png"), (seq.echo_count - 1, "echo_last.png")] {
        core_io::save_png_magnitude(
            &out.join(name),
            &truth.data.index_axis(Axis(0), tt).to_owned(),
        )?;
    }
    println!("dataset written to {}", out.display());
    Ok(())
}

struct Dataset {
    manifest: DatasetManifest,
    y: EchoSeriesKSpace,
    sens_truth: SensMaps,
    phi: Array2<Cplx>,
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.toml"))
        .map_err(|e| CliError::Config(format!("cannot read dataset manifest: {e}")))?;
    let manifest: DatasetManifest = toml::from_str(&manifest_text)
        .map_err(|e| CliError::Config(format!("bad dataset manifest: {e}")))?;
    let cfg = &manifest.config;

    let kspace = core_io::load_array_expecting(&dir.join("kspace_masked"), &["t", "w", "h", "c"])?;
    let kspace: Array4<Cplx> = kspace
        .into_dimensionality()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let mask_arr = core_io::load_array_expecting(&dir.join("mask"), &["t", "h"])?;
    let mask_arr: Array2<Cplx> = mask_arr
        .into_dimensionality()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let lines = mask_arr.mapv(|v| v.re > 0.5);
    let acq = cfg
        .acquisition
        .spec(cfg.sequence.echo_count, cfg.phantom.height);
    let mask = SamplingMask::new(lines, acq.acs_indices())?;
    let y = EchoSeriesKSpace::new(kspace, mask)?;

    let sens = core_io::load_array_expecting(&dir.join("sens_maps"), &["c", "w", "h"])?;
    let sens_truth = SensMaps {
        data: sens
            .into_dimensionality()
            .map_err(|e| CliError::Io(e.to_string()))?,
    };

    let seq = cfg.sequence.params();
    let grid = manifest.config.t2_grid().map_err(CliError::Config)?;
    let dict = build_dictionary(&seq, &grid, cfg.sequence.t1_ms)?;
    let basis = build_subspace(&dict, cfg.subspace.rank)?;

    Ok(Dataset {
        manifest,
        y,
        sens_truth,
        phi: basis.phi,
    })
}

fn write_loss_csv(path: &Path, trace: &[f64]) -> CliResult<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        text.push_str(&format!("{i},{l:.12e}\n"));
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(e.to_string()))
}

fn export_images(dir: &Path, images: &EchoImages) -> CliResult<()> {
    save_complex(dir, "images", &["t", "w", "h"], &images.data.clone().into_dyn())?;
    let t = images.data.dim().0;
    for (tt, name) in [
        (0usize, "echo_first.png"),
        (t / 2, "echo_mid.png"),
        (t - 1, "echo_last.png"),
    ] {
        core_io::save_png_magnitude(&dir.join(name), &images.data.index_axis(Axis(0), tt).to_owned())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_recon(
    config: Option<&Path>,
    method: Method,
    input: &Path,
    out: &Path,
    seed: Option<u64>,
    repeats: Option<usize>,
    maps: MapsSource,
    center_lines: Option<usize>,
    force: bool,
) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.unroll.seed = s;
    }
    if let Some(r) = repeats {
        cfg.repeats = r;
    }
    if cfg.repeats == 0 {
        return Err(CliError::Config("repeats must be >= 1".into()));
    }
    prepare_out_dir(out, force)?;
    let dataset = load_dataset(input)?;
    let n_center = center_lines.unwrap_or(dataset.manifest.config.acquisition.center_lines);

    for rep in 0..cfg.repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.unroll.seed = cfg.unroll.seed + rep as u64;
        let run_dir = out.join(format!("run-{}-seed{:04}", method.name(), run_cfg.unroll.seed));
        std::fs::create_dir_all(&run_dir).map_err(|e| CliError::Io(e.to_string()))?;
        run_one(&run_dir, method, &dataset, &run_cfg, maps, n_center)?;
        println!("{} seed {} done", method.name(), run_cfg.unroll.seed);
    }
    Ok(())
}

fn run_one(
    run_dir: &Path,
    method: Method,
    dataset: &Dataset,
    cfg: &RunConfig,
    maps: MapsSource,
    n_center: usize,
) -> CliResult<()> {
    let y = &dataset.y;
    let phi = &dataset.phi;
    let sens = match maps {
        MapsSource::Truth => dataset.sens_truth.clone(),
        MapsSource::Calib => calib_lowres_maps(y, n_center)?,
    };

    let mut final_loss = None;
    match method {
        Method::ZeroFilled => {
            let alpha = recon_zero_filled(y, phi, &sens)?;
            let images = fse_recon_core::linops::expand_coeffs(&alpha, phi);
            save_complex(run_dir, "coeffs", &["k", "w", "h"], &alpha.data.clone().into_dyn())?;
            export_images(run_dir, &images)?;
        }
        Method::Shuffling => {
            let (alpha, images, objective) = recon_shuffling(y, phi, &sens, &cfg.fista)?;
            save_complex(run_dir, "coeffs", &["k", "w", "h"], &alpha.data.clone().into_dyn())?;
            export_images(run_dir, &images)?;
            write_loss_csv(&run_dir.join("objective.csv"), &objective)?;
            final_loss = objective.last().copied();
        }
        Method::Ssdu => {
            let (images, stage) = recon_ssdu_per_echo(y, &sens, &cfg.unroll)?;
            export_images(run_dir, &images)?;
            write_loss_csv(&run_dir.join("loss.csv"), &stage.loss_trace)?;
            core_io::save_checkpoint(
                &run_dir.join("stage_ssdu.ckpt"),
                &stage.params,
                cfg.unroll.steps_per_stage as u64,
            )?;
            final_loss = stage.loss_trace.last().copied();
        }
        Method::ZsSub => {
            let stage = recon_zs_subspace(y, phi, &sens, &cfg.unroll)?;
            let alpha = stage.coeffs.as_ref().expect("coefficients");
            save_complex(run_dir, "coeffs", &["k", "w", "h"], &alpha.data.clone().into_dyn())?;
            export_images(run_dir, stage.images.as_ref().expect("images"))?;
            write_loss_csv(&run_dir.join("loss_i1.csv"), &stage.loss_trace)?;
            core_io::save_checkpoint(
                &run_dir.join("stage_i1.ckpt"),
                &stage.params,
                cfg.unroll.steps_per_stage as u64,
            )?;
            final_loss = stage.loss_trace.last().copied();
        }
        Method::ZsJoint => {
            let joint = run_joint_pipeline(y, phi, &cfg.unroll, &JointOptions::with_center_lines(n_center))?;
            save_complex(run_dir, "coeffs", &["k", "w", "h"], &joint.coeffs.data.clone().into_dyn())?;
            export_images(run_dir, &joint.images)?;
            save_complex(run_dir, "sens_est", &["c", "w", "h"], &joint.sens.data.clone().into_dyn())?;
            save_complex(
                run_dir,
                "calib_maps",
                &["c", "w", "h"],
                &joint.calib_maps.data.clone().into_dyn(),
            )?;
            write_loss_csv(&run_dir.join("loss_i1.csv"), &joint.stage_i1.loss_trace)?;
            core_io::save_checkpoint(
                &run_dir.join("stage_i1.ckpt"),
                &joint.stage_i1.params,
                cfg.unroll.steps_per_stage as u64,
            )?;
            if let Some(c1) = &joint.stage_c1 {
                write_loss_csv(&run_dir.join("loss_c1.csv"), &c1.loss_trace)?;
                core_io::save_checkpoint(
                    &run_dir.join("stage_c1.ckpt"),
                    &c1.params,
                    cfg.unroll.steps_per_stage as u64,
                )?;
            }
            if let Some(i2) = &joint.stage_i2 {
                write_loss_csv(&run_dir.join("loss_i2.csv"), &i2.loss_trace)?;
                core_io::save_checkpoint(
                    &run_dir.join("stage_i2.ckpt"),
                    &i2.params,
                    cfg.unroll.steps_per_stage as u64,
                )?;
                final_loss = i2.loss_trace.last().copied();
            }
        }
    }

    let manifest = RunManifest {
        kind: "recon".into(),
        method: method.name().into(),
        seed: cfg.unroll.seed,
        maps: match maps {
            MapsSource::Truth => "truth".into(),
            MapsSource::Calib => "calib".into(),
        },
        center_lines: n_center,
        final_training_loss: final_loss,
        config: cfg.clone(),
        dataset_digests: dataset.manifest.digests.clone(),
    };
    std::fs::write(
        run_dir.join("manifest.toml"),
        toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

struct RunScore {
    method: String,
    seed: u64,
    center_lines: usize,
    nmse_i: f64,
    ssim_i: f64,
    nmse_t2: f64,
    per_echo_nmse: Vec<f64>,
    per_echo_ssim: Vec<f64>,
}

fn cmd_eval(results: &Path, truth_dir: &Path) -> CliResult<()> {
    // Ground truth.
    let truth_images: Array3<Cplx> =
        core_io::load_array_expecting(&truth_dir.join("truth_images"), &["t", "w", "h"])?
            .into_dimensionality()
            .map_err(|e| CliError::Io(e.to_string()))?;
    let truth = EchoImages { data: truth_images };
    let t2_true: Array2<f64> =
        core_io::load_array_expecting(&truth_dir.join("phantom_t2"), &["w", "h"])?
            .mapv(|v| v.re)
            .into_dimensionality()
            .map_err(|e| CliError::Io(e.to_string()))?;
    let pd: Array2<f64> = core_io::load_array_expecting(&truth_dir.join("phantom_pd"), &["w", "h"])?
        .mapv(|v| v.re)
        .into_dimensionality()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let support: Array2<bool> =
        core_io::load_array_expecting(&truth_dir.join("support"), &["w", "h"])?
            .mapv(|v| v.re > 0.5)
            .into_dimensionality()
            .map_err(|e| CliError::Io(e.to_string()))?;
    let manifest_text = std::fs::read_to_string(truth_dir.join("manifest.toml"))
        .map_err(|e| CliError::Config(format!("cannot read dataset manifest: {e}")))?;
    let ds_manifest: DatasetManifest = toml::from_str(&manifest_text)
        .map_err(|e| CliError::Config(format!("bad dataset manifest: {e}")))?;

    // T2 fitting setup: dense grid, support limited to solid proton density.
    let seq = ds_manifest.config.sequence.params();
    let dict = build_dictionary(&seq, &fitting_t2_grid(), ds_manifest.config.sequence.t1_ms)?;
    let pd_peak = pd.iter().cloned().fold(0.0f64, f64::max);
    let t2_support = Array2::from_shape_fn(support.dim(), |(w, h)| {
        support[(w, h)] && pd[(w, h)] > 0.1 * pd_peak
    });
    let t2_ref_fit = fit_t2_map(&truth, &dict, &t2_support)?;

    // Collect run directories (any depth 1 or 2 below results).
    let mut run_dirs = Vec::new();
    collect_run_dirs(results, 0, &mut run_dirs)?;
    if run_dirs.is_empty() {
        return Err(CliError::Config(format!(
            "no run manifests found under {}",
            results.display()
        )));
    }
    run_dirs.sort();

    let mut scores = Vec::new();
    for dir in &run_dirs {
        let manifest: RunManifest = toml::from_str(
            &std::fs::read_to_string(dir.join("manifest.toml"))
                .map_err(|e| CliError::Io(e.to_string()))?,
        )
        .map_err(|e| CliError::Config(format!("bad run manifest in {}: {e}", dir.display())))?;
        let images: Array3<Cplx> = core_io::load_array_expecting(&dir.join("images"), &["t", "w", "h"])?
            .into_dimensionality()
            .map_err(|e| CliError::Io(e.to_string()))?;
        let est = EchoImages { data: images };

        let nmse_i = nmse(&est, &truth)?;
        let per_echo_nmse = nmse_per_echo(&est, &truth)?;
        let per_echo_ssim = ssim_per_echo(&est, &truth)?;
        let ssim_i = per_echo_ssim.iter().sum::<f64>() / per_echo_ssim.len() as f64;
        let t2_est = fit_t2_map(&est, &dict, &t2_support)?;
        let nmse_t2 = nmse_map(&t2_est, &t2_ref_fit, &t2_support)?;

        core_io::save_png_magnitude(
            &dir.join("t2_map.png"),
            &t2_est.mapv(|v| Cplx::new(v, 0.0)),
        )?;

        scores.push(RunScore {
            method: manifest.method,
            seed: manifest.seed,
            center_lines: manifest.center_lines,
            nmse_i,
            ssim_i,
            nmse_t2,
            per_echo_nmse,
            per_echo_ssim,
        });
    }

    write_reports(results, &t2_true, &scores)?;
    println!("evaluated {} runs; reports in {}", scores.len(), results.display());
    Ok(())
}

fn collect_run_dirs(root: &Path, depth: usize, out: &mut Vec<PathBuf>) -> CliResult<()> {
    if depth > 2 {
        return Ok(());
    }
    if root.join("manifest.toml").exists() && root.join("images.hdr").exists() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    if let Ok(entries) = root.read_dir() {
        for entry in entries.flatten() {
            if entry.path().is_dir() {
                collect_run_dirs(&entry.path(), depth + 1, out)?;
            }
        }
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn write_reports(results: &Path, _t2_true: &Array2<f64>, scores: &[RunScore]) -> CliResult<()> {
    // Per-run metrics.
    let mut text = String::from("method,seed,center_lines,nmse_i_percent,ssim_i,nmse_t2_percent\n");
    for s in scores {
        text.push_str(&format!(
            "{},{},{},{:.6e},{:.6e},{:.6e}\n",
            s.method, s.seed, s.center_lines, s.nmse_i, s.ssim_i, s.nmse_t2
        ));
    }
    std::fs::write(results.join("runs.csv"), text).map_err(|e| CliError::Io(e.to_string()))?;

    // Per-echo breakdown.
    let mut text = String::from("method,seed,echo,nmse_percent,ssim\n");
    for s in scores {
        for (tt, (n, m)) in s.per_echo_nmse.iter().zip(&s.per_echo_ssim).enumerate() {
            text.push_str(&format!(
                "{},{},{},{:.6e},{:.6e}\n",
                s.method, s.seed, tt, n, m
            ));
        }
    }
    std::fs::write(results.join("per_echo.csv"), text).map_err(|e| CliError::Io(e.to_string()))?;

    // Aggregate per (method, center_lines): the Table-1-shaped report.
    let mut groups: BTreeMap<(String, usize), Vec<&RunScore>> = BTreeMap::new();
    for s in scores {
        groups
            .entry((s.method.clone(), s.center_lines))
            .or_default()
            .push(s);
    }
    let mut text = String::from(
        "method,center_lines,runs,nmse_i_mean,nmse_i_std,ssim_i_mean,ssim_i_std,nmse_t2_mean,nmse_t2_std\n",
    );
    for ((method, center), group) in &groups {
        let nm: Vec<f64> = group.iter().map(|s| s.nmse_i).collect();
        let sm: Vec<f64> = group.iter().map(|s| s.ssim_i).collect();
        let tm: Vec<f64> = group.iter().map(|s| s.nmse_t2).collect();
        let (nmean, nstd) = mean_std(&nm);
        let (smean, sstd) = mean_std(&sm);
        let (tmean, tstd) = mean_std(&tm);
        text.push_str(&format!(
            "{method},{center},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}\n",
            group.len(),
            nmean,
            nstd,
            smean,
            sstd,
            tmean,
            tstd
        ));
    }
    std::fs::write(results.join("report.csv"), &text).map_err(|e| CliError::Io(e.to_string()))?;

    // Center-line sweep: one row per (center_lines, method).
    let mut text = String::from("center_lines,method,nmse_i_mean,nmse_i_std,ssim_i_mean,ssim_i_std\n");
    let mut by_center: BTreeMap<(usize, String), Vec<&RunScore>> = BTreeMap::new();
    for s in scores {
        by_center
            .entry((s.center_lines, s.method.clone()))
            .or_default()
            .push(s);
    }
    for ((center, method), group) in &by_center {
        let nm: Vec<f64> = group.iter().map(|s| s.nmse_i).collect();
        let sm: Vec<f64> = group.iter().map(|s| s.ssim_i).collect();
        let (nmean, nstd) = mean_std(&nm);
        let (smean, sstd) = mean_std(&sm);
        text.push_str(&format!(
            "{center},{method},{:.6e},{:.6e},{:.6e},{:.6e}\n",
            nmean, nstd, smean, sstd
        ));
    }
    std::fs::write(results.join("sweep.csv"), text).map_err(|e| CliError::Io(e.to_string()))?;

    // Structured-text summary.
    let mut text = String::from("reconstruction quality summary\n");
    for ((method, center), group) in &groups {
        let nm: Vec<f64> = group.iter().map(|s| s.nmse_i).collect();
        let sm: Vec<f64> = group.iter().map(|s| s.ssim_i).collect();
        let tm: Vec<f64> = group.iter().map(|s| s.nmse_t2).collect();
        let (nmean, nstd) = mean_std(&nm);
        let (smean, _) = mean_std(&sm);
        let (tmean, _) = mean_std(&tm);
        text.push_str(&format!(
            "{method} (ACS {center}, {} runs): NMSE-I {nmean:.2}% +- {nstd:.2}, SSIM-I {smean:.4}, NMSE-T2 {tmean:.2}%\n",
            group.len()
        ));
    }
    std::fs::write(results.join("report.txt"), text).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}
