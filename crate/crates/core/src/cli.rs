//! Command-line front end: scene synthesis, both reconstruction methods,
//! evaluation, and the view-count benchmark.
//!
//! Progress goes to standard error; machine-readable artifacts go to files.
//! Exit codes: 0 success, 1 domain error (empty cloud, divergence, missing
//! files), 2 usage or format error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::{OrientedPoint, OrientedPointCloud, PointProvenance, TriMesh};
use crate::io::{read_ply, write_ply_mesh, NoiseSpec};
use crate::model::ModelParams;
use crate::optim::{self, OptimConfig};
use crate::sfm::{self, SfmConfig};
use crate::synth::{self, default_scene_spec};

#[derive(Parser)]
#[command(
    name = "focus",
    version,
    about = "Multi-view foot surface reconstruction from dense template-object-coordinate predictions"
)]
struct Cli {
    /// Worker threads (default: available parallelism). Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: cameras, rasters, manifest, ground truth.
    Synth(SynthArgs),
    /// Reconstruct an oriented point cloud by TOC matching and triangulation.
    Sfm(SfmArgs),
    /// Fit the deformable model by uncertainty-weighted reprojection.
    Optim(OptimArgs),
    /// Compare a predicted mesh or cloud against a ground-truth mesh.
    Eval(EvalArgs),
    /// Reconstruction quality as a function of view count, as CSV.
    BenchViews(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of ring cameras.
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Base TOC noise sigma (0 disables noise).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Spatially varying extra sigma on top of the base.
    #[arg(long, default_value_t = 0.0)]
    noise_range: f64,
}

#[derive(Args)]
struct SfmArgs {
    /// Scene directory containing manifest.json.
    #[arg(long)]
    scene: PathBuf,
    /// Output oriented point cloud (binary PLY); the Poisson parameter
    /// sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Points sampled per image.
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    /// TOC match distance threshold.
    #[arg(long, default_value_t = 0.002)]
    threshold: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ablation: integer-pixel matches only.
    #[arg(long)]
    no_subpixel: bool,
    /// Ablation: keep the first observation's normal instead of aggregating.
    #[arg(long)]
    no_normal_aggregation: bool,
}

#[derive(Args)]
struct OptimArgs {
    /// Scene directory containing manifest.json.
    #[arg(long)]
    scene: PathBuf,
    /// Output deformed-template mesh (binary PLY); fitted parameters are
    /// written next to it with a .params.json extension.
    #[arg(long)]
    out: PathBuf,
    /// Pixels sampled per view.
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    /// Stage epochs: one value per stage (similarity, then full).
    #[arg(long, value_delimiter = ',', default_values_t = [500, 500])]
    epochs: Vec<usize>,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ablation: unweighted reprojection residuals.
    #[arg(long)]
    no_uncertainty: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted mesh or oriented point cloud (PLY). Files without faces
    /// are evaluated as clouds.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth mesh (PLY).
    #[arg(long)]
    gt: PathBuf,
    /// Crop height in mm applied to both surfaces.
    #[arg(long, default_value_t = 100.0)]
    crop: f64,
    /// Surface samples per direction.
    #[arg(long, default_value_t = 10000)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// JSON report path.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMethod {
    Sfm,
    Optim,
}

#[derive(Args)]
struct BenchArgs {
    /// Scene directory containing manifest.json (must carry a ground-truth
    /// mesh).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "sfm")]
    method: BenchMethod,
    /// View counts to benchmark.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 10])]
    counts: Vec<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Points/pixels sampled per image during reconstruction.
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    /// Stage epochs for the optim method.
    #[arg(long, value_delimiter = ',', default_values_t = [500, 500])]
    epochs: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Entry point: parses arguments, runs the selected subcommand, and maps
/// errors to exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful outputs, not usage errors.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Ignore failure: the global pool may already exist (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Sfm(a) => cmd_sfm(a),
        Command::Optim(a) => cmd_optim(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BenchViews(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = default_scene_spec(
        a.views,
        a.seed,
        NoiseSpec {
            sigma_base: a.noise,
            sigma_range: a.noise_range,
        },
    );
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    eprintln!("synth: rendering {} views (seed {})", a.views, a.seed);
    let scene = synth::generate_scene(&spec, &a.out)?;
    eprintln!(
        "synth: wrote {} views to {}",
        scene.views.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_sfm(a: SfmArgs) -> Result<()> {
    let scene = synth::load_scene(&a.scene)?;
    let config = SfmConfig {
        samples_per_image: a.samples,
        match_threshold: a.threshold,
        seed: a.seed,
        use_subpixel: !a.no_subpixel,
        use_normal_aggregation: !a.no_normal_aggregation,
        ..SfmConfig::default()
    };
    eprintln!(
        "sfm: matching {} samples/view across {} views",
        config.samples_per_image,
        scene.views.len()
    );
    let cloud = sfm::run_sfm(&scene, &config)?;
    sfm::write_sfm_outputs(&cloud, &a.out)?;
    eprintln!(
        "sfm: wrote {} oriented points to {} (+ Poisson sidecar)",
        cloud.len(),
        a.out.display()
    );
    run_poisson_hook(&a.out);
    Ok(())
}

/// If FOCUS_POISSON_CMD names an external mesher, invoke it on the cloud and
/// sidecar. Any failure is a warning: meshing is optional tooling.
fn run_poisson_hook(cloud_path: &Path) {
    let Ok(cmd) = std::env::var("FOCUS_POISSON_CMD") else {
        return;
    };
    if cmd.is_empty() {
        return;
    }
    let sidecar = sfm::sidecar_path(cloud_path);
    let mesh_out = cloud_path.with_extension("poisson.ply");
    eprintln!("sfm: invoking external mesher: {cmd}");
    match Process::new(&cmd)
        .arg(cloud_path)
        .arg(&sidecar)
        .arg(&mesh_out)
        .status()
    {
        Ok(status) if status.success() => {
            eprintln!("sfm: external mesher wrote {}", mesh_out.display());
        }
        Ok(status) => {
            eprintln!("warning: external mesher exited with {status}");
        }
        Err(e) => {
            eprintln!("warning: external mesher could not run: {e}");
        }
    }
}

fn cmd_optim(a: OptimArgs) -> Result<()> {
    if a.epochs.is_empty() || a.epochs.len() > 2 {
        return Err(Error::InvalidRequest {
            reason: format!("--epochs takes 1 or 2 values, got {}", a.epochs.len()),
        });
    }
    let scene = synth::load_scene(&a.scene)?;
    let config = OptimConfig {
        samples_per_image: a.samples,
        stage1_epochs: a.epochs[0],
        stage2_epochs: a.epochs.get(1).copied().unwrap_or(0),
        learning_rate: a.lr,
        seed: a.seed,
        use_uncertainty: !a.no_uncertainty,
        ..OptimConfig::default()
    };
    eprintln!(
        "optim: fitting {} parameters over {}+{} epochs",
        7 + scene.model.d_shape() + scene.model.d_pose(),
        config.stage1_epochs,
        config.stage2_epochs
    );
    let result = optim::fit(&scene, &scene.model, &config)?;
    eprintln!(
        "optim: final loss {:.6} ({} samples excluded)",
        result.final_loss, result.excluded
    );
    let mesh = scene.model.deform_mesh(&result.params);
    write_ply_mesh(&a.out, &mesh, false)?;
    let params_path = a.out.with_extension("params.json");
    let report = serde_json::json!({
        "params": result.params,
        "final_loss": result.final_loss,
        "epochs": result.loss_history.len(),
        "excluded_samples": result.excluded,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&params_path, text + "\n").map_err(|e| Error::io(&params_path, e))?;
    eprintln!(
        "optim: wrote {} and {}",
        a.out.display(),
        params_path.display()
    );
    Ok(())
}

fn mesh_to_cloud(mesh: &TriMesh, path: &Path) -> Result<OrientedPointCloud> {
    let normals = mesh.normals.as_ref().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "point cloud evaluation needs nx/ny/nz properties".into(),
        offset: 0,
    })?;
    Ok(mesh
        .vertices
        .iter()
        .zip(normals)
        .map(|(v, n)| OrientedPoint {
            position: *v,
            normal: *n,
            provenance: PointProvenance {
                toc: nalgebra::Vector3::zeros(),
                view_count: 0,
                mean_reprojection_error: 0.0,
            },
        })
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = read_ply(&a.pred)?;
    let gt = read_ply(&a.gt)?;
    let report = if pred.faces.is_empty() {
        let cloud = mesh_to_cloud(&pred, &a.pred)?;
        eprintln!(
            "eval: {} cloud points vs {} ground-truth faces",
            cloud.len(),
            gt.faces.len()
        );
        let r = eval::evaluate_cloud(&cloud, &gt, a.samples, a.crop, 2.0, a.seed)?;
        serde_json::json!({ "kind": "cloud", "metrics": r })
    } else {
        eprintln!(
            "eval: {} predicted faces vs {} ground-truth faces",
            pred.faces.len(),
            gt.faces.len()
        );
        let r = eval::compare_meshes(&pred, &gt, a.samples, a.crop, a.seed)?;
        serde_json::json!({ "kind": "mesh", "metrics": r })
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&a.out, text + "\n").map_err(|e| Error::io(&a.out, e))?;
    eprintln!("eval: wrote {}", a.out.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let scene = synth::load_scene(&a.scene)?;
    let rows = match a.method {
        BenchMethod::Sfm => {
            let config = SfmConfig {
                samples_per_image: a.samples,
                seed: a.seed,
                ..SfmConfig::default()
            };
            eval::bench_views(&scene, &a.counts, &config, 10000, eval::DEFAULT_CROP_HEIGHT_MM, a.seed)?
        }
        BenchMethod::Optim => {
            if a.epochs.is_empty() || a.epochs.len() > 2 {
                return Err(Error::InvalidRequest {
                    reason: format!("--epochs takes 1 or 2 values, got {}", a.epochs.len()),
                });
            }
            let config = OptimConfig {
                samples_per_image: a.samples,
                stage1_epochs: a.epochs[0],
                stage2_epochs: a.epochs.get(1).copied().unwrap_or(0),
                seed: a.seed,
                ..OptimConfig::default()
            };
            eval::bench_views_optim(
                &scene,
                &a.counts,
                &config,
                10000,
                eval::DEFAULT_CROP_HEIGHT_MM,
                a.seed,
            )?
        }
    };
    for r in &rows {
        eprintln!(
            "bench: {} views -> chamfer {:.3} mm, normals {:.1} deg, coverage {:.1}%",
            r.n_views,
            r.chamfer_mean,
            r.normal_mean_deg,
            100.0 * r.coverage
        );
    }
    std::fs::write(&a.out, eval::bench_csv(&rows)).map_err(|e| Error::io(&a.out, e))?;
    eprintln!("bench: wrote {}", a.out.display());
    Ok(())
}

// Referenced so the params JSON schema stays aligned with the library type.
const _: fn(&ModelParams) -> usize = ModelParams::dof;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["focus", "--definitely-not-a-flag"]), 2);
        assert_eq!(run(["focus", "sfm", "--bogus"]), 2);
    }

    #[test]
    fn help_and_version_succeed() {
        assert_eq!(run(["focus", "--help"]), 0);
        assert_eq!(run(["focus", "--version"]), 0);
        assert_eq!(run(["focus", "synth", "--help"]), 0);
    }

    #[test]
    fn missing_scene_is_domain_error() {
        assert_eq!(
            run([
                "focus",
                "optim",
                "--scene",
                "/definitely/missing",
                "--out",
                "/tmp/fit.ply"
            ]),
            1
        );
    }

    #[test]
    fn every_documented_flag_parses() {
        let ok = Cli::try_parse_from([
            "focus",
            "sfm",
            "--scene",
            "s",
            "--out",
            "c.ply",
            "--samples",
            "3000",
            "--threshold",
            "0.002",
            "--no-subpixel",
            "--no-normal-aggregation",
            "--seed",
            "1",
            "--threads",
            "4",
        ]);
        assert!(ok.is_ok());
        let ok = Cli::try_parse_from([
            "focus", "optim", "--scene", "s", "--out", "f.ply", "--samples", "3000", "--epochs",
            "500,500", "--lr", "0.001", "--no-uncertainty", "--seed", "1",
        ]);
        assert!(ok.is_ok());
        let ok = Cli::try_parse_from([
            "focus", "eval", "--pred", "x.ply", "--gt", "y.ply", "--crop", "100", "--samples",
            "10000", "--seed", "3", "--out", "r.json",
        ]);
        assert!(ok.is_ok());
        let ok = Cli::try_parse_from([
            "focus",
            "bench-views",
            "--scene",
            "s",
            "--method",
            "optim",
            "--counts",
            "3,5,10,15,20",
            "--out",
            "b.csv",
        ]);
        assert!(ok.is_ok());
        let ok = Cli::try_parse_from([
            "focus", "synth", "--views", "10", "--seed", "42", "--noise", "0.005", "--out", "d",
        ]);
        assert!(ok.is_ok());
    }
}
