//! Command-line front end: norm checks, mesh/solve inspection, δ-sweeps,
//! rate fitting, closed-form predictions, and SVG plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use finsler_lab::fem::{self, DofMap, InclusionBc, SolveOpts};
use finsler_lab::harness::{self, ScenarioConfig};
use finsler_lab::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "finsler-lab", version, about = "Anisotropic perfect-conductivity laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify norm identities (homogeneity, duality, ellipticity) for the
    /// configured norm.
    CheckNorm { config: PathBuf },
    /// Build the mesh at one δ and report quality statistics.
    Mesh {
        config: PathBuf,
        #[arg(long)]
        delta: f64,
        /// Write the mesh as plain text to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve at one δ and print the solve report.
    Solve {
        config: PathBuf,
        #[arg(long)]
        delta: f64,
    },
    /// Run the full δ-sweep; writes rows.csv and manifest.json.
    Sweep { config: PathBuf },
    /// Fit the blow-up rate from a sweep CSV; writes fit.json next to it.
    Fit {
        rows: PathBuf,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
    },
    /// Print the closed-form prediction report for the configured scenario.
    Predict { config: PathBuf },
    /// Emit SVG plots from a sweep CSV and fit JSON; the heatmap needs the
    /// scenario config and a δ to re-solve.
    Plot {
        rows: PathBuf,
        fit: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = "out")]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_NUMERIC,
            };
            ExitCode::from(code)
        }
    }
}

fn load(path: &Path) -> Result<(ScenarioConfig, String)> {
    ScenarioConfig::load(path)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::CheckNorm { config } => {
            let (cfg, _) = load(&config)?;
            let norm = cfg.norm.section_norm()?;
            match norm.ellipticity_probe(256) {
                Ok((lo, hi)) => {
                    println!(
                        "norm ok: family {:?}, ellipticity bounds [{lo:.6e}, {hi:.6e}]",
                        cfg.norm.family
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    println!("norm check FAILED: {e}");
                    Ok(ExitCode::from(EXIT_ACCEPTANCE))
                }
            }
        }
        Cmd::Mesh { config, delta, out } => {
            let (cfg, _) = load(&config)?;
            let (_, mesh) = cfg.build_mesh_at(delta)?;
            println!(
                "vertices {} triangles {} min_angle {:.2} deg axisym {}",
                mesh.vertices.len(),
                mesh.triangles.len(),
                mesh.min_angle_deg,
                mesh.axisym
            );
            if let Some(path) = out {
                std::fs::write(path, mesh.export_text())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Solve { config, delta } => {
            let (cfg, _) = load(&config)?;
            let norm = cfg.norm.section_norm()?;
            let (_, mesh) = cfg.build_mesh_at(delta)?;
            let phi = cfg.affine();
            let dofs = DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], false)?;
            let (_, report) = fem::solve(&mesh, &norm, &dofs, &phi, &cfg.solve_opts())?;
            println!("{report:#?}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { config } => {
            let (cfg, hash) = load(&config)?;
            let rows = harness::run_sweep(&cfg, &hash)?;
            let failed = rows.iter().filter(|r| !r.ok).count();
            for r in &rows {
                if r.ok {
                    println!(
                        "delta {:.3e}  max|grad|_H {:.6e}  iters {}  tris {}",
                        r.delta, r.max_grad, r.iterations, r.n_triangles
                    );
                } else {
                    println!("delta {:.3e}  FAILED: {}", r.delta, r.note);
                }
            }
            if failed > 0 {
                eprintln!("{failed} of {} rows failed", rows.len());
                Ok(ExitCode::from(EXIT_NUMERIC))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Cmd::Fit { rows, dim, tau } => {
            let text = std::fs::read_to_string(&rows)?;
            let parsed = harness::rows_from_csv(&text)?;
            let fit = harness::fit_rate(&parsed, dim, tau)?;
            let json =
                serde_json::to_string_pretty(&fit).map_err(|e| Error::Numeric(e.to_string()))?;
            let out = rows.with_file_name("fit.json");
            std::fs::write(&out, &json)?;
            println!("{json}");
            if fit.slope_ok {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("fitted rate does not match the predicted blow-up model");
                Ok(ExitCode::from(EXIT_ACCEPTANCE))
            }
        }
        Cmd::Predict { config } => {
            let (cfg, _) = load(&config)?;
            let rep = harness::predict(&cfg)?;
            let json =
                serde_json::to_string_pretty(&rep).map_err(|e| Error::Numeric(e.to_string()))?;
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Plot {
            rows,
            fit,
            config,
            delta,
            dir,
        } => {
            let parsed = harness::rows_from_csv(&std::fs::read_to_string(&rows)?)?;
            let fit: harness::FitReport =
                serde_json::from_str(&std::fs::read_to_string(&fit)?)
                    .map_err(|e| Error::Config(format!("fit JSON: {e}")))?;
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("rate.svg"), harness::rate_plot(&parsed, &fit))?;
            std::fs::write(dir.join("prefactor.svg"), harness::prefactor_plot(&fit))?;
            if let Some(config) = config {
                let (cfg, _) = load(&config)?;
                let d = delta.unwrap_or_else(|| {
                    cfg.inclusions.deltas[cfg.inclusions.deltas.len() / 2]
                });
                let norm = cfg.norm.section_norm()?;
                let (_, mesh) = cfg.build_mesh_at(d)?;
                let phi = cfg.affine();
                let dofs =
                    DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], false)?;
                let (field, _) = fem::solve(&mesh, &norm, &dofs, &phi, &SolveOpts::default())?;
                std::fs::write(
                    dir.join("heatmap.svg"),
                    harness::heatmap_plot(&mesh, &field, &norm),
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
