//! Scenario configuration, δ-sweeps, blow-up-rate fitting, prediction
//! reports, plots, and result persistence behind the CLI.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::{phi_n, BlowupPrediction};
use crate::error::{Error, Result};
use crate::fem::{self, Affine, DofMap, InclusionBc, Region, SolveOpts};
use crate::geometry::WulffConfig;
use crate::mesh::{self, Grading, Mesh};
use crate::norms::NormModel;

pub const ENV_WORKERS: &str = "FINSLER_WORKERS";

/// Declarative scenario: norm, geometry, boundary data, mesh and solver
/// parameters, sweep targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub version: u32,
    pub dim: usize,
    pub norm: NormBlock,
    pub inclusions: InclusionBlock,
    pub phi: PhiBlock,
    #[serde(default)]
    pub mesh: MeshBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub neck: NeckBlock,
    #[serde(default)]
    pub fit: FitBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub predict: PredictBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormBlock {
    pub family: String,
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub k: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InclusionBlock {
    pub r1: f64,
    pub r2: f64,
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub r_out: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiBlock {
    pub a: [f64; 2],
    pub b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshBlock {
    pub h_min: f64,
    pub h_max: f64,
    pub theta: f64,
    pub k_gap: usize,
    pub max_elements: usize,
}

impl Default for MeshBlock {
    fn default() -> Self {
        let g = Grading::default();
        MeshBlock {
            h_min: g.h_min,
            h_max: g.h_max,
            theta: g.theta,
            k_gap: g.k_gap,
            max_elements: g.max_elements,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverBlock {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            tol: 1e-10,
            max_iter: 60,
        }
    }
}

/// Neck width rule: `w = √δ` (the default) or a fixed width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeckBlock {
    pub rule: String,
    #[serde(default)]
    pub w: Option<f64>,
}

impl Default for NeckBlock {
    fn default() -> Self {
        NeckBlock {
            rule: "sqrt".into(),
            w: None,
        }
    }
}

impl NeckBlock {
    pub fn width(&self, delta: f64) -> Result<f64> {
        match self.rule.as_str() {
            "sqrt" => Ok(delta.sqrt()),
            "fixed" => self
                .w
                .filter(|w| *w > 0.0)
                .ok_or_else(|| Error::Config("fixed neck rule needs w > 0".into())),
            other => Err(Error::Config(format!("unknown neck rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitBlock {
    pub tau: f64,
}

impl Default for FitBlock {
    fn default() -> Self {
        FitBlock { tau: 0.25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputBlock {
    pub dir: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PredictBlock {
    /// Known flux functional of the touching problem; computed by
    /// merged solves when absent.
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub delta_ref: Option<f64>,
}

impl NormBlock {
    /// The 2-D norm driving the solver (the meridian section norm when
    /// `dim = 3`).
    pub fn section_norm(&self) -> Result<NormModel> {
        let matrix = || -> Result<DMatrix<f64>> {
            let rows = self
                .matrix
                .as_ref()
                .ok_or_else(|| Error::Config("norm family needs a matrix".into()))?;
            if rows.len() != 2 || rows.iter().any(|r| r.len() != 2) {
                return Err(Error::Config("norm matrix must be 2x2".into()));
            }
            Ok(DMatrix::from_row_slice(
                2,
                2,
                &[rows[0][0], rows[0][1], rows[1][0], rows[1][1]],
            ))
        };
        match self.family.as_str() {
            "euclidean" => Ok(NormModel::euclidean(2)),
            "ellipse" => NormModel::ellipse(matrix()?),
            "perturbed_ellipse" => NormModel::perturbed_ellipse(
                matrix()?,
                self.beta
                    .ok_or_else(|| Error::Config("perturbed_ellipse needs beta".into()))?,
                self.k
                    .ok_or_else(|| Error::Config("perturbed_ellipse needs k".into()))?,
            ),
            other => Err(Error::Config(format!("unknown norm family '{other}'"))),
        }
    }

    /// The ambient N-dimensional norm (used by predictions); for
    /// `dim = 3` the section ellipse diag(m_r, m_z) is rotated around
    /// the axis into diag(m_r, m_r, m_z).
    pub fn ambient_norm(&self, dim: usize) -> Result<NormModel> {
        if dim == 2 {
            return self.section_norm();
        }
        match self.family.as_str() {
            "euclidean" => Ok(NormModel::euclidean(dim)),
            "ellipse" => {
                let section = self.section_norm()?;
                let m = match section.family() {
                    crate::norms::NormFamily::Ellipse { matrix } => matrix.clone(),
                    _ => unreachable!(),
                };
                let mut full = DMatrix::identity(dim, dim);
                for i in 0..dim - 1 {
                    full[(i, i)] = m[(0, 0)];
                }
                full[(dim - 1, dim - 1)] = m[(1, 1)];
                NormModel::ellipse(full)
            }
            other => Err(Error::Config(format!(
                "norm family '{other}' has no axisymmetric extension to dim {dim}"
            ))),
        }
    }
}

impl MeshBlock {
    pub fn grading(&self) -> Grading {
        Grading {
            h_min: self.h_min,
            h_max: self.h_max,
            theta: self.theta,
            k_gap: self.k_gap,
            max_elements: self.max_elements,
        }
    }
}

impl ScenarioConfig {
    pub fn from_str_validated(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_str_validated(&text)?;
        Ok((cfg, sha256_hex(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if !(self.dim == 2 || self.dim == 3) {
            return Err(Error::Config(
                "the solver supports dim 2 and 3 only (analytic predictions cover higher dims)"
                    .into(),
            ));
        }
        if !(self.inclusions.r1 > 0.0 && self.inclusions.r2 > 0.0) {
            return Err(Error::Config("inclusion radii must be positive".into()));
        }
        if self.inclusions.deltas.is_empty() {
            return Err(Error::Config("deltas must be non-empty".into()));
        }
        for w in self.inclusions.deltas.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(
                    "deltas must be strictly decreasing".into(),
                ));
            }
        }
        if self.inclusions.deltas.iter().any(|d| *d <= 0.0) {
            return Err(Error::Config("deltas must be positive".into()));
        }
        let norm = self.norm.section_norm()?;
        norm.ellipticity_probe(64)?;
        if self.dim == 3 {
            match norm.family() {
                crate::norms::NormFamily::Euclidean => {}
                crate::norms::NormFamily::Ellipse { matrix } => {
                    if matrix[(0, 1)].abs() > 1e-14 {
                        return Err(Error::Config(
                            "dim-3 section norm must be axis-aligned (diagonal matrix)".into(),
                        ));
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "dim-3 runs support euclidean/ellipse section norms only".into(),
                    ))
                }
            }
            if self.phi.a[0].abs() > 0.0 {
                return Err(Error::Config(
                    "dim-3 boundary data must depend on the axial coordinate only".into(),
                ));
            }
        }
        if !(self.fit.tau > 0.0 && self.fit.tau <= 0.5) {
            return Err(Error::Config("tau must lie in (0, 1/2]".into()));
        }
        self.neck.width(self.inclusions.deltas[0])?;
        Ok(())
    }

    pub fn r_out(&self) -> f64 {
        self.inclusions
            .r_out
            .unwrap_or(4.0 * (self.inclusions.r1 + self.inclusions.r2))
    }

    pub fn solve_opts(&self) -> SolveOpts {
        SolveOpts {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            ..SolveOpts::default()
        }
    }

    pub fn affine(&self) -> Affine {
        Affine {
            a: self.phi.a,
            b: self.phi.b,
        }
    }

    pub fn build_mesh_at(&self, delta: f64) -> Result<(WulffConfig, Mesh)> {
        let norm = self.norm.section_norm()?;
        let wcfg = WulffConfig::canonical(norm, self.inclusions.r1, self.inclusions.r2, delta)?;
        let grading = self.mesh.grading();
        let mesh = if self.dim == 3 {
            mesh::build_meridian_mesh(&wcfg, self.r_out(), &grading)?
        } else {
            mesh::build_mesh(&wcfg, self.r_out(), &grading)?
        };
        Ok((wcfg, mesh))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One measured sweep point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub max_grad: f64,
    pub max_grad_neck: f64,
    pub u1: f64,
    pub u2: f64,
    pub flux1: f64,
    pub flux2: f64,
    pub energy: f64,
    pub iterations: usize,
    pub n_triangles: usize,
    pub wall_seconds: f64,
    pub ok: bool,
    #[serde(default)]
    pub note: String,
}

fn failed_row(delta: f64, note: String) -> SweepRow {
    SweepRow {
        delta,
        max_grad: f64::NAN,
        max_grad_neck: f64::NAN,
        u1: f64::NAN,
        u2: f64::NAN,
        flux1: f64::NAN,
        flux2: f64::NAN,
        energy: f64::NAN,
        iterations: 0,
        n_triangles: 0,
        wall_seconds: 0.0,
        ok: false,
        note,
    }
}

/// Solves one sweep point.
pub fn solve_row(cfg: &ScenarioConfig, delta: f64) -> Result<SweepRow> {
    let started = std::time::Instant::now();
    let norm = cfg.norm.section_norm()?;
    let (_, mesh) = cfg.build_mesh_at(delta)?;
    let phi = cfg.affine();
    let dofs = DofMap::build(&mesh, &phi, [InclusionBc::Tied, InclusionBc::Tied], false)?;
    let (field, report) = fem::solve(&mesh, &norm, &dofs, &phi, &cfg.solve_opts())?;
    let w = cfg.neck.width(delta)?;
    let (neck_max, _, _) = fem::max_grad_h(&field, &mesh, &norm, Region::Neck(w));
    Ok(SweepRow {
        delta,
        max_grad: report.max_grad,
        max_grad_neck: neck_max,
        u1: report.u1.unwrap_or(f64::NAN),
        u2: report.u2.unwrap_or(f64::NAN),
        flux1: report.flux1,
        flux2: report.flux2,
        energy: report.energy,
        iterations: report.iterations,
        n_triangles: mesh.triangles.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
        ok: true,
        note: String::new(),
    })
}

/// Runs the δ-sweep (parallel over rows), persists `rows.csv` and
/// `manifest.json` under the output directory, and returns the rows.
/// Failed rows are recorded and the sweep continues.
pub fn run_sweep(cfg: &ScenarioConfig, config_hash: &str) -> Result<Vec<SweepRow>> {
    let run = || -> Vec<SweepRow> {
        let mut rows: Vec<SweepRow> = cfg
            .inclusions
            .deltas
            .par_iter()
            .map(|d| solve_row(cfg, *d).unwrap_or_else(|e| failed_row(*d, e.to_string())))
            .collect();
        rows.sort_by(|a, b| b.delta.total_cmp(&a.delta));
        rows
    };
    let rows = match worker_count() {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Resource(e.to_string()))?
            .install(run),
        None => run(),
    };

    let dir = Path::new(&cfg.output.dir);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("rows.csv"), rows_to_csv(&rows))?;
    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_hash,
        "dim": cfg.dim,
        "rows": rows,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Numeric(e.to_string()))?,
    )?;
    Ok(rows)
}

fn worker_count() -> Option<usize> {
    std::env::var(ENV_WORKERS).ok()?.parse().ok()
}

const CSV_HEADER: &str = "delta,max_grad,max_grad_neck,u1,u2,flux1,flux2,energy,iterations,n_triangles,wall_seconds,ok,note";

/// 17-significant-digit CSV (round-trips f64 bit-exactly).
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let f = |v: f64| format!("{v:.16e}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(r.delta),
            f(r.max_grad),
            f(r.max_grad_neck),
            f(r.u1),
            f(r.u2),
            f(r.flux1),
            f(r.flux2),
            f(r.energy),
            r.iterations,
            r.n_triangles,
            f(r.wall_seconds),
            r.ok,
            r.note.replace(',', ";")
        );
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty CSV".into()))?;
    if header.trim() != CSV_HEADER {
        return Err(Error::Config("unrecognized CSV header".into()));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(13, ',').collect();
        if parts.len() != 13 {
            return Err(Error::Config(format!("CSV row {} malformed", ln + 2)));
        }
        let pf = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("CSV row {}: {e}", ln + 2)))
        };
        rows.push(SweepRow {
            delta: pf(parts[0])?,
            max_grad: pf(parts[1])?,
            max_grad_neck: pf(parts[2])?,
            u1: pf(parts[3])?,
            u2: pf(parts[4])?,
            flux1: pf(parts[5])?,
            flux2: pf(parts[6])?,
            energy: pf(parts[7])?,
            iterations: parts[8]
                .parse()
                .map_err(|e| Error::Config(format!("CSV row {}: {e}", ln + 2)))?,
            n_triangles: parts[9]
                .parse()
                .map_err(|e| Error::Config(format!("CSV row {}: {e}", ln + 2)))?,
            wall_seconds: pf(parts[10])?,
            ok: parts[11] == "true",
            note: parts[12].to_string(),
        });
    }
    Ok(rows)
}

/// Log–log rate fit against the dimension's blow-up target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub dim: usize,
    pub tau: f64,
    pub slope: f64,
    /// 95% half-width of the slope from the regression residuals.
    pub slope_band: f64,
    pub intercept: f64,
    /// Raw sequence max H(∇u)/Φ_N(δ) per row (no smoothing).
    pub prefactors: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Relative spread of the prefactor over the last half-decade of δ.
    pub prefactor_spread: f64,
    /// N = 3 only: residual sums of the candidate models.
    pub model_rss: Option<ModelComparison>,
    pub slope_target: Option<f64>,
    pub slope_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelComparison {
    pub log_corrected: f64,
    pub pow_half: f64,
    pub pow_one: f64,
    pub winner: String,
}

pub fn fit_rate(rows: &[SweepRow], dim: usize, tau: f64) -> Result<FitReport> {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.ok && r.max_grad > 0.0).collect();
    if ok.len() < 5 {
        return Err(Error::Config(format!(
            "rate fit needs at least 5 successful rows, got {}",
            ok.len()
        )));
    }
    let xs: Vec<f64> = ok.iter().map(|r| r.delta.ln()).collect();
    let ys: Vec<f64> = ok.iter().map(|r| r.max_grad.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let slope_band = if n > 2.0 {
        1.96 * (rss / (n - 2.0)).sqrt() / sxx.sqrt()
    } else {
        f64::INFINITY
    };

    let mut prefactors = Vec::with_capacity(ok.len());
    let mut deltas = Vec::with_capacity(ok.len());
    for r in &ok {
        prefactors.push(r.max_grad / phi_n(r.delta, dim)?);
        deltas.push(r.delta);
    }
    let d_min = deltas.iter().fold(f64::MAX, |m, d| m.min(*d));
    let tail: Vec<f64> = deltas
        .iter()
        .zip(&prefactors)
        .filter(|(d, _)| **d <= d_min * 10f64.powf(0.5))
        .map(|(_, p)| *p)
        .collect();
    let (lo, hi) = tail
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(*p), b.max(*p)));
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let prefactor_spread = (hi - lo) / mean.abs().max(1e-300);

    let intercept_only_rss = |model: &dyn Fn(f64) -> f64| -> f64 {
        let zs: Vec<f64> = ok
            .iter()
            .map(|r| r.max_grad.ln() - model(r.delta).ln())
            .collect();
        let zbar = zs.iter().sum::<f64>() / zs.len() as f64;
        zs.iter().map(|z| (z - zbar).powi(2)).sum()
    };
    let (model_rss, slope_target, slope_ok) = if dim == 3 {
        let log_corrected = intercept_only_rss(&|d: f64| 1.0 / (d * d.ln().abs()));
        let pow_half = intercept_only_rss(&|d: f64| d.powf(-0.5));
        let pow_one = intercept_only_rss(&|d: f64| 1.0 / d);
        let winner = if log_corrected <= pow_half && log_corrected <= pow_one {
            "log_corrected"
        } else if pow_half <= pow_one {
            "pow_half"
        } else {
            "pow_one"
        };
        let cmp = ModelComparison {
            log_corrected,
            pow_half,
            pow_one,
            winner: winner.into(),
        };
        let ok_flag = winner == "log_corrected";
        (Some(cmp), None, ok_flag)
    } else {
        let target = if dim == 2 { -0.5 } else { -1.0 };
        (None, Some(target), (slope - target).abs() <= 0.07)
    };

    Ok(FitReport {
        dim,
        tau,
        slope,
        slope_band,
        intercept,
        prefactors,
        deltas,
        prefactor_spread,
        model_rss,
        slope_target,
        slope_ok,
    })
}

/// Prediction report built from the closed-form machinery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionReport {
    pub dim: usize,
    pub det_q: f64,
    pub geom_factor: f64,
    pub dh0_axis: f64,
    pub grad_h0_norm: f64,
    pub c_n: f64,
    pub r0: f64,
    pub tau: f64,
    pub delta_u_prefactor: f64,
    /// Per-δ tables: (δ, Φ_N, Ψ_N, ΔU band low, ΔU band high).
    pub table: Vec<(f64, f64, f64, f64, f64)>,
}

pub fn predict(cfg: &ScenarioConfig) -> Result<PredictionReport> {
    let ambient = cfg.norm.ambient_norm(cfg.dim)?;
    let delta0 = cfg.inclusions.deltas[0];
    let wcfg = WulffConfig::canonical(
        ambient,
        cfg.inclusions.r1,
        cfg.inclusions.r2,
        delta0,
    )?;
    let r0 = match cfg.predict.r0 {
        Some(v) => v,
        None => {
            let section = cfg.norm.section_norm()?;
            if cfg.dim != 2 {
                return Err(Error::Config(
                    "automatic R0 is implemented for dim 2; provide predict.r0 for dim 3".into(),
                ));
            }
            let delta_ref = cfg
                .predict
                .delta_ref
                .unwrap_or(1e-3 * cfg.inclusions.r1);
            fem::compute_r0(
                &section,
                cfg.inclusions.r1,
                cfg.inclusions.r2,
                cfg.r_out(),
                &cfg.affine(),
                delta_ref,
                &cfg.mesh.grading(),
                &cfg.solve_opts(),
            )?
            .value
        }
    };
    let pred = BlowupPrediction::from_config(&wcfg, r0, cfg.fit.tau)?;
    let mut table = Vec::new();
    for d in &cfg.inclusions.deltas {
        let (lo, hi) = crate::analytic::delta_u_band(&pred, *d)?;
        table.push((*d, pred.phi(*d)?, pred.psi(*d)?, lo, hi));
    }
    Ok(PredictionReport {
        dim: cfg.dim,
        det_q: pred.det_q,
        geom_factor: pred.geom_factor,
        dh0_axis: pred.dh0_axis,
        grad_h0_norm: pred.grad_h0_norm,
        c_n: pred.c_n,
        r0,
        tau: cfg.fit.tau,
        delta_u_prefactor: pred.delta_u_prefactor(),
        table,
    })
}

// ---------------------------------------------------------------- plots

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    bottom: f64,
    width: f64,
    height: f64,
}

impl Axes {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = self.left + (x - self.x0) / (self.x1 - self.x0) * self.width;
        let py = self.bottom - (y - self.y0) / (self.y1 - self.y0) * self.height;
        (px, py)
    }

    fn frame(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
            self.left,
            self.bottom - self.height,
            self.width,
            self.height
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"20\" font-size=\"14\">{title}</text>\n",
            self.left
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{xlabel}</text>\n",
            self.left + self.width / 2.0 - 30.0,
            self.bottom + 30.0
        );
        let _ = write!(
            s,
            "<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\">{ylabel}</text>\n",
            self.bottom - self.height / 2.0,
            self.bottom - self.height / 2.0
        );
        s
    }
}

fn make_axes(xs: &[f64], ys: &[f64]) -> Axes {
    let (mut x0, mut x1) = (f64::MAX, f64::MIN);
    let (mut y0, mut y1) = (f64::MAX, f64::MIN);
    for x in xs {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
    }
    for y in ys {
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    let pad = |a: &mut f64, b: &mut f64| {
        let d = (*b - *a).max(1e-9);
        *a -= 0.05 * d;
        *b += 0.05 * d;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    Axes {
        x0,
        x1,
        y0,
        y1,
        left: 60.0,
        bottom: 420.0,
        width: 540.0,
        height: 370.0,
    }
}

/// Log–log blow-up rate plot: measured points, fitted line, (1±τ) band.
pub fn rate_plot(rows: &[SweepRow], fit: &FitReport) -> String {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.ok && r.max_grad > 0.0)
        .map(|r| (r.delta.log10(), r.max_grad.log10()))
        .collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let ax = make_axes(&xs, &ys);
    let mut svg = svg_open(660.0, 470.0);
    svg.push_str(&ax.frame("gradient blow-up rate", "log10 delta", "log10 max H(grad u)"));
    // fitted line and the (1±τ) band, converted to base-10
    let l10 = std::f64::consts::LN_10;
    for (factor, style) in [
        (1.0, "stroke=\"black\""),
        (1.0 + fit.tau, "stroke=\"gray\" stroke-dasharray=\"4\""),
        (1.0 - fit.tau, "stroke=\"gray\" stroke-dasharray=\"4\""),
    ] {
        let y_at = |x10: f64| {
            (fit.intercept + fit.slope * (x10 * l10)) / l10 + factor.log10()
        };
        let (px0, py0) = ax.map(ax.x0, y_at(ax.x0));
        let (px1, py1) = ax.map(ax.x1, y_at(ax.x1));
        let _ = write!(
            svg,
            "<line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px1}\" y2=\"{py1}\" {style}/>\n"
        );
    }
    for (x, y) in &pts {
        let (px, py) = ax.map(*x, *y);
        let _ = write!(
            svg,
            "<circle cx=\"{px}\" cy=\"{py}\" r=\"4\" fill=\"steelblue\"/>\n"
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Prefactor sequence max H(∇u)/Φ_N(δ) against log10 δ.
pub fn prefactor_plot(fit: &FitReport) -> String {
    let xs: Vec<f64> = fit.deltas.iter().map(|d| d.log10()).collect();
    let ax = make_axes(&xs, &fit.prefactors);
    let mut svg = svg_open(660.0, 470.0);
    svg.push_str(&ax.frame("prefactor sequence", "log10 delta", "max H / Phi_N"));
    for (x, p) in xs.iter().zip(&fit.prefactors) {
        let (px, py) = ax.map(*x, *p);
        let _ = write!(
            svg,
            "<circle cx=\"{px}\" cy=\"{py}\" r=\"4\" fill=\"firebrick\"/>\n"
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Element-colored heatmap of H(∇u) with a marker at the argmax.
pub fn heatmap_plot(mesh: &Mesh, field: &fem::DiscreteField, norm: &NormModel) -> String {
    let mut hs = Vec::with_capacity(mesh.triangles.len());
    let mut hmax = 0.0f64;
    for t in 0..mesh.triangles.len() {
        let g = fem::element_grad_h(mesh, field, norm, t);
        hmax = hmax.max(g);
        hs.push(g);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for v in &mesh.vertices {
        x0 = x0.min(v[0]);
        x1 = x1.max(v[0]);
        y0 = y0.min(v[1]);
        y1 = y1.max(v[1]);
    }
    let size = 640.0;
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let sx = |x: f64| (x - x0) / span * (size - 20.0) + 10.0;
    let sy = |y: f64| size - ((y - y0) / span * (size - 20.0) + 10.0);
    let mut svg = svg_open(size, size);
    let lo = hmax * 1e-3;
    for (t, h) in hs.iter().enumerate() {
        let [a, b, c] = mesh.triangles[t];
        // log-scale blue→red ramp
        let u = if *h <= lo {
            0.0
        } else {
            (h / lo).ln() / (hmax / lo).ln()
        };
        let r = (255.0 * u) as u8;
        let bl = (255.0 * (1.0 - u)) as u8;
        let _ = write!(
            svg,
            "<polygon points=\"{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\" fill=\"rgb({r},60,{bl})\"/>\n",
            sx(mesh.vertices[a][0]),
            sy(mesh.vertices[a][1]),
            sx(mesh.vertices[b][0]),
            sy(mesh.vertices[b][1]),
            sx(mesh.vertices[c][0]),
            sy(mesh.vertices[c][1]),
        );
    }
    let (_, _, loc) = fem::max_grad_h(field, mesh, norm, Region::All);
    let _ = write!(
        svg,
        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"6\" fill=\"none\" stroke=\"lime\" stroke-width=\"2\"/>\n",
        sx(loc[0]),
        sy(loc[1])
    );
    svg.push_str("</svg>\n");
    svg
}
