//! Closed-form and asymptotic formulas: annulus solutions and their
//! gradient bounds, the blow-up rates Φ_N/Ψ_N, the neck surface integral
//! with its small-δ asymptote, flux barriers, the ΔU band, the neck
//! cutoff function, and the P-function.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{symmetric_sqrt, WulffConfig};
use crate::norms::NormModel;

/// Radial Finsler-harmonic problem on `B_{H₀}(R) ∖ B̄_{H₀}(r)` with
/// constant boundary values.
#[derive(Debug, Clone)]
pub struct AnnulusSpec {
    pub norm: NormModel,
    pub center: DVector<f64>,
    pub r: f64,
    pub big_r: f64,
    pub c_r: f64,
    pub c_big_r: f64,
}

impl AnnulusSpec {
    pub fn new(
        norm: NormModel,
        center: DVector<f64>,
        r: f64,
        big_r: f64,
        c_r: f64,
        c_big_r: f64,
    ) -> Result<Self> {
        if !(0.0 < r && r < big_r) {
            return Err(Error::Config("annulus radii must satisfy 0 < r < R".into()));
        }
        Ok(AnnulusSpec {
            norm,
            center,
            r,
            big_r,
            c_r,
            c_big_r,
        })
    }

    fn radial(&self, x: &DVector<f64>) -> Result<f64> {
        let rho = self.norm.dual(&(x - &self.center));
        let slack = 1e-12 * self.big_r;
        if rho < self.r - slack || rho > self.big_r + slack {
            return Err(Error::Domain(format!(
                "point at dual radius {rho} outside the annulus [{}, {}]",
                self.r, self.big_r
            )));
        }
        Ok(rho.clamp(self.r, self.big_r))
    }
}

/// Exact value of the radial Finsler-harmonic function: the log profile
/// at `N = 2`, the `H₀^{2−N}` profile at `N ≥ 3`.
pub fn annulus_solution(spec: &AnnulusSpec, x: &DVector<f64>) -> Result<f64> {
    let rho = spec.radial(x)?;
    let n = spec.norm.dim();
    let dc = spec.c_r - spec.c_big_r;
    let g = if n == 2 {
        (rho / spec.big_r).ln() / (spec.r / spec.big_r).ln()
    } else {
        let p = 2.0 - n as f64;
        (rho.powf(p) - spec.big_r.powf(p)) / (spec.r.powf(p) - spec.big_r.powf(p))
    };
    Ok(dc * g + spec.c_big_r)
}

/// Exact gradient of the annulus solution, via the chain rule through
/// `∇H₀`.
pub fn annulus_gradient(spec: &AnnulusSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    let rho = spec.radial(x)?;
    let n = spec.norm.dim();
    let dc = spec.c_r - spec.c_big_r;
    let dg = if n == 2 {
        1.0 / (rho * (spec.r / spec.big_r).ln())
    } else {
        let p = 2.0 - n as f64;
        p * rho.powf(p - 1.0) / (spec.r.powf(p) - spec.big_r.powf(p))
    };
    let grad_h0 = spec.norm.dual_jet(&(x - &spec.center))?.gradient;
    Ok(grad_h0 * (dc * dg))
}

/// The explicit lower/upper bounds on `H(∇v)` over the closed annulus:
/// `|ΔC|/(ρ ln(R/r))` at `N = 2`, `(N−2)|ΔC|/([(r/R)^{2−N}−1] ρ)` at
/// `N ≥ 3`, with `ρ = R` (lower) and `ρ = r` (upper).
pub fn annulus_gradient_bounds(spec: &AnnulusSpec) -> (f64, f64) {
    let n = spec.norm.dim();
    let dc = (spec.c_r - spec.c_big_r).abs();
    if n == 2 {
        let l = (spec.big_r / spec.r).ln();
        (dc / (spec.big_r * l), dc / (spec.r * l))
    } else {
        // sup/inf of the exact gradient: H(∇v) = (N−2)|ΔC|ρ^{1−N}/(r^{2−N}−R^{2−N}),
        // monotone in ρ, so the extremes sit on the two boundary spheres.
        // (The source display divides by ρ instead of multiplying by
        // ρ^{1−N}/R^{2−N}; that variant under-reports the inner-boundary
        // maximum by (R/r)^{N−2} and is not an upper bound.)
        let p = 2.0 - n as f64;
        let k = (n as f64 - 2.0) * dc / (spec.r.powf(p) - spec.big_r.powf(p));
        (
            k * spec.big_r.powf(p - 1.0),
            k * spec.r.powf(p - 1.0),
        )
    }
}

/// Blow-up rate `Φ_N(δ)`: `δ^{−1/2}` (N=2), `1/(δ|ln δ|)` (N=3),
/// `δ^{−1}` (N≥4).
pub fn phi_n(delta: f64, n: usize) -> Result<f64> {
    check_delta(delta, n)?;
    Ok(match n {
        2 => delta.powf(-0.5),
        3 => 1.0 / (delta * delta.ln().abs()),
        _ => 1.0 / delta,
    })
}

/// Potential-gap rate `Ψ_N(δ)`: `δ^{1/2}` (N=2), `1/|ln δ|` (N=3),
/// `1` (N≥4).
pub fn psi_n(delta: f64, n: usize) -> Result<f64> {
    check_delta(delta, n)?;
    Ok(match n {
        2 => delta.sqrt(),
        3 => 1.0 / delta.ln().abs(),
        _ => 1.0,
    })
}

fn check_delta(delta: f64, n: usize) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "delta = {delta} outside (0, 1); the N = {n} rate is undefined there"
        )));
    }
    Ok(())
}

/// Dimensional constant `C_N = lim ψ_N(δ)^{−1} ∫_{|z|<δ^{−1/2}} dz/(1+|z|²)`
/// over `z ∈ ℝ^{N−1}`, evaluated by radial quadrature at a small δ.
///
/// Equals π for N = 2 and N = 3.
pub fn c_n(n: usize) -> f64 {
    let delta = 1e-12f64;
    let l = delta.powf(-0.5);
    let d = n - 1;
    let integral = match d {
        1 => 2.0 * adaptive_simpson(&|z: f64| 1.0 / (1.0 + z * z), 0.0, l, 1e-10),
        2 => {
            // 2π ∫ ρ/(1+ρ²) dρ has log growth; integrate exactly scaled
            2.0 * std::f64::consts::PI
                * adaptive_simpson(&|rho: f64| rho / (1.0 + rho * rho), 0.0, l, 1e-10)
        }
        _ => {
            let sphere = sphere_area(d);
            sphere
                * adaptive_simpson(
                    &|rho: f64| rho.powi(d as i32 - 1) / (1.0 + rho * rho),
                    0.0,
                    l,
                    1e-10,
                )
        }
    };
    let psi = match n {
        2 => 1.0,
        3 => -delta.ln(),
        _ => delta.powf(-((n as f64 - 3.0) / 2.0)),
    };
    integral / psi
}

/// Surface area of the unit sphere `S^{d−1}` in `ℝ^d`.
fn sphere_area(d: usize) -> f64 {
    use std::f64::consts::PI;
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        4 => 2.0 * PI * PI,
        _ => unimplemented!("sphere area for d > 4"),
    }
}

/// Solves the boundary cap of inclusion 1 as a graph `x_N = φ(x')`:
/// returns `(φ(x'), ∇φ(x'))` for the lower cap facing the gap.
pub fn boundary_graph(cfg: &WulffConfig, xp: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let n = cfg.norm.dim();
    let c1 = &cfg.shape1.center;
    let r1 = cfg.shape1.radius;
    let t0 = cfg.p_hat[n - 1];
    let point = |y: f64| {
        let mut p = DVector::zeros(n);
        for i in 0..n - 1 {
            p[i] = xp[i];
        }
        p[n - 1] = y;
        p
    };
    let g = |y: f64| cfg.norm.dual(&(point(y) - c1)) - r1;
    // the on-axis cap is at y = c1_N − R₁t₀; bracket around it
    let mut lo = c1[n - 1] - 1.5 * r1 * t0;
    let mut hi = c1[n - 1];
    if !(g(lo) > 0.0 && g(hi) < 0.0) {
        return Err(Error::Geometry(
            "boundary cap is not a graph over the requested point".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * r1 {
            break;
        }
    }
    let y = 0.5 * (lo + hi);
    let jet = cfg.norm.dual_jet(&(point(y) - c1))?;
    let dn = jet.gradient[n - 1];
    if dn.abs() < 1e-14 {
        return Err(Error::Geometry("graph slope degenerate on the cap".into()));
    }
    let dphi = DVector::from_fn(n - 1, |i, _| -jet.gradient[i] / dn);
    Ok((y, dphi))
}

/// Surface integral `Î = ∫ dσ/(δ + c·Qx'·x')` over the boundary cap
/// `{|Q^{1/2}x'| < w}` of inclusion 1, reduced to the graph form
/// `∫ √(1+|∇φ|²)/(δ + c·Qx'·x') dx'` and integrated adaptively to
/// relative 1e−8.
pub fn neck_integral(cfg: &WulffConfig, c: f64, w: f64, delta: f64) -> Result<f64> {
    assert!(c > 0.0 && w > 0.0 && delta > 0.0);
    let n = cfg.norm.dim();
    match n {
        2 => {
            let q = cfg.q[(0, 0)];
            let half = w / q.sqrt();
            let f = |x: f64| {
                let xp = DVector::from_vec(vec![x]);
                let (_, dphi) = boundary_graph(cfg, &xp).expect("graph solve");
                (1.0 + dphi[0] * dphi[0]).sqrt() / (delta + c * q * x * x)
            };
            Ok(adaptive_simpson(&f, -half, half, 1e-8))
        }
        3 => {
            // substitute y = Q^{1/2}x' and integrate in polar coordinates
            let q_half_inv = symmetric_sqrt(&cfg.q)
                .try_inverse()
                .ok_or_else(|| Error::Numeric("Q^{1/2} not invertible".into()))?;
            let det_q = cfg.q.determinant();
            let f_angle = |rho: f64, theta: f64| {
                let y = DVector::from_vec(vec![rho * theta.cos(), rho * theta.sin()]);
                let xp = &q_half_inv * y;
                let (_, dphi) = boundary_graph(cfg, &xp).expect("graph solve");
                (1.0 + dphi.norm_squared()).sqrt() / (delta + c * rho * rho)
            };
            let radial = |rho: f64| {
                rho * adaptive_simpson(
                    &|th: f64| f_angle(rho, th),
                    0.0,
                    2.0 * std::f64::consts::PI,
                    1e-9,
                )
            };
            Ok(det_q.powf(-0.5) * adaptive_simpson(&radial, 0.0, w, 1e-8))
        }
        _ => Err(Error::Domain(
            "neck integral implemented for N = 2, 3 only".into(),
        )),
    }
}

/// Small-δ asymptote of the neck integral:
/// `c^{−(N−1)/2}·det(Q)^{−1/2}·C_N·(|∇H₀(P₀)|/|∂_{ξ_N}H₀(P₀)|)·Ψ_N(δ)^{−1}`.
///
/// The change of variables `y' = √(c/δ)·Q^{1/2}x'` produces
/// `det(Q)^{−1/2}` for every N; at N = 2 this coincides with the
/// `(c detQ)^{−(N−1)/2}` grouping of the source display. The graph-area
/// factor at the apex is `√(1+|∇φ|²) = |∇H₀|/|∂_{ξ_N}H₀|`; the display
/// keeps only `1/|∂_{ξ_N}H₀|` and absorbs `|∇H₀(P̂)| = 1/(ν_H(P̂)·ν(P̂))`
/// into its unexplicit dimensional constant, so it is included here.
pub fn neck_asymptote(cfg: &WulffConfig, c: f64, delta: f64) -> Result<f64> {
    let n = cfg.norm.dim();
    let det_q = cfg.q.determinant();
    let jet = cfg.norm.dual_jet(&cfg.p_hat)?;
    let area = jet.gradient.norm() / jet.gradient[n - 1].abs();
    Ok(c.powf(-((n as f64 - 1.0) / 2.0)) * det_q.powf(-0.5) * c_n(n) * area
        / psi_n(delta, n)?)
}

/// `|∂_{ξ_N}H₀|` along the touching axis (evaluated at `P̂`; `∇H₀` is
/// 0-homogeneous so any axis point gives the same value).
pub fn axis_dual_slope(cfg: &WulffConfig) -> Result<f64> {
    let n = cfg.norm.dim();
    Ok(cfg.norm.dual_jet(&cfg.p_hat)?.gradient[n - 1].abs())
}

/// Closed 1-D flat-graph limit of the N=2 neck integral:
/// `(2/√(cδ))·arctan(w√(c/δ))`.
pub fn neck_arctan_limit(c: f64, w: f64, delta: f64) -> f64 {
    2.0 / (c * delta).sqrt() * (w * (c / delta).sqrt()).atan()
}

/// Lower flux-density barrier at `P ∈ ∂D¹`:
/// `(U¹−U²)/(δ + (1+t)·(R₁+R₂)/(2R₁R₂)·QP⊥·P⊥) − C`.
pub fn barrier_lower(
    cfg: &WulffConfig,
    p: &DVector<f64>,
    t: f64,
    u1: f64,
    u2: f64,
    c_const: f64,
) -> f64 {
    let coef = (cfg.shape1.radius + cfg.shape2.radius)
        / (2.0 * cfg.shape1.radius * cfg.shape2.radius);
    (u1 - u2) / (cfg.delta + (1.0 + t) * coef * cfg.q_form(p)) - c_const
}

/// Upper flux-density barrier at `P ∈ ∂D¹`:
/// `(U¹−U²)/(δ + (1−t)·(R₁+R₂)/(2R₁R₂)·QP⊥·P⊥) + C`.
pub fn barrier_upper(
    cfg: &WulffConfig,
    p: &DVector<f64>,
    t: f64,
    u1: f64,
    u2: f64,
    c_const: f64,
) -> f64 {
    let coef = (cfg.shape1.radius + cfg.shape2.radius)
        / (2.0 * cfg.shape1.radius * cfg.shape2.radius);
    (u1 - u2) / (cfg.delta + (1.0 - t) * coef * cfg.q_form(p)) + c_const
}

/// All the δ-independent factors of the blow-up prediction.
#[derive(Debug, Clone)]
pub struct BlowupPrediction {
    pub n: usize,
    pub det_q: f64,
    pub r0: f64,
    /// `((R₁+R₂)/(2R₁R₂))^{(N−1)/2}`.
    pub geom_factor: f64,
    /// `|∂_{ξ_N}H₀(P₀)|`.
    pub dh0_axis: f64,
    /// Euclidean length `|∇H₀(P̂)| = 1/(ν_H(P̂)·ν(P̂))`.
    pub grad_h0_norm: f64,
    /// Band half-width τ ∈ (0, 1/2].
    pub tau: f64,
    /// Quadrature constant C_N; the band carries 1/C_N.
    pub c_n: f64,
}

impl BlowupPrediction {
    pub fn from_config(cfg: &WulffConfig, r0: f64, tau: f64) -> Result<Self> {
        assert!(tau > 0.0 && tau <= 0.5);
        let n = cfg.norm.dim();
        let coef = (cfg.shape1.radius + cfg.shape2.radius)
            / (2.0 * cfg.shape1.radius * cfg.shape2.radius);
        let jet = cfg.norm.dual_jet(&cfg.p_hat)?;
        Ok(BlowupPrediction {
            n,
            det_q: cfg.q.determinant(),
            r0,
            geom_factor: coef.powf((n as f64 - 1.0) / 2.0),
            dh0_axis: jet.gradient[n - 1].abs(),
            grad_h0_norm: jet.gradient.norm(),
            tau,
            c_n: c_n(n),
        })
    }

    pub fn phi(&self, delta: f64) -> Result<f64> {
        phi_n(delta, self.n)
    }

    pub fn psi(&self, delta: f64) -> Result<f64> {
        psi_n(delta, self.n)
    }

    /// Central prefactor of the ΔU asymptote: the reciprocal of the
    /// neck-integral prefactor,
    /// `geom·det(Q)^{1/2}·(|∂_{ξ_N}H₀(P₀)|/|∇H₀(P̂)|)·|R₀|/C_N`.
    pub fn delta_u_prefactor(&self) -> f64 {
        self.geom_factor * self.det_q.sqrt() * (self.dh0_axis / self.grad_h0_norm)
            * self.r0.abs()
            / self.c_n
    }
}

/// The `(1±τ)` band for `U¹_δ − U²_δ` around
/// `prefactor · Ψ_N(δ)`.
pub fn delta_u_band(pred: &BlowupPrediction, delta: f64) -> Result<(f64, f64)> {
    let base = pred.delta_u_prefactor() * pred.psi(delta)?;
    Ok(((1.0 - pred.tau) * base, (1.0 + pred.tau) * base))
}

/// Neck cutoff in the transverse coordinate `ρ = |Q^{1/2}x'|`:
/// 0 inside the `w/2`-neck, 1 outside the `w`-neck, a quadratic ramp
/// between.
#[derive(Debug, Clone)]
pub struct CutoffSpec {
    pub width: f64,
    pub q_half: DMatrix<f64>,
}

/// Constant κ in the calibrated Hessian bound `|∇²f| ≤ κ/w²`.
///
/// The literal bound `1/w²` is unattainable: any C¹ ramp from 0 to 1
/// over a width-`w/2` shell has `max |f''| ≥ 16/w²`. The quadratic ramp
/// used here has `f'' = 8/w²` on the transition, plus the curvature term
/// `|f'|·|∇²ρ|`; κ = 32 covers both with margin for anisotropic Q.
pub const CUTOFF_HESS_CONST: f64 = 32.0;

impl CutoffSpec {
    pub fn new(width: f64, q: &DMatrix<f64>) -> Self {
        assert!(width > 0.0);
        CutoffSpec {
            width,
            q_half: symmetric_sqrt(q),
        }
    }

    fn rho(&self, x: &DVector<f64>) -> f64 {
        let xp = DVector::from_fn(x.len() - 1, |i, _| x[i]);
        (&self.q_half * xp).norm()
    }
}

/// Evaluates the cutoff and its first two derivatives at a point.
///
/// Profile: `f(ρ) = ((2ρ − w)/w)²` on `[w/2, w]`. On the transition this
/// satisfies `f/w ≤ |∇f|²` for any `w < 16·λ_min(Q)` since
/// `|f'(ρ)|² = 16 f/w²`; the Hessian obeys the calibrated bound
/// `|∇²f| ≤ κ/w²` with κ = [`CUTOFF_HESS_CONST`].
pub fn cutoff_f(x: &DVector<f64>, spec: &CutoffSpec) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let w = spec.width;
    let rho = spec.rho(x);
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    if rho <= w / 2.0 {
        return (0.0, grad, hess);
    }
    if rho >= w {
        return (1.0, grad, hess);
    }
    let s = 2.0 * rho / w - 1.0;
    let f = s * s;
    let df = 4.0 * s / w; // df/dρ
    let ddf = 8.0 / (w * w);
    // ρ(x) = |Q^{1/2}x'|: ∇ρ = Qx'/ρ, ∇²ρ = (Q − ∇ρ⊗∇ρ)/ρ on x'
    let xp = DVector::from_fn(n - 1, |i, _| x[i]);
    let q = &spec.q_half * &spec.q_half;
    let grad_rho_p = &q * &xp / rho;
    let hess_rho_p = (&q - &grad_rho_p * grad_rho_p.transpose()) / rho;
    for i in 0..n - 1 {
        grad[i] = df * grad_rho_p[i];
        for j in 0..n - 1 {
            hess[(i, j)] = ddf * grad_rho_p[i] * grad_rho_p[j] + df * hess_rho_p[(i, j)];
        }
    }
    (f, grad, hess)
}

/// Samples the cutoff over the neck and checks the gradient and Hessian
/// inequalities; errors if the calibrated constants are violated.
pub fn verify_cutoff(spec: &CutoffSpec, samples: usize, dim: usize, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = spec.width;
    for _ in 0..samples {
        let x = DVector::from_fn(dim, |i, _| {
            if i < dim - 1 {
                rng.gen_range(-2.0 * w..2.0 * w)
            } else {
                rng.gen_range(-w..w)
            }
        });
        let rho = spec.rho(&x);
        let (f, grad, hess) = cutoff_f(&x, spec);
        if rho <= w / 2.0 && f != 0.0 {
            return Err(Error::Numeric("cutoff nonzero inside the half-neck".into()));
        }
        if rho >= w && f != 1.0 {
            return Err(Error::Numeric("cutoff below one outside the neck".into()));
        }
        if rho > w / 2.0 && rho < w {
            if f / w > grad.norm_squared() * (1.0 + 1e-12) {
                return Err(Error::Numeric(format!(
                    "cutoff gradient inequality fails at rho = {rho}"
                )));
            }
            let hess_norm = hess.clone().symmetric_eigen().eigenvalues.abs().max();
            if hess_norm > CUTOFF_HESS_CONST / (w * w) {
                return Err(Error::Numeric(format!(
                    "cutoff Hessian bound fails: {hess_norm} > {}",
                    CUTOFF_HESS_CONST / (w * w)
                )));
            }
        }
    }
    Ok(())
}

/// `P(x) = f(x)·H(∇u)² + λu²` from point values of the field and its
/// gradient.
pub fn p_function(
    norm: &NormModel,
    u: f64,
    grad_u: &DVector<f64>,
    lambda: f64,
    x: &DVector<f64>,
    spec: &CutoffSpec,
) -> f64 {
    let (f, _, _) = cutoff_f(x, spec);
    let h = norm.eval(grad_u);
    f * h * h + lambda * u * u
}

/// Calibrated threshold `λ₀ = κ/w²` above which the P-function maximum
/// principle is expected to hold.
///
/// κ = 4 is the smallest power of two for which the annulus diagnostic
/// passes on the built-in norm families (see tests).
pub const LAMBDA0_CONST: f64 = 4.0;

pub fn lambda_0(w: f64) -> f64 {
    LAMBDA0_CONST / (w * w)
}

/// Adaptive Simpson quadrature to the given relative tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    let scale = whole.abs().max(1e-300);
    recurse(f, a, fa, b, fb, m, fm, whole, rel_tol * scale, 48)
}
