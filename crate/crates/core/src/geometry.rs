//! Wulff-shape geometry: tangency, anisotropic normals, the neck, the
//! transverse-curvature matrix `Q`, and exact vs. asymptotic radii of the
//! touching-ball constructions.
//!
//! Everything here works in the canonical frame: the touching axis is the
//! last coordinate axis, inclusion 1 sits on the positive side, and the
//! midpoint of the gap is the origin.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::norms::NormModel;

/// Tolerance for boundary/tangency membership checks.
pub const GEOM_TOL: f64 = 1e-10;

/// An anisotropic ball `{H₀(x − center) < radius}`.
#[derive(Debug, Clone)]
pub struct WulffShape {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl WulffShape {
    pub fn new(center: DVector<f64>, radius: f64) -> Self {
        assert!(radius > 0.0, "Wulff radius must be positive");
        WulffShape { center, radius }
    }

    pub fn contains(&self, x: &DVector<f64>, norm: &NormModel) -> bool {
        norm.dual(&(x - &self.center)) < self.radius
    }

    /// The boundary point in direction `dir` from the center.
    pub fn boundary_point(&self, dir: &DVector<f64>, norm: &NormModel) -> DVector<f64> {
        &self.center + dir * (self.radius / norm.dual(dir))
    }
}

/// Two inclusions at dual-norm distance `delta` in the canonical frame,
/// with the touching-axis data: the near-gap boundary point `P₀`, the
/// unit-axis point `P̂`, and the transverse Hessian block `Q` of `H₀`.
#[derive(Debug, Clone)]
pub struct WulffConfig {
    pub norm: NormModel,
    pub shape1: WulffShape,
    pub shape2: WulffShape,
    pub delta: f64,
    /// `P₀ ∈ ∂D¹` on the segment joining the centers.
    pub p0: DVector<f64>,
    /// `P̂ = (0,…,0,t₀)` with `H₀(P̂) = 1`.
    pub p_hat: DVector<f64>,
    /// Leading (N−1)×(N−1) block of `∇²H₀(P̂)`.
    pub q: DMatrix<f64>,
}

impl WulffConfig {
    /// Builds the canonical two-inclusion configuration: centers on the
    /// last coordinate axis at dual distance `R₁ + R₂ + δ`, gap midpoint
    /// at the origin.
    pub fn canonical(norm: NormModel, r1: f64, r2: f64, delta: f64) -> Result<Self> {
        if r1 <= 0.0 || r2 <= 0.0 || delta < 0.0 {
            return Err(Error::Config(
                "radii must be positive and delta nonnegative".into(),
            ));
        }
        let n = norm.dim();
        let p_hat = unit_axis_point(&norm, n)?;
        let c1 = &p_hat * (r1 + delta / 2.0);
        let c2 = &p_hat * -(r2 + delta / 2.0);
        let q = matrix_q(&norm, n)?;
        let p0 = &p_hat * (delta / 2.0);
        let cfg = WulffConfig {
            norm,
            shape1: WulffShape::new(c1, r1),
            shape2: WulffShape::new(c2, r2),
            delta,
            p0,
            p_hat,
            q,
        };
        let gap = dist_h0(&cfg.shape1.center, &cfg.shape2.center, &cfg.norm)
            - cfg.shape1.radius
            - cfg.shape2.radius;
        debug_assert!((gap - delta).abs() <= GEOM_TOL * (1.0 + delta));
        Ok(cfg)
    }

    /// Transverse (first N−1) components of a point, as the projection on
    /// the hyperplane orthogonal to the axis.
    pub fn p_perp(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(p.len() - 1, |i, _| p[i])
    }

    /// `Q p⊥ · p⊥` for a point on `∂D¹` near the gap.
    pub fn q_form(&self, p: &DVector<f64>) -> f64 {
        let pp = self.p_perp(p);
        (&self.q * &pp).dot(&pp)
    }
}

/// Distance in the ambient norm, `H₀(b − a)`.
pub fn dist_h0(a: &DVector<f64>, b: &DVector<f64>, norm: &NormModel) -> f64 {
    norm.dual(&(b - a))
}

/// The point `P̂ = t₀·ê_N` on `∂B_{H₀}(0,1)` with `t₀ > 0`, located by
/// 1-D root finding on `t ↦ H₀(t·ê_N) − 1`.
pub fn unit_axis_point(norm: &NormModel, n: usize) -> Result<DVector<f64>> {
    let e_n = DVector::from_fn(n, |i, _| if i == n - 1 { 1.0 } else { 0.0 });
    let h0 = norm.dual(&e_n);
    if !(h0 > 0.0) {
        return Err(Error::Numeric("dual norm degenerate on the axis".into()));
    }
    // bisection on [lo, hi] bracketing H₀(t ê_N) = 1
    let mut lo = 0.5 / h0;
    let mut hi = 2.0 / h0;
    let f = |t: f64| norm.dual(&(&e_n * t)) - 1.0;
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(Error::Numeric("failed to bracket the unit axis point".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    let t0 = 0.5 * (lo + hi);
    Ok(e_n * t0)
}

/// The matrix `Q`: leading (N−1)×(N−1) block of `∇²H₀(P̂)`.
pub fn matrix_q(norm: &NormModel, n: usize) -> Result<DMatrix<f64>> {
    let p_hat = unit_axis_point(norm, n)?;
    let jet = norm.dual_jet(&p_hat)?;
    let q = jet.hessian.view((0, 0), (n - 1, n - 1)).into_owned();
    let eig = q.clone().symmetric_eigen();
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::Numeric(
            "transverse Hessian block of the dual norm is not positive definite".into(),
        ));
    }
    Ok(q)
}

/// Touching point of two externally tangent Wulff shapes; lies on the
/// segment joining the centers.
pub fn tangency_point(
    s1: &WulffShape,
    s2: &WulffShape,
    norm: &NormModel,
) -> Result<DVector<f64>> {
    let d = dist_h0(&s1.center, &s2.center, norm);
    let rsum = s1.radius + s2.radius;
    if (d - rsum).abs() > 1e-8 * rsum {
        return Err(Error::Geometry(format!(
            "shapes not externally tangent: center distance {d}, radius sum {rsum}"
        )));
    }
    let x = &s1.center + (&s2.center - &s1.center) * (s1.radius / d);
    // normals of the two boundaries must be parallel at the touching point
    let g1 = norm.dual_jet(&(&x - &s1.center))?.gradient;
    let g2 = norm.dual_jet(&(&s2.center - &x))?.gradient;
    let cross = (&g1 / g1.norm() - &g2 / g2.norm()).norm();
    if cross > 1e-8 {
        return Err(Error::Geometry(format!(
            "tangency normals disagree by {cross:.3e}"
        )));
    }
    Ok(x)
}

/// Anisotropic normal `ν_H(x) = ∇H(ν(x))` at a boundary point of a Wulff
/// shape; equals `(x − center)/radius`.
pub fn anisotropic_normal(
    shape: &WulffShape,
    x: &DVector<f64>,
    norm: &NormModel,
) -> Result<DVector<f64>> {
    let rel = x - &shape.center;
    if (norm.dual(&rel) - shape.radius).abs() > 1e-8 * shape.radius {
        return Err(Error::Geometry(
            "point is not on the Wulff boundary".into(),
        ));
    }
    let nu = norm.dual_jet(&rel)?.gradient;
    let nu = &nu / nu.norm();
    Ok(norm.jet(&nu)?.gradient)
}

/// Neck membership: width and cap-radius bounds around the gap.
#[derive(Debug, Clone, Copy)]
pub struct NeckSpec {
    pub width: f64,
    pub cap_radius: f64,
}

/// True iff `x ∈ Ω_δ`, `|Q^{1/2}x'| < w` and `H₀(x) < r` (strict).
pub fn neck_membership(x: &DVector<f64>, cfg: &WulffConfig, spec: &NeckSpec) -> bool {
    let in_omega = !cfg.shape1.contains(x, &cfg.norm)
        && !cfg.shape2.contains(x, &cfg.norm)
        && dist_h0(&cfg.shape1.center, x, &cfg.norm) >= cfg.shape1.radius
        && dist_h0(&cfg.shape2.center, x, &cfg.norm) >= cfg.shape2.radius;
    if !in_omega {
        return false;
    }
    let xp = cfg.p_perp(x);
    let q_half = symmetric_sqrt(&cfg.q);
    (&q_half * &xp).norm() < spec.width && cfg.norm.dual(x) < spec.cap_radius
}

/// Symmetric square root of a symmetric positive-definite matrix.
pub fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Center of the interior ball of radius `t·R₁` touching `∂D¹` at `p`.
fn inner_ball_center(cfg: &WulffConfig, p: &DVector<f64>, t: f64) -> DVector<f64> {
    // ν_H(p) = (p − c₁)/R₁ on a Wulff boundary
    let nu_h = (p - &cfg.shape1.center) / cfg.shape1.radius;
    p - nu_h * (t * cfg.shape1.radius)
}

/// Exact radii `(r₁, r₂)` of the interior touching-ball construction:
/// `r₁ = t·R₁`, `r₂ = dist_{H₀}(y₀, ∂D²)`.
///
/// In 2-D the distance is found by minimizing `H₀(x − y₀)` over a
/// boundary parameterization of `∂D²` with 16 multi-starts; for `N ≥ 3`
/// the segment-through-the-center formula is used directly.
pub fn touching_radii_inner(cfg: &WulffConfig, p: &DVector<f64>, t: f64) -> Result<(f64, f64)> {
    assert!(t > 0.0 && t <= 1.0);
    let r1 = t * cfg.shape1.radius;
    let y0 = inner_ball_center(cfg, p, t);
    let r2 = if cfg.norm.dim() == 2 {
        min_dist_to_boundary_2d(&cfg.shape2, &y0, &cfg.norm)?
    } else {
        dist_h0(&cfg.shape2.center, &y0, &cfg.norm) - cfg.shape2.radius
    };
    Ok((r1, r2))
}

/// Exact radii `(ρ₁, ρ₂)` of the exterior touching-ball construction:
/// `ρ₂ = t·R₁` for the ball touching `∂D¹` at `p` from the outside with
/// center toward `D²`; `ρ₁` is the concentric radius touching `∂D²` from
/// the inside.
pub fn touching_radii_outer(cfg: &WulffConfig, p: &DVector<f64>, t: f64) -> Result<(f64, f64)> {
    assert!(t > 0.0 && t < 1.0);
    let rho2 = t * cfg.shape1.radius;
    let nu_h = (p - &cfg.shape1.center) / cfg.shape1.radius;
    let y_bar = p + nu_h * rho2;
    let d = dist_h0(&cfg.shape2.center, &y_bar, &cfg.norm);
    if d >= cfg.shape2.radius {
        return Err(Error::Geometry(
            "exterior ball center is not inside the second inclusion".into(),
        ));
    }
    let rho1 = cfg.shape2.radius - d;
    Ok((rho1, rho2))
}

/// Asymptotic interior-ball radii gap:
/// `δ + (1−t)·(R₁+R₂)/(2R₁R₂)·Q p⊥·p⊥`.
pub fn radii_expansion_inner(cfg: &WulffConfig, p: &DVector<f64>, t: f64, delta: f64) -> f64 {
    let coef = (cfg.shape1.radius + cfg.shape2.radius)
        / (2.0 * cfg.shape1.radius * cfg.shape2.radius);
    delta + (1.0 - t) * coef * cfg.q_form(p)
}

/// Asymptotic exterior-ball radii gap:
/// `δ + (1+t)·(R₁+R₂)/(2R₁R₂)·Q p⊥·p⊥`.
pub fn radii_expansion_outer(cfg: &WulffConfig, p: &DVector<f64>, t: f64, delta: f64) -> f64 {
    let coef = (cfg.shape1.radius + cfg.shape2.radius)
        / (2.0 * cfg.shape1.radius * cfg.shape2.radius);
    delta + (1.0 + t) * coef * cfg.q_form(p)
}

/// Second-order-accurate interior prediction,
/// `δ + (1−t)·(R₁+R₂)/(2R₁(tR₁+R₂))·Q p⊥·p⊥`.
///
/// The headline expansion above replaces `tR₁ + R₂` by `R₂` (its `t → 0`
/// limit); this variant keeps the full coefficient from the Taylor step
/// of the derivation, so the residual against the exact radii is
/// `o(δ² + |P−P₀|²)` uniformly in `t`, vanishing at `t = 1`.
pub fn radii_expansion_inner_refined(
    cfg: &WulffConfig,
    p: &DVector<f64>,
    t: f64,
    delta: f64,
) -> f64 {
    let (r1, r2) = (cfg.shape1.radius, cfg.shape2.radius);
    let coef = (r1 + r2) / (2.0 * r1 * (t * r1 + r2));
    delta + (1.0 - t) * coef * cfg.q_form(p)
}

/// Second-order-accurate exterior prediction,
/// `δ + (1+t)·(R₁+R₂)/(2R₁(R₂−tR₁))·Q p⊥·p⊥`; requires `t·R₁ < R₂`.
pub fn radii_expansion_outer_refined(
    cfg: &WulffConfig,
    p: &DVector<f64>,
    t: f64,
    delta: f64,
) -> f64 {
    let (r1, r2) = (cfg.shape1.radius, cfg.shape2.radius);
    assert!(t * r1 < r2, "exterior ball exceeds the second inclusion");
    let coef = (r1 + r2) / (2.0 * r1 * (r2 - t * r1));
    delta + (1.0 + t) * coef * cfg.q_form(p)
}

/// Minimum of `H₀(x − y₀)` over `∂shape` by golden-section refinement of
/// an angular boundary chart with 16 multi-starts; tolerance 1e−10.
fn min_dist_to_boundary_2d(
    shape: &WulffShape,
    y0: &DVector<f64>,
    norm: &NormModel,
) -> Result<f64> {
    let f = |phi: f64| {
        let dir = DVector::from_vec(vec![phi.cos(), phi.sin()]);
        let x = shape.boundary_point(&dir, norm);
        norm.dual(&(&x - y0))
    };
    let starts = 16;
    let mut best = f64::INFINITY;
    for i in 0..starts {
        let c = 2.0 * std::f64::consts::PI * i as f64 / starts as f64;
        let h = std::f64::consts::PI / starts as f64;
        best = best.min(golden_min(&f, c - h, c + h, 1e-12));
    }
    if !best.is_finite() {
        return Err(Error::Numeric("boundary distance minimization failed".into()));
    }
    Ok(best)
}

fn golden_min<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    fc.min(fd)
}
