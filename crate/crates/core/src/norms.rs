//! Anisotropic norm calculus.
//!
//! A norm `H` acts on gradients (the dual space, variable `ξ`); its dual
//! `H₀(x) = sup_{ξ≠0} x·ξ / H(ξ)` acts on ambient points. The module
//! provides jets (value/gradient/Hessian) of both, the duality map
//! `ξ ↦ H(ξ)∇H(ξ)` and its inverse, the energy Hessian
//! `A(ξ) = ½∇²H²(ξ)`, and a sampling probe for the uniform-ellipticity
//! constants.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual tolerance for the Newton inversion of the duality map.
pub const DUAL_MAP_NEWTON_TOL: f64 = 1e-12;
/// Tolerance for the numeric dual of the perturbed ellipse.
pub const NUMERIC_DUAL_TOL: f64 = 1e-10;

/// Built-in norm families.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum NormFamily {
    /// `H(ξ) = |ξ|`.
    Euclidean,
    /// `H(ξ) = sqrt(ξᵀ M ξ)` for a symmetric positive-definite `M`.
    Ellipse { matrix: DMatrix<f64> },
    /// 2-D only: `H(ξ) = sqrt(ξᵀ M ξ) · (1 + β cos(k·atan2(ξ₂, ξ₁)))`
    /// with even `k` so that central symmetry holds.
    PerturbedEllipse {
        matrix: DMatrix<f64>,
        beta: f64,
        k: u32,
    },
}

/// A norm together with its dimension; the unit of anisotropy for the
/// whole crate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormModel {
    family: NormFamily,
    dim: usize,
    /// Cached inverse of `M` for the ellipse family.
    #[serde(skip)]
    m_inv: Option<DMatrix<f64>>,
}

/// Value, gradient and Hessian of a norm at a nonzero point.
#[derive(Debug, Clone)]
pub struct NormJet {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// The energy Hessian `A(ξ) = ½∇²H²(ξ) = ∇H⊗∇H + H∇²H` with its
/// eigenvalue bounds.
#[derive(Debug, Clone)]
pub struct EnergyHessian {
    pub matrix: DMatrix<f64>,
    pub mu_min: f64,
    pub mu_max: f64,
}

fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Config("norm matrix must be square".into()));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-12 * m.norm().max(1.0) {
        return Err(Error::Config("norm matrix must be symmetric".into()));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::Config(
            "norm matrix must be positive definite".into(),
        ));
    }
    Ok(())
}

impl NormModel {
    pub fn euclidean(dim: usize) -> Self {
        NormModel {
            family: NormFamily::Euclidean,
            dim,
            m_inv: None,
        }
    }

    pub fn ellipse(matrix: DMatrix<f64>) -> Result<Self> {
        check_spd(&matrix)?;
        let dim = matrix.nrows();
        let m_inv = matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("norm matrix is singular".into()))?;
        Ok(NormModel {
            family: NormFamily::Ellipse { matrix },
            dim,
            m_inv: Some(m_inv),
        })
    }

    pub fn perturbed_ellipse(matrix: DMatrix<f64>, beta: f64, k: u32) -> Result<Self> {
        check_spd(&matrix)?;
        if matrix.nrows() != 2 {
            return Err(Error::Config("perturbed ellipse is 2-D only".into()));
        }
        if k == 0 || k % 2 != 0 {
            return Err(Error::Config(
                "perturbation frequency k must be even and nonzero".into(),
            ));
        }
        if beta.abs() >= 1.0 {
            return Err(Error::Config("|beta| must be < 1".into()));
        }
        let m_inv = matrix.clone().try_inverse().unwrap();
        Ok(NormModel {
            family: NormFamily::PerturbedEllipse { matrix, beta, k },
            dim: 2,
            m_inv: Some(m_inv),
        })
    }

    /// Rebuild caches after deserialization.
    pub fn finalize(mut self) -> Result<Self> {
        match &self.family {
            NormFamily::Euclidean => {
                self.m_inv = None;
            }
            NormFamily::Ellipse { matrix } | NormFamily::PerturbedEllipse { matrix, .. } => {
                check_spd(matrix)?;
                self.m_inv = Some(matrix.clone().try_inverse().unwrap());
            }
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &NormFamily {
        &self.family
    }

    fn m_inv(&self) -> &DMatrix<f64> {
        self.m_inv.as_ref().expect("ellipse cache present")
    }

    /// `H(ξ)`.
    pub fn eval(&self, xi: &DVector<f64>) -> f64 {
        match &self.family {
            NormFamily::Euclidean => xi.norm(),
            NormFamily::Ellipse { matrix } => (matrix * xi).dot(xi).max(0.0).sqrt(),
            NormFamily::PerturbedEllipse { matrix, beta, k } => {
                let g = (matrix * xi).dot(xi).max(0.0).sqrt();
                if g == 0.0 {
                    return 0.0;
                }
                let theta = xi[1].atan2(xi[0]);
                g * (1.0 + beta * (*k as f64 * theta).cos())
            }
        }
    }

    /// Value, gradient and Hessian of `H` at `ξ ≠ 0`.
    pub fn jet(&self, xi: &DVector<f64>) -> Result<NormJet> {
        if xi.norm() == 0.0 {
            return Err(Error::DegeneratePoint);
        }
        match &self.family {
            NormFamily::Euclidean => {
                let r = xi.norm();
                let grad = xi / r;
                let hess = (DMatrix::identity(self.dim, self.dim) - &grad * grad.transpose()) / r;
                Ok(NormJet {
                    value: r,
                    gradient: grad,
                    hessian: hess,
                })
            }
            NormFamily::Ellipse { matrix } => Ok(quadratic_jet(matrix, xi)),
            NormFamily::PerturbedEllipse { matrix, beta, k } => {
                let base = quadratic_jet(matrix, xi);
                let g = base.value;
                let kf = *k as f64;
                let theta = xi[1].atan2(xi[0]);
                let p = 1.0 + beta * (kf * theta).cos();
                let dp = -beta * kf * (kf * theta).sin();
                let ddp = -beta * kf * kf * (kf * theta).cos();
                let rho2 = xi.norm_squared();
                let v = DVector::from_vec(vec![-xi[1], xi[0]]);
                let grad_theta = &v / rho2;
                // ∇²θ = J/ρ² − 2 v ξᵀ/ρ⁴ with J the rotation generator.
                let j = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
                let hess_theta = j / rho2 - (&v * xi.transpose()) * (2.0 / (rho2 * rho2));
                let grad = &base.gradient * p + &grad_theta * (g * dp);
                let hess = &base.hessian * p
                    + (&base.gradient * grad_theta.transpose()
                        + &grad_theta * base.gradient.transpose())
                        * dp
                    + (&grad_theta * grad_theta.transpose()) * (g * ddp)
                    + hess_theta * (g * dp);
                // symmetrize against roundoff in the θ-Hessian
                let hess = (&hess + hess.transpose()) * 0.5;
                Ok(NormJet {
                    value: g * p,
                    gradient: grad,
                    hessian: hess,
                })
            }
        }
    }

    /// The dual norm `H₀(x) = sup_{ξ≠0} x·ξ / H(ξ)`; `H₀(0) = 0`.
    pub fn dual(&self, x: &DVector<f64>) -> f64 {
        match &self.family {
            NormFamily::Euclidean => x.norm(),
            NormFamily::Ellipse { .. } => (self.m_inv() * x).dot(x).max(0.0).sqrt(),
            NormFamily::PerturbedEllipse { .. } => {
                if x.norm() == 0.0 {
                    return 0.0;
                }
                self.numeric_dual(x)
            }
        }
    }

    /// Value, gradient and Hessian of `H₀` at `x ≠ 0`.
    ///
    /// Closed form for Euclidean/Ellipse; for the perturbed ellipse it is
    /// derived from the duality map: with `ξ = (H∇H)⁻¹(x)` one has
    /// `H₀(x) = H(ξ)`, `∇H₀(x) = ξ/H₀(x)` and `½∇²H₀² = A(ξ)⁻¹`.
    pub fn dual_jet(&self, x: &DVector<f64>) -> Result<NormJet> {
        if x.norm() == 0.0 {
            return Err(Error::DegeneratePoint);
        }
        match &self.family {
            NormFamily::Euclidean => self.clone_euclidean_jet(x),
            NormFamily::Ellipse { .. } => Ok(quadratic_jet(self.m_inv(), x)),
            NormFamily::PerturbedEllipse { .. } => {
                let xi = self.inverse_dual_map(x)?;
                let value = self.eval(&xi);
                let gradient = &xi / value;
                let a = self.energy_hessian(&xi)?;
                let a0 = a
                    .matrix
                    .try_inverse()
                    .ok_or_else(|| Error::Numeric("energy Hessian not invertible".into()))?;
                let hessian = (a0 - &gradient * gradient.transpose()) / value;
                let hessian = (&hessian + hessian.transpose()) * 0.5;
                Ok(NormJet {
                    value,
                    gradient,
                    hessian,
                })
            }
        }
    }

    fn clone_euclidean_jet(&self, x: &DVector<f64>) -> Result<NormJet> {
        let r = x.norm();
        let grad = x / r;
        let hess = (DMatrix::identity(self.dim, self.dim) - &grad * grad.transpose()) / r;
        Ok(NormJet {
            value: r,
            gradient: grad,
            hessian: hess,
        })
    }

    /// The duality map `ξ ↦ H(ξ)∇H(ξ)`, extended by `0` at the origin.
    pub fn dual_map(&self, xi: &DVector<f64>) -> DVector<f64> {
        if xi.norm() == 0.0 {
            return DVector::zeros(self.dim);
        }
        match &self.family {
            NormFamily::Euclidean => xi.clone(),
            NormFamily::Ellipse { matrix } => matrix * xi,
            NormFamily::PerturbedEllipse { .. } => {
                let jet = self.jet(xi).expect("nonzero point");
                jet.gradient * jet.value
            }
        }
    }

    /// Inverse of the duality map: returns `ξ` with `H(ξ)∇H(ξ) = x`,
    /// i.e. `H₀(x)∇H₀(x)`. Newton iteration seeded at `x` with the
    /// energy Hessian as Jacobian.
    pub fn inverse_dual_map(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.norm() == 0.0 {
            return Err(Error::DegeneratePoint);
        }
        match &self.family {
            NormFamily::Euclidean => Ok(x.clone()),
            NormFamily::Ellipse { .. } => Ok(self.m_inv() * x),
            NormFamily::PerturbedEllipse { .. } => {
                let scale = x.norm();
                let mut xi = x.clone();
                let max_iter = 100;
                let mut residual = f64::INFINITY;
                for _ in 0..max_iter {
                    let r = x - self.dual_map(&xi);
                    residual = r.norm();
                    if residual <= DUAL_MAP_NEWTON_TOL * scale {
                        return Ok(xi);
                    }
                    let a = self.energy_hessian(&xi)?;
                    let step = a
                        .matrix
                        .lu()
                        .solve(&r)
                        .ok_or_else(|| Error::Numeric("singular Jacobian in dual map".into()))?;
                    xi += step;
                }
                Err(Error::NonConvergence {
                    context: "inverse dual map",
                    iterations: max_iter,
                    residual,
                })
            }
        }
    }

    /// `A(ξ) = ½∇²H²(ξ)` with eigenvalue bounds; requires `ξ ≠ 0`.
    pub fn energy_hessian(&self, xi: &DVector<f64>) -> Result<EnergyHessian> {
        if xi.norm() == 0.0 {
            return Err(Error::DegeneratePoint);
        }
        let matrix = match &self.family {
            NormFamily::Euclidean => DMatrix::identity(self.dim, self.dim),
            NormFamily::Ellipse { matrix } => matrix.clone(),
            NormFamily::PerturbedEllipse { .. } => {
                let jet = self.jet(xi)?;
                let m = &jet.gradient * jet.gradient.transpose() + &jet.hessian * jet.value;
                (&m + m.transpose()) * 0.5
            }
        };
        let eig = matrix.clone().symmetric_eigen();
        let mu_min = eig.eigenvalues.min();
        let mu_max = eig.eigenvalues.max();
        if mu_min <= 0.0 {
            return Err(Error::NonElliptic {
                lambda_star: mu_min,
            });
        }
        Ok(EnergyHessian {
            matrix,
            mu_min,
            mu_max,
        })
    }

    /// Estimates the uniform-ellipticity constants `(λ_*, λ*)` by sampling
    /// directions `v` on the unit sphere and tangent perturbations `τ`.
    pub fn ellipticity_probe(&self, samples: usize) -> Result<(f64, f64)> {
        assert!(samples >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut taken = 0;
        while taken < samples {
            let v = random_unit(&mut rng, self.dim);
            let tau = random_unit(&mut rng, self.dim);
            let tperp = &tau - &v * tau.dot(&v);
            let denom = tperp.norm_squared();
            if denom < 1e-8 {
                continue;
            }
            let jet = self.jet(&v)?;
            let q = (&jet.hessian * &tau).dot(&tau) / denom;
            lo = lo.min(q);
            hi = hi.max(q);
            taken += 1;
        }
        if lo <= 0.0 {
            return Err(Error::NonElliptic { lambda_star: lo });
        }
        Ok((lo, hi))
    }

    /// Numeric dual for the perturbed ellipse: maximize `x·u(φ)/H(u(φ))`
    /// over the unit circle with 8 equispaced seeds and golden-section
    /// refinement.
    fn numeric_dual(&self, x: &DVector<f64>) -> f64 {
        let f = |phi: f64| {
            let u = DVector::from_vec(vec![phi.cos(), phi.sin()]);
            x.dot(&u) / self.eval(&u)
        };
        let seeds = 8;
        let mut best = f64::NEG_INFINITY;
        for i in 0..seeds {
            let center = 2.0 * std::f64::consts::PI * i as f64 / seeds as f64;
            let half = std::f64::consts::PI / seeds as f64;
            let v = golden_max(f, center - half, center + half, 1e-12);
            best = best.max(v);
        }
        best
    }
}

/// Jet of `ξ ↦ sqrt(ξᵀ M ξ)`.
fn quadratic_jet(m: &DMatrix<f64>, xi: &DVector<f64>) -> NormJet {
    let mxi = m * xi;
    let value = mxi.dot(xi).max(0.0).sqrt();
    let gradient = &mxi / value;
    let hessian = m / value - (&mxi * mxi.transpose()) / (value * value * value);
    NormJet {
        value,
        gradient,
        hessian,
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 {
            return v / n;
        }
    }
}

/// Golden-section maximization of a smooth unimodal-on-bracket function.
fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
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
    fc.max(fd)
}
